//! Residual a posteriori error estimator, maximum marking and the adaptive
//! solve-estimate-mark-refine loop.

use log::info;
use rayon::prelude::*;

use crate::assembly::{dot, Problem};
use crate::error::{Error, Result};
use crate::fem::{eval_fields, eval_fields_at, line_rule, map_to_physical, shape_functions, QuadratureRule, Space};
use crate::mesh::{FacetTag, Mesh};
use crate::solver::{solve_stationary, solve_with_continuation_from, SolveConfig, SolverState};
use crate::verification::{error_norms, reported_dofs, slip_norm, ErrorReport, ExactSolution, Locator};

/// Per-cell squared indicators and the global estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBreakdown {
    /// `h_K^2 / nu || R_K ||^2`.
    pub residual: Vec<f64>,
    /// Stress jumps over interior facets of the cell.
    pub jump: Vec<f64>,
    /// Slip-constraint residuals over Navier facets of the cell.
    pub navier: Vec<f64>,
    /// Sum of the three contributions.
    pub total: Vec<f64>,
    pub psi: f64,
}

impl EstimatorBreakdown {
    pub fn indicator(&self, c: usize) -> f64 {
        self.total[c].sqrt()
    }
}

/// `h_K^2 / nu || f_h + 2 nu div e(u_h) - u_h.grad u_h - grad p_h ||^2` with
/// `f_h` the nodal interpolant of the forcing.
pub fn element_residual(space: &Space, state: &SolverState, problem: &Problem, c: usize) -> f64 {
    let rule = QuadratureRule::triangle(2 * space.degree + 2);
    element_residual_with(space, state, problem, c, &rule)
}

fn element_residual_with(space: &Space, state: &SolverState, problem: &Problem, c: usize, rule: &QuadratureRule) -> f64 {
    let nu = problem.physical.nu;
    let f_nodes: Vec<[f64; 2]> =
        space.cell_nodes[c].iter().map(|&a| (problem.physical.force)(space.node_coords[a])).collect();
    let mut r2 = 0.0;
    for (&xi, &w) in rule.points.iter().zip(&rule.weights) {
        let shape = shape_functions(space.degree, xi).expect("supported degree");
        let ev = map_to_physical(&space.maps[c], &shape, xi, w);
        let fe = eval_fields(space, &state.coefficients, c, &ev);
        let mut fh = [0.0; 2];
        for (k, f) in f_nodes.iter().enumerate() {
            fh[0] += f[0] * ev.values[k];
            fh[1] += f[1] * ev.values[k];
        }
        let mut r = [0.0; 2];
        for i in 0..2 {
            r[i] = fh[i] + 2.0 * nu * fe.div_eps[i] - dot(fe.u, fe.grad_u[i]) - fe.grad_p[i];
        }
        r2 += ev.weight * dot(r, r);
    }
    let h = space.mesh.cell_diameter(c);
    h * h / nu * r2
}

fn traction(fe: &crate::fem::FieldEval, nu: f64, n: [f64; 2]) -> [f64; 2] {
    // (p I - 2 nu e(u)) n
    let e = fe.eps();
    [fe.p * n[0] - 2.0 * nu * dot(e[0], n), fe.p * n[1] - 2.0 * nu * dot(e[1], n)]
}

/// `h_E / nu || R_E ||^2` with `R_E` half the jump of `(p I - 2 nu e(u_h)) n`.
pub fn edge_jump(space: &Space, state: &SolverState, problem: &Problem, f: usize) -> Result<f64> {
    let facet = &space.mesh.facets[f];
    let Some((nb, _)) = facet.neighbor else {
        return Err(Error::InvalidArgument(format!("facet {f} is on the boundary")));
    };
    let nu = problem.physical.nu;
    let geo = space.mesh.facet_geometry(f);
    let [a, b] = facet.vertices;
    let (pa, pb) = (space.mesh.vertices[a], space.mesh.vertices[b]);
    let (sx, sw) = line_rule(2 * space.degree + 1);
    let mut j2 = 0.0;
    for (&s, &ws) in sx.iter().zip(&sw) {
        let x = [(1.0 - s) * pa[0] + s * pb[0], (1.0 - s) * pa[1] + s * pb[1]];
        let t_own = traction(&eval_fields_at(space, &state.coefficients, facet.owner, x), nu, geo.normal);
        let t_nb = traction(&eval_fields_at(space, &state.coefficients, nb, x), nu, geo.normal);
        let r = [0.5 * (t_own[0] - t_nb[0]), 0.5 * (t_own[1] - t_nb[1])];
        j2 += ws * geo.length * dot(r, r);
    }
    Ok(geo.length / nu * j2)
}

/// `(|| 2 nu n'e(u_h)t + beta u_h.t - g_t ||^2, gamma^2 nu / h_E || u_h.n - g_n ||^2)`
/// on a Navier facet; the data vanish for the homogeneous condition.
pub fn navier_residual(space: &Space, state: &SolverState, problem: &Problem, f: usize) -> Result<(f64, f64)> {
    if space.mesh.facet_tag[f] != FacetTag::Navier {
        return Err(Error::InvalidArgument(format!("facet {f} is not a Navier facet")));
    }
    let nu = problem.physical.nu;
    let (gamma, beta) = (problem.nitsche.gamma, problem.nitsche.beta);
    let geo = space.mesh.facet_geometry(f);
    let (n, t, h) = (geo.normal, geo.tangent, geo.length);
    let [a, b] = space.mesh.facets[f].vertices;
    let (pa, pb) = (space.mesh.vertices[a], space.mesh.vertices[b]);
    let (sx, sw) = line_rule(2 * space.degree + 1);
    let (mut r1, mut r2) = (0.0, 0.0);
    for (&s, &ws) in sx.iter().zip(&sw) {
        let x = [(1.0 - s) * pa[0] + s * pb[0], (1.0 - s) * pa[1] + s * pb[1]];
        let fe = eval_fields_at(space, &state.coefficients, geo.owner, x);
        let data = problem.navier_values(x, n, t);
        let e = fe.eps();
        let tang = 2.0 * nu * dot(n, [dot(e[0], t), dot(e[1], t)]) + beta * dot(fe.u, t) - data.tangential_traction;
        let norm = dot(fe.u, n) - data.normal_velocity;
        r1 += ws * h * tang * tang;
        r2 += ws * h * norm * norm;
    }
    Ok((r1, gamma * gamma * nu / h * r2))
}

/// Full estimator with per-cell breakdown.
pub fn estimate(space: &Space, state: &SolverState, problem: &Problem) -> Result<EstimatorBreakdown> {
    let mesh = &space.mesh;
    let nu = problem.physical.nu;
    let rule = QuadratureRule::triangle(2 * space.degree + 2);
    let residual: Vec<f64> = (0..mesh.n_cells())
        .into_par_iter()
        .map(|c| element_residual_with(space, state, problem, c, &rule))
        .collect();
    let facet_values: Vec<Option<f64>> = (0..mesh.n_facets())
        .into_par_iter()
        .map(|f| match mesh.facet_tag[f] {
            FacetTag::Interior => edge_jump(space, state, problem, f).map(Some),
            FacetTag::Navier => {
                navier_residual(space, state, problem, f).map(|(r1, r2)| Some(mesh.facet_geometry(f).length / nu * r1 + r2))
            }
            FacetTag::Dirichlet => Ok(None),
        })
        .collect::<Result<_>>()?;
    let mut jump = vec![0.0; mesh.n_cells()];
    let mut navier = vec![0.0; mesh.n_cells()];
    for (f, v) in facet_values.iter().enumerate() {
        let Some(v) = v else { continue };
        match mesh.facet_tag[f] {
            FacetTag::Interior => {
                for c in mesh.facets[f].cells() {
                    jump[c] += v;
                }
            }
            _ => navier[mesh.facets[f].owner] += v,
        }
    }
    let total: Vec<f64> = (0..mesh.n_cells()).map(|c| residual[c] + jump[c] + navier[c]).collect();
    let psi = total.iter().sum::<f64>().sqrt();
    Ok(EstimatorBreakdown { residual, jump, navier, total, psi })
}

/// Cells with `Psi_K >= theta * max Psi_K`.
pub fn mark_max(breakdown: &EstimatorBreakdown, theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument(format!("marking fraction must lie in (0, 1) (got {theta})")));
    }
    if breakdown.total.is_empty() {
        return Err(Error::InvalidArgument("empty estimator".into()));
    }
    let max = breakdown.total.iter().fold(0.0f64, |m, &v| m.max(v)).sqrt();
    Ok((0..breakdown.total.len()).filter(|&c| breakdown.indicator(c) >= theta * max).collect())
}

/// One row of an adaptive (or uniform) study.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRecord {
    pub iteration: usize,
    pub dofs: usize,
    pub h_max: f64,
    pub psi: f64,
    /// Present when an exact solution is known.
    pub errors: Option<ErrorReport>,
    pub slip: f64,
    pub solver_iterations: usize,
}

impl AdaptRecord {
    pub fn effectivity(&self) -> Option<f64> {
        self.errors.map(|e| e.effectivity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptStop {
    /// Stop once a solve reaches this many unknowns.
    pub max_dofs: usize,
    pub max_iterations: usize,
}

/// Outcome of a refinement study: its records and the final discrete state.
#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub records: Vec<AdaptRecord>,
    pub space: Space,
    pub state: SolverState,
}

/// How each new mesh is produced from the previous one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Refinement {
    /// Every level halves the mesh size.
    Uniform,
    Adaptive { theta: f64 },
}

/// Two bisection sweeps over all cells: halves every cell diameter.
pub fn refine_uniform(mesh: &Mesh) -> Result<Mesh> {
    let once = mesh.refine(&(0..mesh.n_cells()).collect::<Vec<_>>())?;
    once.refine(&(0..once.n_cells()).collect::<Vec<_>>())
}

/// Interpolates a discrete state onto the nodes of another space covering
/// the same domain.
pub fn transfer(from: &Space, state: &SolverState, to: &Space) -> SolverState {
    let loc = Locator::new(&from.mesh);
    let n = to.n_nodes();
    let mut out = SolverState::zero(to);
    for (a, &x) in to.node_coords.iter().enumerate() {
        if let Some(c) = loc.locate(x) {
            let fe = eval_fields_at(from, &state.coefficients, c, x);
            out.coefficients[a] = fe.u[0];
            out.coefficients[n + a] = fe.u[1];
            out.coefficients[2 * n + a] = fe.p;
        }
    }
    out.multiplier = state.multiplier;
    out
}

/// Solve, estimate, record, then refine, until a stop criterion is met.
/// The first level runs the full continuation ladder; later levels start
/// from the interpolated previous solution at the target viscosity.
pub fn adaptive_loop(
    mesh: Mesh,
    degree: usize,
    problem: &Problem,
    config: &SolveConfig,
    exact: Option<&ExactSolution>,
    refinement: Refinement,
    stop: AdaptStop,
) -> Result<AdaptRun> {
    adaptive_loop_with(mesh, degree, problem, config, exact, refinement, stop, |_, _, _| Ok(()))
}

/// [`adaptive_loop`] with a callback invoked after every solved level.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_loop_with(
    mesh: Mesh,
    degree: usize,
    problem: &Problem,
    config: &SolveConfig,
    exact: Option<&ExactSolution>,
    refinement: Refinement,
    stop: AdaptStop,
    mut on_level: impl FnMut(&AdaptRecord, &Space, &SolverState) -> Result<()>,
) -> Result<AdaptRun> {
    if let Refinement::Adaptive { theta } = refinement {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::InvalidArgument(format!("marking fraction must lie in (0, 1) (got {theta})")));
        }
    }
    if stop.max_iterations == 0 {
        return Err(Error::InvalidArgument("at least one iteration is required".into()));
    }
    let mut space = Space::new(mesh, degree)?;
    let mut records = Vec::new();
    let mut previous: Option<(Space, SolverState)> = None;
    for it in 0..stop.max_iterations {
        let level_err = |e: Error| Error::LevelFailed { level: it, source: Box::new(e) };
        let state = match &previous {
            None => solve_with_continuation_from(&space, problem, config, SolverState::zero(&space)).map_err(level_err)?,
            Some((old_space, old_state)) => {
                let init = transfer(old_space, old_state, &space);
                solve_stationary(&space, problem, config, &init)
                    .or_else(|_| solve_with_continuation_from(&space, problem, config, SolverState::zero(&space)))
                    .map_err(level_err)?
            }
        };
        let est = estimate(&space, &state, problem).map_err(level_err)?;
        let errors = exact.map(|e| error_norms(&space, &state, e).with_psi(est.psi));
        let record = AdaptRecord {
            iteration: it,
            dofs: reported_dofs(&space),
            h_max: space.mesh.h_max(),
            psi: est.psi,
            errors,
            slip: slip_norm(&space, &state),
            solver_iterations: state.iterations,
        };
        info!("level {it}: dofs {} psi {:.4e}", record.dofs, record.psi);
        on_level(&record, &space, &state)?;
        let done = record.dofs >= stop.max_dofs || it + 1 == stop.max_iterations;
        records.push(record);
        if done {
            return Ok(AdaptRun { records, space, state });
        }
        let mesh = match refinement {
            Refinement::Uniform => refine_uniform(&space.mesh).map_err(level_err)?,
            Refinement::Adaptive { theta } => space.mesh.refine(&mark_max(&est, theta)?).map_err(level_err)?,
        };
        let next = Space::new(mesh, degree)?;
        previous = Some((space, state));
        space = next;
    }
    unreachable!("loop returns on its last iteration")
}
