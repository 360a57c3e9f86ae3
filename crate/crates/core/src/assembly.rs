//! Assembly of the linearized stabilized Nitsche operator.
//!
//! For a frozen advection field `w` the bilinear form is
//!
//! ```text
//! 2nu (e(u), e(v)) + (w.grad u, v) - (p, div v) - (q, div u)
//!   + sum_E [ -n'(2nu e(u) - pI)n (n.v) - theta n'(2nu e(v) - qI)n (n.u)
//!             + beta (t.u)(t.v) + gamma nu / h_E (u.n)(v.n) ]          (Navier facets)
//!   + sum_K tau (-2nu div e(u) + w.grad u + grad p, -2nu div e(v) + w.grad v - grad q)
//!   + sum_K delta (div u, div v)
//! ```
//!
//! with `tau`, `delta` evaluated at every quadrature point from `|w(x)|_p`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{line_rule, map_to_physical, shape_functions, QuadratureRule, ShapeEval, Space};
use crate::mesh::{FacetTag, Point};
use crate::sparse::CsrMatrix;

pub type VectorField = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Data on Navier facets as a function of `(x, n, t)`: the prescribed normal
/// velocity and the prescribed tangential traction
/// `2 nu n'e(u)t + beta u.t`. Both are zero for the homogeneous condition.
pub type NavierData = Arc<dyn Fn(Point, [f64; 2], [f64; 2]) -> NavierValues + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NavierValues {
    pub normal_velocity: f64,
    pub tangential_traction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NitscheConfig {
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl NitscheConfig {
    pub fn new(theta: f64, gamma: f64, beta: f64) -> Result<Self> {
        let c = NitscheConfig { theta, gamma, beta };
        c.validate().map_err(|e| Error::InvalidArgument(e.join("; ")))?;
        Ok(c)
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if ![-1.0, 0.0, 1.0].contains(&self.theta) {
            errs.push(format!("theta must be one of -1, 0, 1 (got {})", self.theta));
        }
        if !(self.gamma > 0.0) {
            errs.push(format!("gamma must be positive (got {})", self.gamma));
        }
        if !(self.beta >= 0.0) {
            errs.push(format!("beta must be non-negative (got {})", self.beta));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Default element constant used for all experiments.
pub const DEFAULT_M_K: f64 = 0.0814814;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabConfig {
    pub lambda: f64,
    pub m_k: f64,
    /// Index of the pointwise `l_p` velocity norm, `f64::INFINITY` allowed.
    pub p_norm: f64,
}

impl Default for StabConfig {
    fn default() -> Self {
        StabConfig { lambda: 1.0, m_k: DEFAULT_M_K, p_norm: 2.0 }
    }
}

impl StabConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.lambda > 0.0) {
            errs.push(format!("lambda must be positive (got {})", self.lambda));
        }
        if !(self.m_k > 0.0 && self.m_k <= 1.0 / 3.0) {
            errs.push(format!("m_k must lie in (0, 1/3] (got {})", self.m_k));
        }
        if !(self.p_norm >= 1.0) {
            errs.push(format!("p_norm must be >= 1 (got {})", self.p_norm));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn velocity_norm(&self, u: [f64; 2]) -> f64 {
        let p = self.p_norm;
        if p == f64::INFINITY {
            u[0].abs().max(u[1].abs())
        } else if p == 2.0 {
            u[0].hypot(u[1])
        } else if p == 1.0 {
            u[0].abs() + u[1].abs()
        } else {
            (u[0].abs().powf(p) + u[1].abs().powf(p)).powf(1.0 / p)
        }
    }
}

#[derive(Clone)]
pub struct PhysicalConfig {
    pub nu: f64,
    pub force: VectorField,
    pub dirichlet: VectorField,
    /// Inhomogeneous Navier data; `None` means `u.n = 0` and zero traction.
    pub navier_data: Option<NavierData>,
    /// Prescribed divergence `div u = g`; `None` means incompressible.
    pub mass_source: Option<ScalarField>,
}

impl std::fmt::Debug for PhysicalConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhysicalConfig")
            .field("nu", &self.nu)
            .field("navier_data", &self.navier_data.is_some())
            .field("mass_source", &self.mass_source.is_some())
            .finish_non_exhaustive()
    }
}

impl PhysicalConfig {
    /// Zero forcing and the given Dirichlet velocity.
    pub fn new(nu: f64, dirichlet: VectorField) -> Self {
        PhysicalConfig {
            nu,
            force: Arc::new(|_| [0.0, 0.0]),
            dirichlet,
            navier_data: None,
            mass_source: None,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        if self.nu > 0.0 {
            Ok(())
        } else {
            Err(vec![format!("nu must be positive (got {})", self.nu)])
        }
    }
}

/// Everything that defines the continuous problem and its discretization
/// parameters, apart from the mesh.
#[derive(Clone, Debug)]
pub struct Problem {
    pub physical: PhysicalConfig,
    pub nitsche: NitscheConfig,
    pub stab: StabConfig,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.physical.validate(), self.nitsche.validate(), self.stab.validate()] {
            if let Err(e) = r {
                errs.extend(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn with_nu(&self, nu: f64) -> Problem {
        let mut p = self.clone();
        p.physical.nu = nu;
        p
    }
}

/// Piecewise factor switching between the diffusive and advective regimes.
pub fn xi(y: f64) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(Error::InvalidArgument(format!("xi undefined for {y}")));
    }
    Ok(if y < 1.0 { y } else { 1.0 })
}

pub fn local_reynolds(u_norm: f64, h_k: f64, nu: f64, m_k: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::InvalidArgument(format!("nu must be positive (got {nu})")));
    }
    if !(u_norm >= 0.0 && h_k >= 0.0 && m_k >= 0.0) {
        return Err(Error::InvalidArgument("local Reynolds inputs must be non-negative".into()));
    }
    Ok(m_k * u_norm * h_k / (4.0 * nu))
}

/// Stabilization parameters `(tau, delta)`. The `u_norm -> 0` limit of `tau`
/// is taken analytically.
pub fn tau_delta(u_norm: f64, h_k: f64, nu: f64, stab: &StabConfig) -> Result<(f64, f64)> {
    if !(h_k > 0.0) || !(nu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau/delta need h_K > 0 and nu > 0 (got h_K = {h_k}, nu = {nu})"
        )));
    }
    let re = local_reynolds(u_norm, h_k, nu, stab.m_k)?;
    Ok(if re < 1.0 {
        (
            stab.m_k * h_k * h_k / (8.0 * nu),
            stab.lambda * stab.m_k * (u_norm * h_k).powi(2) / (4.0 * nu),
        )
    } else {
        (h_k / (2.0 * u_norm), stab.lambda * u_norm * h_k)
    })
}

/// Assembled (square) system over velocity and pressure unknowns, possibly
/// bordered by the pressure-mean constraint.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// True once the zero-mean row/column has been appended.
    pub bordered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondDerivatives {
    /// Skipped for linear elements, where `div e(u)` vanishes identically.
    #[default]
    Auto,
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssemblyOptions {
    pub second_derivatives: SecondDerivatives,
    /// Drop the `tau` and `delta` terms (plain Galerkin + Nitsche).
    pub no_stabilization: bool,
    /// Add the Newton term `(u.grad w, v)` and its right-hand side.
    pub newton: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions { second_derivatives: SecondDerivatives::Auto, no_stabilization: false, newton: false }
    }
}

/// Trial/test function data at one point, for one local unknown.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Basis {
    pub u: [f64; 2],
    pub grad: [[f64; 2]; 2],
    pub eps: [[f64; 2]; 2],
    pub div: f64,
    pub div_eps: [f64; 2],
    pub p: f64,
    pub grad_p: [f64; 2],
}

/// Expands scalar shape data into the `3 * nloc` mixed basis
/// `(u_x nodes, u_y nodes, p nodes)`.
pub(crate) fn mixed_basis(values: &[f64], grads: &[[f64; 2]], hess: Option<&[[f64; 3]]>, out: &mut Vec<Basis>) {
    let n = values.len();
    out.clear();
    out.resize(3 * n, Basis::default());
    for a in 0..n {
        let g = grads[a];
        let h = hess.map(|h| h[a]).unwrap_or([0.0; 3]);
        let lap = h[0] + h[2];
        for c in 0..2 {
            let b = &mut out[c * n + a];
            b.u[c] = values[a];
            b.grad[c] = g;
            for i in 0..2 {
                for j in 0..2 {
                    b.eps[i][j] = 0.5 * (b.grad[i][j] + b.grad[j][i]);
                }
            }
            b.div = g[c];
            // div e(u) = (lap u + grad div u) / 2 for u = phi e_c
            let hc = if c == 0 { [h[0], h[1]] } else { [h[1], h[2]] };
            b.div_eps = [0.5 * hc[0], 0.5 * hc[1]];
            b.div_eps[c] += 0.5 * lap;
        }
        let b = &mut out[2 * n + a];
        b.p = values[a];
        b.grad_p = g;
    }
}

pub(crate) fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn ddot(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
    a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
}

/// Evaluates a discrete vector field (coefficients in the global layout)
/// and its gradient at one point of cell `c`.
pub(crate) fn eval_velocity(space: &Space, coeffs: &[f64], c: usize, values: &[f64], grads: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = space.n_nodes();
    let mut u = [0.0; 2];
    let mut g = [[0.0; 2]; 2];
    for (k, &node) in space.cell_nodes[c].iter().enumerate() {
        for comp in 0..2 {
            let coef = coeffs[node + comp * n];
            u[comp] += coef * values[k];
            g[comp][0] += coef * grads[k][0];
            g[comp][1] += coef * grads[k][1];
        }
    }
    (u, g)
}

struct LocalSystem {
    dofs: Vec<usize>,
    matrix: Vec<f64>,
    rhs: Vec<f64>,
}

pub(crate) struct RefEvals {
    pub rule: QuadratureRule,
    pub evals: Vec<ShapeEval>,
}

impl RefEvals {
    pub fn new(degree: usize, order: usize) -> Result<Self> {
        let rule = QuadratureRule::triangle(order);
        let evals = rule.points.iter().map(|&p| shape_functions(degree, p)).collect::<Result<_>>()?;
        Ok(RefEvals { rule, evals })
    }
}

fn cell_system(
    space: &Space,
    advection: &[f64],
    problem: &Problem,
    opts: &AssemblyOptions,
    refs: &RefEvals,
    c: usize,
) -> LocalSystem {
    let nu = problem.physical.nu;
    let nloc = space.cell_nodes[c].len();
    let nd = 3 * nloc;
    let map = &space.maps[c];
    let h_k = space.mesh.cell_diameter(c);
    let use_hess = space.degree > 1 || opts.second_derivatives == SecondDerivatives::Always;
    let stab_on = !opts.no_stabilization;

    let mut mat = vec![0.0; nd * nd];
    let mut rhs = vec![0.0; nd];
    let mut basis = Vec::with_capacity(nd);
    let mut strong = vec![[0.0; 2]; nd];
    let mut adjoint = vec![[0.0; 2]; nd];
    let dofs = space.cell_dofs(c);
    let stab_newton = opts.newton && stab_on;

    for (q, (&xi_ref, &w_ref)) in refs.rule.points.iter().zip(&refs.rule.weights).enumerate() {
        let ev = map_to_physical(map, &refs.evals[q], xi_ref, w_ref);
        let w = ev.weight;
        let (wv, wgrad) = eval_velocity(space, advection, c, &ev.values, &ev.gradients);
        mixed_basis(&ev.values, &ev.gradients, if use_hess { Some(&ev.hessians) } else { None }, &mut basis);

        let (tau, delta) = if stab_on {
            let un = problem.stab.velocity_norm(wv);
            let td = tau_delta(un, h_k, nu, &problem.stab).expect("validated inputs");
            debug_assert!(td.0 <= problem.stab.m_k * h_k * h_k / (8.0 * nu) * (1.0 + 1e-12));
            td
        } else {
            (0.0, 0.0)
        };

        // Strong operator applied to each trial function and its adjoint on tests.
        for (i, b) in basis.iter().enumerate() {
            let conv = [dot(wv, b.grad[0]), dot(wv, b.grad[1])];
            for d in 0..2 {
                let visc = -2.0 * nu * b.div_eps[d];
                strong[i][d] = visc + conv[d] + b.grad_p[d];
                adjoint[i][d] = visc + conv[d] - b.grad_p[d];
            }
        }

        let f = (problem.physical.force)(ev.point);
        let g_div = problem.physical.mass_source.as_ref().map(|g| g(ev.point)).unwrap_or(0.0);
        let conv_w = [dot(wv, wgrad[0]), dot(wv, wgrad[1])];
        // Strong residual of the linearization point, for the derivative of the test-side advection.
        let mut strong_res = [-f[0], -f[1]];
        if stab_newton {
            for (j, s) in strong.iter().enumerate() {
                let xj = advection[dofs[j]];
                strong_res[0] += xj * s[0];
                strong_res[1] += xj * s[1];
            }
        }
        for i in 0..nd {
            let bi = &basis[i];
            let mut r = dot(f, bi.u) + tau * dot(f, adjoint[i]) - bi.p * g_div + delta * g_div * bi.div;
            if opts.newton {
                r += dot(conv_w, bi.u);
            }
            if stab_newton {
                let test_adv = [dot(wv, bi.grad[0]), dot(wv, bi.grad[1])];
                r += tau * (dot(conv_w, adjoint[i]) + dot(strong_res, test_adv));
            }
            rhs[i] += w * r;
            let row = &mut mat[i * nd..(i + 1) * nd];
            for (j, bj) in basis.iter().enumerate() {
                let conv_j = [dot(wv, bj.grad[0]), dot(wv, bj.grad[1])];
                let mut a = 2.0 * nu * ddot(&bj.eps, &bi.eps) + dot(conv_j, bi.u) - bj.p * bi.div - bi.p * bj.div
                    + tau * dot(strong[j], adjoint[i])
                    + delta * bj.div * bi.div;
                if opts.newton {
                    let react = [dot(wgrad[0], bj.u), dot(wgrad[1], bj.u)];
                    a += dot(react, bi.u);
                    if stab_newton {
                        let test_adv = [dot(bj.u, bi.grad[0]), dot(bj.u, bi.grad[1])];
                        a += tau * (dot(react, adjoint[i]) + dot(strong_res, test_adv));
                    }
                }
                row[j] += w * a;
            }
        }
    }
    LocalSystem { dofs: space.cell_dofs(c), matrix: mat, rhs }
}

fn navier_facet_system(space: &Space, problem: &Problem, f: usize) -> Result<LocalSystem> {
    let mesh = &space.mesh;
    let geo = mesh.facet_geometry(f);
    let c = geo.owner;
    let nu = problem.physical.nu;
    let NitscheConfig { theta, gamma, beta } = problem.nitsche;
    let (n, t, h_e) = (geo.normal, geo.tangent, geo.length);
    let nloc = space.cell_nodes[c].len();
    let nd = 3 * nloc;
    let map = &space.maps[c];
    let [a, b] = mesh.facets[f].vertices;
    let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);

    let mut mat = vec![0.0; nd * nd];
    let mut rhs = vec![0.0; nd];
    let mut basis = Vec::with_capacity(nd);
    let mut sigma_nn = vec![0.0; nd];
    let (sx, sw) = line_rule(2 * space.degree + 2);
    for (&s, &ws) in sx.iter().zip(&sw) {
        let xi_ref = space.facet_reference_point(f, s);
        let ev = map_to_physical(map, &shape_functions(space.degree, xi_ref)?, xi_ref, 0.0);
        let x = [(1.0 - s) * pa[0] + s * pb[0], (1.0 - s) * pa[1] + s * pb[1]];
        let w = ws * h_e;
        mixed_basis(&ev.values, &ev.gradients, None, &mut basis);
        for (i, bi) in basis.iter().enumerate() {
            let en = [dot(bi.eps[0], n), dot(bi.eps[1], n)];
            sigma_nn[i] = 2.0 * nu * dot(n, en) - bi.p;
        }
        let data = problem.navier_values(x, n, t);
        for i in 0..nd {
            let bi = &basis[i];
            let (vn, vt) = (dot(bi.u, n), dot(bi.u, t));
            rhs[i] += w
                * (data.tangential_traction * vt - theta * sigma_nn[i] * data.normal_velocity
                    + gamma * nu / h_e * data.normal_velocity * vn);
            let row = &mut mat[i * nd..(i + 1) * nd];
            for (j, bj) in basis.iter().enumerate() {
                let (un, ut) = (dot(bj.u, n), dot(bj.u, t));
                row[j] += w
                    * (-sigma_nn[j] * vn - theta * sigma_nn[i] * un + beta * vt * ut + gamma * nu / h_e * un * vn);
            }
        }
    }
    Ok(LocalSystem { dofs: space.cell_dofs(c), matrix: mat, rhs })
}

impl Problem {
    pub fn navier_values(&self, x: Point, n: [f64; 2], t: [f64; 2]) -> NavierValues {
        self.physical.navier_data.as_ref().map(|d| d(x, n, t)).unwrap_or_default()
    }
}

/// Assembles the operator linearized about the velocity contained in
/// `advection` (full coefficient vector; only the velocity part is read).
pub fn assemble_operator(
    space: &Space,
    advection: &[f64],
    problem: &Problem,
    opts: &AssemblyOptions,
) -> Result<LinearSystem> {
    if advection.len() < space.n_dofs() {
        return Err(Error::DimensionMismatch { expected: space.n_dofs(), got: advection.len() });
    }
    problem.validate()?;
    let refs = RefEvals::new(space.degree, 2 * space.degree + 2)?;

    let cells: Vec<LocalSystem> = (0..space.mesh.n_cells())
        .into_par_iter()
        .map(|c| cell_system(space, advection, problem, opts, &refs, c))
        .collect();
    let facets: Vec<LocalSystem> = space
        .mesh
        .facets_tagged(FacetTag::Navier)
        .map(|f| navier_facet_system(space, problem, f))
        .collect::<Result<_>>()?;

    let n = space.n_dofs();
    let mut rhs = vec![0.0; n];
    let nnz: usize = cells.iter().chain(&facets).map(|l| l.matrix.len()).sum();
    let mut triplets = Vec::with_capacity(nnz);
    // Merged in cell then facet order: bitwise reproducible.
    for local in cells.iter().chain(&facets) {
        let nd = local.dofs.len();
        for (i, &gi) in local.dofs.iter().enumerate() {
            rhs[gi] += local.rhs[i];
            for (j, &gj) in local.dofs.iter().enumerate() {
                let v = local.matrix[i * nd + j];
                if v != 0.0 {
                    triplets.push((gi, gj, v));
                }
            }
        }
    }
    Ok(LinearSystem { matrix: CsrMatrix::from_triplets(n, n, &triplets), rhs, bordered: false })
}

/// Scalar nodes on the closure of the Dirichlet boundary.
pub fn dirichlet_nodes(space: &Space) -> Vec<usize> {
    let mut on = vec![false; space.n_nodes()];
    for f in space.mesh.facets_tagged(FacetTag::Dirichlet) {
        for a in space.facet_nodes(f) {
            on[a] = true;
        }
    }
    (0..space.n_nodes()).filter(|&a| on[a]).collect()
}

/// Strong Dirichlet conditions by row and column elimination.
pub fn apply_dirichlet(system: &LinearSystem, space: &Space, data: &VectorField) -> LinearSystem {
    let n = space.n_nodes();
    let mut value: Vec<Option<f64>> = vec![None; system.matrix.nrows];
    for a in dirichlet_nodes(space) {
        let g = data(space.node_coords[a]);
        value[a] = Some(g[0]);
        value[a + n] = Some(g[1]);
    }
    let mut rhs = system.rhs.clone();
    let mut triplets = Vec::with_capacity(system.matrix.nnz());
    for r in 0..system.matrix.nrows {
        for (c, v) in system.matrix.row(r) {
            match (value[r], value[c]) {
                (None, None) => triplets.push((r, c, v)),
                (None, Some(g)) => rhs[r] -= v * g,
                _ => {}
            }
        }
    }
    for (r, g) in value.iter().enumerate() {
        if let Some(g) = g {
            triplets.push((r, r, 1.0));
            rhs[r] = *g;
        }
    }
    LinearSystem {
        matrix: CsrMatrix::from_triplets(system.matrix.nrows, system.matrix.ncols, &triplets),
        rhs,
        bordered: system.bordered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{navier_on_top, Mesh};
    use rand::{Rng, SeedableRng};

    fn zero_field() -> VectorField {
        Arc::new(|_| [0.0, 0.0])
    }

    fn problem(theta: f64, beta: f64, nu: f64) -> Problem {
        Problem {
            physical: PhysicalConfig::new(nu, zero_field()),
            nitsche: NitscheConfig::new(theta, 10.0, beta).unwrap(),
            stab: StabConfig::default(),
        }
    }

    #[test]
    fn xi_branches() {
        assert_eq!(xi(0.5).unwrap(), 0.5);
        assert_eq!(xi(1.0).unwrap(), 1.0);
        assert_eq!(xi(7.3).unwrap(), 1.0);
        assert!(xi(-0.1).is_err());
    }

    #[test]
    fn reynolds_values() {
        assert_eq!(local_reynolds(0.0, 0.1, 0.01, DEFAULT_M_K).unwrap(), 0.0);
        let re = local_reynolds(1.0, 0.1, 0.01, DEFAULT_M_K).unwrap();
        assert!((re - 0.2037035).abs() < 1e-12);
        let re2 = local_reynolds(1.0, 0.2, 0.01, DEFAULT_M_K).unwrap();
        assert!((re2 - 2.0 * re).abs() < 1e-15);
        assert!(local_reynolds(1.0, 0.1, 0.0, DEFAULT_M_K).is_err());
    }

    #[test]
    fn tau_delta_branches() {
        let s = StabConfig::default();
        let (tau, delta) = tau_delta(0.0, 0.1, 1.0, &s).unwrap();
        assert!((tau - 0.0814814 * 0.01 / 8.0).abs() < 1e-18);
        assert!((tau - 1.0185175e-4).abs() < 1e-12);
        assert_eq!(delta, 0.0);
        let (tau, delta) = tau_delta(10.0, 0.1, 0.001, &s).unwrap();
        assert!((tau - 0.005).abs() < 1e-15);
        assert!((delta - 1.0).abs() < 1e-15);
        assert!(tau_delta(1.0, 0.0, 1.0, &s).is_err());
        assert!(tau_delta(1.0, 0.1, -1.0, &s).is_err());
    }

    #[test]
    fn tau_bound_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let s = StabConfig::default();
        for _ in 0..1000 {
            let u = 10f64.powf(rng.gen_range(-4.0..3.0));
            let h = 10f64.powf(rng.gen_range(-3.0..0.0));
            let nu = 10f64.powf(rng.gen_range(-5.0..1.0));
            let (tau, _) = tau_delta(u, h, nu, &s).unwrap();
            assert!(tau <= s.m_k * h * h / (8.0 * nu) + 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(NitscheConfig::new(2.0, 10.0, 0.0).is_err());
        assert!(NitscheConfig::new(1.0, 0.0, 0.0).is_err());
        assert!(NitscheConfig::new(1.0, 1.0, -1.0).is_err());
        assert!(NitscheConfig::new(0.0, 1.0, 0.0).is_ok());
        let bad = StabConfig { lambda: 0.0, m_k: 0.5, p_norm: 0.5 };
        assert_eq!(bad.validate().unwrap_err().len(), 3);
    }

    /// Flips the sign of pressure rows: the test pair `(v, q)` becomes `(v, -q)`.
    fn flip_pressure_rows(m: &CsrMatrix, n_nodes: usize) -> CsrMatrix {
        let t: Vec<_> = m
            .triplets()
            .into_iter()
            .map(|(r, c, v)| (r, c, if r >= 2 * n_nodes { -v } else { v }))
            .collect();
        CsrMatrix::from_triplets(m.nrows, m.ncols, &t)
    }

    fn asymmetry(m: &CsrMatrix) -> f64 {
        m.max_abs_diff(&m.transpose()) / m.max_abs().max(1.0)
    }

    #[test]
    fn stokes_limit_symmetry() {
        for degree in 1..=2 {
            let mesh = Mesh::unit_square(3, &navier_on_top).unwrap();
            let space = Space::new(mesh, degree).unwrap();
            let zero = vec![0.0; space.n_dofs()];
            let p = problem(1.0, 0.0, 1.0);
            let full = assemble_operator(&space, &zero, &p, &AssemblyOptions::default()).unwrap();
            let plain_opts = AssemblyOptions { no_stabilization: true, ..Default::default() };
            let plain = assemble_operator(&space, &zero, &p, &plain_opts).unwrap();
            // Galerkin + symmetric Nitsche is symmetric as written.
            assert!(asymmetry(&plain.matrix) <= 1e-12, "degree {degree}");
            // The residual-based terms are symmetric in (u, p) x (v, -q).
            let t: Vec<_> = full
                .matrix
                .triplets()
                .into_iter()
                .map(|(r, c, v)| (r, c, v - plain.matrix.get(r, c)))
                .collect();
            let stab = CsrMatrix::from_triplets(full.matrix.nrows, full.matrix.ncols, &t);
            assert!(asymmetry(&flip_pressure_rows(&stab, space.n_nodes())) <= 1e-12, "degree {degree}");
            if degree == 1 {
                // div e(u) vanishes, so the whole Stokes-limit operator is symmetric.
                assert!(asymmetry(&full.matrix) <= 1e-12);
            }
        }
    }

    #[test]
    fn penalty_on_single_facet() {
        // u = (0, 1) on the facet y = 1 of a one-cell-wide mesh; only the penalty term.
        let mesh = Mesh::unit_square(1, &navier_on_top).unwrap();
        let space = Space::new(mesh, 1).unwrap();
        let mut p = problem(0.0, 0.0, 1.0);
        p.nitsche.gamma = 7.0;
        let f = space.mesh.facets_tagged(FacetTag::Navier).next().unwrap();
        let local = navier_facet_system(&space, &p, f).unwrap();
        let nd = local.dofs.len();
        let nloc = nd / 3;
        // constant unit normal velocity, zero pressure: gradient-free terms only
        let mut u = vec![0.0; nd];
        for a in 0..nloc {
            u[nloc + a] = 1.0;
        }
        let mut e = 0.0;
        for i in 0..nd {
            for j in 0..nd {
                e += u[i] * local.matrix[i * nd + j] * u[j];
            }
        }
        assert!((e - 7.0).abs() < 1e-13, "{e}");
    }

    #[test]
    fn linear_elements_skip_second_derivatives() {
        let mesh = Mesh::unit_square(4, &navier_on_top).unwrap();
        let space = Space::new(mesh, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let adv: Vec<f64> = (0..space.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = problem(1.0, 10.0, 0.05);
        let a = assemble_operator(&space, &adv, &p, &AssemblyOptions::default()).unwrap();
        let opts = AssemblyOptions { second_derivatives: SecondDerivatives::Always, ..Default::default() };
        let b = assemble_operator(&space, &adv, &p, &opts).unwrap();
        assert!(a.matrix.max_abs_diff(&b.matrix) <= 1e-14);
    }

    #[test]
    fn theta_only_changes_navier_dofs() {
        let mesh = Mesh::unit_square(4, &navier_on_top).unwrap();
        let space = Space::new(mesh, 2).unwrap();
        let zero = vec![0.0; space.n_dofs()];
        let a = assemble_operator(&space, &zero, &problem(1.0, 10.0, 1.0), &AssemblyOptions::default()).unwrap();
        let b = assemble_operator(&space, &zero, &problem(-1.0, 10.0, 1.0), &AssemblyOptions::default()).unwrap();
        let mut touching = vec![false; space.n_dofs()];
        for f in space.mesh.facets_tagged(FacetTag::Navier) {
            for d in space.cell_dofs(space.mesh.facets[f].owner) {
                touching[d] = true;
            }
        }
        let diff: Vec<_> = a
            .matrix
            .triplets()
            .into_iter()
            .map(|(r, c, v)| (r, c, v - b.matrix.get(r, c)))
            .filter(|t| t.2.abs() > 1e-14)
            .collect();
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|&(r, c, _)| touching[r] && touching[c]));
    }

    /// `A(x) x - b(x)` of the fixed-point linearization.
    fn nonlinear_residual(space: &Space, x: &[f64], p: &Problem) -> Vec<f64> {
        let sys = assemble_operator(space, x, p, &AssemblyOptions::default()).unwrap();
        sys.matrix.mul_vec(x).iter().zip(&sys.rhs).map(|(a, b)| a - b).collect()
    }

    #[test]
    fn newton_matrix_matches_difference_jacobian() {
        // Divergence-free linear velocity with tau in its constant branch, so
        // the frozen coefficients carry no derivative.
        for degree in 1..=2 {
            let space = Space::new(Mesh::unit_square(3, &navier_on_top).unwrap(), degree).unwrap();
            let mut p = problem(1.0, 10.0, 0.5);
            p.physical.force = Arc::new(|x| [1.0 + x[0], 2.0 * x[1] - 3.0]);
            let n = space.n_nodes();
            let mut x = vec![0.0; space.n_dofs()];
            for (a, q) in space.node_coords.iter().enumerate() {
                x[a] = 0.3 * q[1] + 0.1;
                x[n + a] = 0.2 * q[0] - 0.2;
                x[2 * n + a] = q[0] * q[1];
            }
            let opts = AssemblyOptions { newton: true, ..Default::default() };
            let jac = assemble_operator(&space, &x, &p, &opts).unwrap();
            // Newton system reproduces the nonlinear residual at its linearization point.
            let r0 = nonlinear_residual(&space, &x, &p);
            let rn: Vec<f64> = jac.matrix.mul_vec(&x).iter().zip(&jac.rhs).map(|(a, b)| a - b).collect();
            for (a, b) in r0.iter().zip(&rn) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            let eps = 1e-6;
            for k in [0, 5, n + 3, n + 7, 2 * n + 1] {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += eps;
                xm[k] -= eps;
                let (rp, rm) = (nonlinear_residual(&space, &xp, &p), nonlinear_residual(&space, &xm, &p));
                for r in 0..space.n_dofs() {
                    let fd = (rp[r] - rm[r]) / (2.0 * eps);
                    let got = jac.matrix.get(r, k);
                    assert!((fd - got).abs() <= 1e-6 * (1.0 + got.abs()), "k {degree} col {k} row {r}: {fd} vs {got}");
                }
            }
        }
    }

    #[test]
    fn stabilization_off_gives_plain_rhs() {
        let mesh = Mesh::unit_square(3, &navier_on_top).unwrap();
        let space = Space::new(mesh, 1).unwrap();
        let mut p = problem(1.0, 10.0, 1.0);
        p.physical.force = Arc::new(|x| [x[1], -x[0]]);
        let zero = vec![0.0; space.n_dofs()];
        let opts = AssemblyOptions { no_stabilization: true, ..Default::default() };
        let sys = assemble_operator(&space, &zero, &p, &opts).unwrap();
        // pressure rows receive nothing but the stabilization part of the load
        let n = space.n_nodes();
        assert!(sys.rhs[2 * n..].iter().all(|&v| v == 0.0));
        let stab = assemble_operator(&space, &zero, &p, &AssemblyOptions::default()).unwrap();
        assert!(stab.rhs[2 * n..].iter().any(|&v| v.abs() > 1e-8));
    }

    #[test]
    fn dirichlet_constraint_count() {
        let mesh = Mesh::unit_square(4, &navier_on_top).unwrap();
        for degree in 1..=2 {
            let space = Space::new(mesh.clone(), degree).unwrap();
            let nodes = dirichlet_nodes(&space);
            // brute force: nodes on x = 0, x = 1 or y = 0 (closure includes top corners)
            let expect = space
                .node_coords
                .iter()
                .filter(|p| p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0)
                .count();
            assert_eq!(nodes.len(), expect);
            let zero = vec![0.0; space.n_dofs()];
            let sys = assemble_operator(&space, &zero, &problem(1.0, 10.0, 1.0), &AssemblyOptions::default()).unwrap();
            let data: VectorField = Arc::new(|_| [2.0, -3.0]);
            let bc = apply_dirichlet(&sys, &space, &data);
            let n = space.n_nodes();
            for &a in &nodes {
                assert_eq!(bc.rhs[a], 2.0);
                assert_eq!(bc.rhs[a + n], -3.0);
                assert_eq!(bc.matrix.row(a).collect::<Vec<_>>(), vec![(a, 1.0)]);
            }
        }
    }
}
