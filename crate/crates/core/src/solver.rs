//! Picard iteration, viscosity continuation and the zero-mean pressure
//! constraint.

use log::{debug, info, warn};

use crate::assembly::{apply_dirichlet, assemble_operator, AssemblyOptions, LinearSystem, Problem};
use crate::error::{Error, Result};
use crate::fem::{map_to_physical, QuadratureRule, Space};
use crate::sparse::{bordered_solve, linear_solve, norm2, CsrMatrix};

/// Discrete solution in the global layout `(u_x, u_y, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub coefficients: Vec<f64>,
    /// Lagrange multiplier of the pressure-mean constraint.
    pub multiplier: f64,
    pub iterations: usize,
    /// Algebraic residual at the start of every iteration, plus the final one.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl SolverState {
    pub fn zero(space: &Space) -> SolverState {
        SolverState {
            coefficients: vec![0.0; space.n_dofs()],
            multiplier: 0.0,
            iterations: 0,
            residual_history: Vec::new(),
            converged: false,
        }
    }

    pub fn velocity(&self, space: &Space) -> (&[f64], &[f64]) {
        let n = space.n_nodes();
        (&self.coefficients[..n], &self.coefficients[n..2 * n])
    }

    pub fn pressure(&self, space: &Space) -> &[f64] {
        let n = space.n_nodes();
        &self.coefficients[2 * n..3 * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    /// Relative coefficient increment threshold.
    pub tol_rel: f64,
    /// Euclidean norm threshold on the algebraic residual.
    pub tol_abs: f64,
    pub max_iters: usize,
    /// Decreasing viscosities ending at the target; empty means a single rung.
    pub continuation: Vec<f64>,
    /// Adds the Newton term to the linearization; `false` gives the plain
    /// fixed-point (Picard) iteration.
    pub newton: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { tol_rel: 1e-8, tol_abs: 1e-9, max_iters: 50, continuation: Vec::new(), newton: true }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.tol_rel > 0.0) {
            errs.push(format!("tol_rel must be positive (got {})", self.tol_rel));
        }
        if !(self.tol_abs > 0.0) {
            errs.push(format!("tol_abs must be positive (got {})", self.tol_abs));
        }
        if self.max_iters == 0 {
            errs.push("max_iters must be at least 1".to_string());
        }
        if self.continuation.iter().any(|&nu| !(nu > 0.0)) {
            errs.push("continuation viscosities must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// `integral of phi_a` over the domain for every scalar node.
pub fn mean_weights(space: &Space) -> Vec<f64> {
    let rule = QuadratureRule::triangle(space.degree);
    let refs: Vec<_> = rule
        .points
        .iter()
        .map(|&p| crate::fem::shape_functions(space.degree, p).expect("supported degree"))
        .collect();
    let mut w = vec![0.0; space.n_nodes()];
    for c in 0..space.mesh.n_cells() {
        for (q, (&xi, &wq)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let ev = map_to_physical(&space.maps[c], &refs[q], xi, wq);
            for (k, &a) in space.cell_nodes[c].iter().enumerate() {
                w[a] += ev.weight * ev.values[k];
            }
        }
    }
    w
}

/// Appends the multiplier row and column enforcing `integral of p = 0`.
pub fn enforce_zero_mean(system: &LinearSystem, space: &Space) -> LinearSystem {
    if system.bordered {
        return system.clone();
    }
    let n = system.matrix.nrows;
    let weights = mean_weights(space);
    let offset = 2 * space.n_nodes();
    let mut triplets = system.matrix.triplets();
    for (a, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            triplets.push((offset + a, n, w));
            triplets.push((n, offset + a, w));
        }
    }
    let mut rhs = system.rhs.clone();
    rhs.push(0.0);
    LinearSystem { matrix: CsrMatrix::from_triplets(n + 1, n + 1, &triplets), rhs, bordered: true }
}

/// Mean of the discrete pressure over the domain.
pub fn pressure_mean(state: &SolverState, space: &Space) -> f64 {
    let w = mean_weights(space);
    let p = state.pressure(space);
    w.iter().zip(p).map(|(w, p)| w * p).sum::<f64>() / space.mesh.total_area()
}

/// Shifts the pressure so that its mean vanishes.
pub fn remove_pressure_mean(state: &mut SolverState, space: &Space) {
    let mean = pressure_mean(state, space);
    let n = space.n_nodes();
    for p in &mut state.coefficients[2 * n..3 * n] {
        *p -= mean;
    }
}

/// Dirichlet-constrained, bordered system linearized about `advection`.
pub fn linearized_system(space: &Space, advection: &[f64], problem: &Problem, newton: bool) -> Result<LinearSystem> {
    let opts = AssemblyOptions { newton, ..Default::default() };
    let raw = assemble_operator(space, advection, problem, &opts)?;
    let constrained = apply_dirichlet(&raw, space, &problem.physical.dirichlet);
    Ok(enforce_zero_mean(&constrained, space))
}

fn augmented(state: &SolverState) -> Vec<f64> {
    let mut x = state.coefficients.clone();
    x.push(state.multiplier);
    x
}

fn residual_norm(system: &LinearSystem, x: &[f64]) -> f64 {
    let ax = system.matrix.mul_vec(x);
    norm2(&ax.iter().zip(&system.rhs).map(|(a, b)| a - b).collect::<Vec<_>>())
}

/// Nonlinear solve at the viscosity of `problem`, starting from `initial`.
/// A diverging Newton iteration is retried with the fixed-point iteration.
pub fn solve_stationary(space: &Space, problem: &Problem, config: &SolveConfig, initial: &SolverState) -> Result<SolverState> {
    config.validate().map_err(Error::Config)?;
    problem.validate()?;
    if initial.coefficients.len() != space.n_dofs() {
        return Err(Error::DimensionMismatch { expected: space.n_dofs(), got: initial.coefficients.len() });
    }
    if !config.newton {
        return iterate(space, problem, config, initial, false);
    }
    iterate(space, problem, config, initial, true).or_else(|e| {
        warn!("newton failed ({e}); retrying with fixed-point iteration");
        iterate(space, problem, config, initial, false)
    })
}

/// Residual growth over the first residual that counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1e8;
/// Smallest Newton step length tried before giving up.
const MIN_STEP: f64 = 1.0 / 1024.0;

/// Fixed-point or Newton iteration. Newton steps are halved until the
/// residual decreases.
fn iterate(space: &Space, problem: &Problem, config: &SolveConfig, initial: &SolverState, newton: bool) -> Result<SolverState> {
    let label = if newton { "newton" } else { "picard" };
    let mut x = augmented(initial);
    let mut system = linearized_system(space, &x, problem, newton)?;
    let mut res = residual_norm(&system, &x);
    let mut history = vec![res];
    for it in 0..config.max_iters {
        debug!("{label} {it}: residual {res:e}");
        if res <= config.tol_abs {
            return Ok(finish(space, x, it, history));
        }
        if !res.is_finite() || res > DIVERGENCE_FACTOR * history[0].max(config.tol_abs) {
            break;
        }
        let y = if system.bordered {
            bordered_solve(&system.matrix, &system.rhs)?
        } else {
            linear_solve(&system.matrix, &system.rhs)?
        };
        let step: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let mut alpha = 1.0;
        let (trial, trial_system, trial_res) = loop {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a + alpha * d).collect();
            let trial_system = linearized_system(space, &trial, problem, newton)?;
            let trial_res = residual_norm(&trial_system, &trial);
            if !newton || trial_res <= (1.0 - 1e-4 * alpha) * res {
                break (trial, trial_system, trial_res);
            }
            if alpha <= MIN_STEP {
                let last = history.last().copied().unwrap_or(f64::NAN);
                return Err(Error::NonConvergence { iterations: it + 1, last, residual_history: history });
            }
            alpha *= 0.5;
        };
        if alpha < 1.0 {
            debug!("{label} {it}: step length {alpha}");
        }
        let incr = alpha * norm2(&step) / norm2(&trial).max(f64::MIN_POSITIVE);
        x = trial;
        system = trial_system;
        res = trial_res;
        history.push(res);
        if incr <= config.tol_rel {
            return Ok(finish(space, x, it + 1, history));
        }
    }
    let last = history.last().copied().unwrap_or(f64::NAN);
    Err(Error::NonConvergence { iterations: history.len() - 1, last, residual_history: history })
}

fn finish(space: &Space, mut x: Vec<f64>, iterations: usize, residual_history: Vec<f64>) -> SolverState {
    let multiplier = x.pop().unwrap_or(0.0);
    let mut state = SolverState { coefficients: x, multiplier, iterations, residual_history, converged: true };
    remove_pressure_mean(&mut state, space);
    state
}

/// Runs the viscosity ladder, each rung initialized from the previous one.
pub fn solve_with_continuation(space: &Space, problem: &Problem, config: &SolveConfig) -> Result<SolverState> {
    solve_with_continuation_from(space, problem, config, SolverState::zero(space))
}

pub fn solve_with_continuation_from(
    space: &Space,
    problem: &Problem,
    config: &SolveConfig,
    initial: SolverState,
) -> Result<SolverState> {
    let target = problem.physical.nu;
    let ladder = if config.continuation.is_empty() { vec![target] } else { config.continuation.clone() };
    if ladder.last() != Some(&target) {
        return Err(Error::InvalidArgument(format!(
            "continuation ladder must end at the target viscosity {target} (got {:?})",
            ladder.last()
        )));
    }
    let mut state = initial;
    for &nu in &ladder {
        let rung = problem.with_nu(nu);
        state = solve_stationary(space, &rung, config, &state)
            .map_err(|e| Error::ContinuationFailed { nu, source: Box::new(e) })?;
        info!("nu = {nu}: converged in {} iterations", state.iterations);
    }
    Ok(state)
}
