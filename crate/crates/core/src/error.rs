use thiserror::Error;

/// Errors produced anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate cell {cell}: signed area {area:e}")]
    DegenerateCell { cell: usize, area: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("linear system is singular or numerically ill-conditioned ({0})")]
    Singular(String),

    #[error("linear solve residual {residual:e} exceeds tolerance {tol:e}")]
    LinearSolveInaccurate { residual: f64, tol: f64 },

    #[error("nonlinear iteration did not converge after {iterations} iterations (last residual {last:e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        residual_history: Vec<f64>,
    },

    #[error("continuation failed at nu = {nu}: {source}")]
    ContinuationFailed {
        nu: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("refinement level {level} failed: {source}")]
    LevelFailed {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no interior vortex: |u| minimizer lies on the boundary at ({0}, {1})")]
    NoInteriorVortex(f64, f64),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
