pub mod assembly;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod fem;
pub mod mesh;
pub mod solver;
pub mod verification;
pub mod sparse;

pub use error::{Error, Result};
