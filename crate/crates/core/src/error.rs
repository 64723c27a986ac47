use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("enrichment capacity exceeded at node {node}: {levels} components (cap {cap})")]
    Capacity { node: usize, levels: usize, cap: usize },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("linear solver failed: {0}")]
    LinearSolver(String),

    #[error("nonlinear solve did not converge after {iterations} iterations (residual history {trace:?})")]
    Nonconvergence { iterations: usize, trace: Vec<f64> },

    #[error("time step {step} failed: {source}")]
    TimeStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("optimizer input error: {0}")]
    OptimizerInput(String),

    #[error("subproblem solver failed: {0}")]
    Subproblem(String),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Nonconvergence { .. } | Error::TimeStep { .. } => 3,
            Error::Io { .. } => 4,
            _ => 1,
        }
    }
}
