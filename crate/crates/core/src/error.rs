use thiserror::Error;

use crate::fbsde::CouplingReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation of `{coefficient}` produced a non-finite value")]
    Evaluation { coefficient: String },

    #[error("simulation failed on path {path} at node {node}: `{coefficient}` is not finite")]
    Simulation {
        path: usize,
        node: usize,
        coefficient: String,
    },

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("regression at node {node} is singular (condition number {condition:.3e}); use more paths or a lower basis degree")]
    SingularRegression { node: usize, condition: f64 },

    #[error("Picard coupling diverged after {} iterations", .report.iterations)]
    Divergence { report: Box<CouplingReport> },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Short tag naming the module an error originates from, used when rendering CLI failures.
    pub fn provenance(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Evaluation { .. } => "model",
            Error::Simulation { .. } => "engine",
            Error::Statistics(_) => "engine::stats",
            Error::SingularRegression { .. } | Error::Divergence { .. } => "fbsde",
            Error::Numeric(_) => "numeric",
            Error::Usage(_) => "usage",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }
}
