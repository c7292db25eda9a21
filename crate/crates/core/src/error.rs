use thiserror::Error;

pub type Result<T> = std::result::Result<T, GsrError>;

#[derive(Debug, Error)]
pub enum GsrError {
    #[error("disconnected/empty graph: no edge survives the weight threshold")]
    EmptyGraph,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("power iteration did not converge in {iterations} iterations (best estimate {estimate})")]
    NoConvergence { estimate: f64, iterations: usize },

    #[error("non-finite value for filter {filter}, component {component}")]
    NonFinite { filter: usize, component: usize },

    #[error("Langevin chain diverged at step {step} (norm {norm:e})")]
    Diverged { step: usize, norm: f64 },

    #[error("singular posterior system for filter {filter}, component {component}")]
    Singular { filter: usize, component: usize },

    #[error("non-finite iterate at VB iteration {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("training failed: {0}")]
    TrainingFailed(String),

    #[error("no timestamp has full coverage (coverage histogram: {0})")]
    NoFullCoverage(String),

    #[error("unknown node id {0}")]
    UnknownNode(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GsrError {
    /// Short stable identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            GsrError::EmptyGraph => "empty_graph",
            GsrError::InvalidInput(_) => "invalid_input",
            GsrError::DimensionMismatch { .. } => "dimension_mismatch",
            GsrError::NoConvergence { .. } => "no_convergence",
            GsrError::NonFinite { .. } => "non_finite",
            GsrError::Diverged { .. } => "diverged",
            GsrError::Singular { .. } => "singular",
            GsrError::NonFiniteIterate { .. } => "non_finite_iterate",
            GsrError::TrainingFailed(_) => "training_failed",
            GsrError::NoFullCoverage(_) => "no_full_coverage",
            GsrError::UnknownNode(_) => "unknown_node",
            GsrError::Parse(_) => "parse",
            GsrError::Io(_) => "io",
            GsrError::Json(_) => "json",
            GsrError::Csv(_) => "csv",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> GsrError {
    GsrError::InvalidInput(msg.into())
}
