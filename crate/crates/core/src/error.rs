use thiserror::Error;

/// Errors raised across estimation, optimization and I/O.
#[derive(Debug, Error)]
pub enum FgelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate instrument sample")]
    DegenerateSample,

    #[error("unknown {kind} '{name}'")]
    UnknownName { kind: &'static str, name: String },

    #[error("{divergence} argument {value} outside the domain (upper bound {upper})")]
    Domain {
        divergence: &'static str,
        value: f64,
        upper: f64,
    },

    #[error("implied weights have nonpositive total {0}")]
    NonpositiveWeight(f64),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("ill-posed: regularization required")]
    IllPosed,

    #[error("singular system: {0}")]
    Singular(&'static str),

    #[error("line search failed after {halvings} halvings at iteration {iteration}")]
    LineSearch { iteration: usize, halvings: usize },

    #[error("optimizer failed: {message}")]
    Optimizer {
        message: String,
        /// (parameters, objective) records collected before the failure.
        trace: Vec<(Vec<f64>, f64)>,
    },

    #[error("all tuning candidates failed")]
    AllCandidatesFailed,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FgelError>;
