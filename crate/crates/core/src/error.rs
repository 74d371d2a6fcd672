use thiserror::Error;

/// Errors raised by model construction, likelihood evaluation and fitting.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter vector: {0}")]
    InvalidTheta(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("covariance matrix of component {component} is not positive definite")]
    SingularCovariance { component: usize },

    #[error("mixture weight of component {component} is not in (0, 1)")]
    DegenerateWeight { component: usize },

    #[error("normal-equation matrix of the GLS step is singular")]
    SingularSystem,

    #[error("component {component} has effective size {size:.3}, below the minimum {min}")]
    EmptyComponent {
        component: usize,
        size: f64,
        min: usize,
    },

    #[error("negative Hessian is not positive definite (not an interior maximum)")]
    NotPositiveDefinite,

    #[error("all {} EM starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("model grid has {cells} cells, above the enumeration limit {limit}")]
    EnumerationTooLarge { cells: u128, limit: u128 },

    #[error("need at least {needed} bootstrap replicates, got {got}")]
    TooFewReplicates { needed: usize, got: usize },

    #[error("degenerate contingency table: {0}")]
    DegenerateTable(String),
}

pub type Result<T> = std::result::Result<T, Error>;
