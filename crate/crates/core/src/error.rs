use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ghost values are stale; sync ghosts before differentiating")]
    StaleGhosts,

    #[error("non-finite value in chart {chart} at node {node} (z = {z})")]
    NonFinite { chart: usize, node: usize, z: String },

    #[error("automorphy factors do not commute (residual {0:.3e})")]
    CocycleViolated(f64),

    #[error("transition matrix is singular on the overlap")]
    SingularTransition,

    #[error("metric violates the gluing compatibility (residual {0:.3e})")]
    Incompatible(f64),

    #[error("matrix field is not positive definite in chart {chart} at node {node}")]
    NotPositive { chart: usize, node: usize },

    #[error("rank or base mismatch: {0}")]
    Mismatch(String),

    #[error("subbundle inclusion degenerates: {0}")]
    DegenerateInclusion(String),

    #[error(
        "slopes must agree for the decomposition (sub {sub:.8}, bundle {bundle:.8}, quotient {quot:.8})"
    )]
    SlopeMismatch { sub: f64, bundle: f64, quot: f64 },

    #[error("inadmissible flag: {0}")]
    InadmissibleFlag(String),

    #[error("time step underflow at t = {t:.6} (he_defect {he_defect:.3e}, |log h| {log_h:.3e})")]
    DtUnderflow { t: f64, he_defect: f64, log_h: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
