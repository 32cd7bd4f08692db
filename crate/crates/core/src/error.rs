use thiserror::Error;

/// Errors raised anywhere in the governor pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular to working precision")]
    SingularMatrix,

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("Riccati solution failed the residual test (residual {residual:e})")]
    NotStabilizable { residual: f64 },

    #[error("point lies outside the admissible set")]
    OutsideAdmissibleSet,

    #[error("certification failed in cell {cell}: inflated mu_e = {mu_e} is not negative")]
    CertificationFailed { cell: usize, mu_e: f64 },

    #[error("linearization is not contractive (mu = {mu})")]
    NotContractive { mu: f64 },

    #[error("steady-state map is not affine")]
    NotAffine,

    #[error("region must be an axis-aligned box")]
    UnsupportedRegion,

    #[error("QP solver hit its iteration limit ({0})")]
    MaxIterations(usize),

    #[error("enumeration oracle limited to {limit} constraints, got {found}")]
    TooLarge { limit: usize, found: usize },

    #[error("state left the model's valid domain: {0}")]
    StateOutOfDomain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
