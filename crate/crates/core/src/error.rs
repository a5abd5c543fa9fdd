use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("horizon too large: |t| = {0} exceeds 700")]
    HorizonTooLarge(f64),

    #[error("quadrature budget exceeded: {0}")]
    QuadratureBudget(String),

    #[error("tolerance {tolerance:e} not reached in budget (estimate {estimate}, error {error:e})")]
    ToleranceNotReached {
        estimate: f64,
        error: f64,
        tolerance: f64,
    },

    #[error("singular evaluation: target coincides with a source and softening is zero")]
    SingularEvaluation,

    #[error("non-finite force at t = {t}, x = {x:?}")]
    NonFiniteForce { t: f64, x: Vec<f64> },

    #[error("non-finite diagnostic at t = {0}")]
    NonFiniteDiagnostic(f64),

    #[error("rejection sampling efficiency {0:.4} below 1%")]
    RejectionEfficiency(f64),

    #[error("{fraction:.4} of particle mass outside the grid at t = {t}")]
    MassOutsideGrid { t: f64, fraction: f64 },

    #[error("escaped during evaluation at t = {0}")]
    Escaped(f64),

    #[error("Picard iteration did not converge in {iterations} iterations (last contraction ratio {ratio})")]
    NoConvergence { iterations: usize, ratio: f64 },

    #[error("did not escape before t = {0}")]
    DidNotEscape(f64),

    #[error("missing potential snapshots in the field history")]
    MissingPotential,

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("malformed history file: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
