use thiserror::Error;

/// Errors raised by the integration, sampling and certification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NumericalDomain(String),

    #[error("requested derivative order {requested} exceeds the available order {available}")]
    Order { requested: usize, available: usize },

    #[error("bound constants infeasible: {0}")]
    ConstantsInfeasible(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("step size collapsed to {step:e} at t = {t}")]
    StepCollapse { t: f64, step: f64 },

    #[error("truncated flow escaped to a non-finite value at t = {t}")]
    BlowUp { t: f64 },

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("reference oracle unreliable: estimated error {estimate:e}")]
    OracleUnreliable { estimate: f64 },

    #[error("impulse cap {cap} is below the initial error {e0}")]
    CapTooSmall { cap: f64, e0: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse classification used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::ConstantsInfeasible(_)
            | Error::InfeasibleBudget(_)
            | Error::StepCollapse { .. }
            | Error::CapTooSmall { .. } => ErrorCategory::Infeasible,
            Error::NumericalDomain(_) | Error::BlowUp { .. } | Error::OracleUnreliable { .. } => {
                ErrorCategory::Numerical
            }
            Error::Order { .. }
            | Error::DomainMismatch(_)
            | Error::InvalidParameter(_)
            | Error::Io(_) => ErrorCategory::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Infeasible,
    Numerical,
    Config,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
