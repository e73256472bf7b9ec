use thiserror::Error;

/// Errors raised by the simulator, the saddle-point solver and their helpers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input encountered in {0}")]
    NonFinite(&'static str),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("every unlabeled point was rejected by pseudo-label selection and the bias is free")]
    AllRejected,

    #[error("bias root not bracketed in [{lo}, {hi}] (residuals {r_lo:e}, {r_hi:e})")]
    BiasBracket { lo: f64, hi: f64, r_lo: f64, r_hi: f64 },

    #[error("negative conditional variance {0:e} in the local field")]
    NegativeVariance(f64),

    #[error("step t={t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, t: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                t,
                source: Box::new(e),
            },
        }
    }

    /// Strips any step annotation.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }
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

pub type Result<T> = std::result::Result<T, Error>;
