use thiserror::Error;

/// Errors raised by model fitting, simulation and file handling.
#[derive(Debug, Error)]
pub enum MscError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("degenerate signal {index}: {reason}")]
    DegenerateSignal { index: usize, reason: String },

    #[error("atom {0} is not used by any component")]
    AtomUnused(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MscError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MscError::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        MscError::NumericFailure(msg.into())
    }

    /// Attaches signal/component context to a numeric or degenerate error.
    pub(crate) fn in_signal(self, index: usize) -> Self {
        match self {
            MscError::NumericFailure(msg) => {
                MscError::NumericFailure(format!("signal {index}: {msg}"))
            }
            MscError::DegenerateSignal { reason, .. } => MscError::DegenerateSignal { index, reason },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MscError>;
