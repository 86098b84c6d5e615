use thiserror::Error;

/// Errors raised by model construction, simulation and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("structure violation: {0}")]
    Structure(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("unstable model: {0}")]
    Unstable(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("identifiability failure: {0}")]
    Identifiability(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    /// An error raised inside one of the six identification steps.
    #[error("step {step}: {source}")]
    Step {
        step: u8,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(step: u8) -> impl FnOnce(Error) -> Error {
        move |e| Error::Step {
            step,
            source: Box::new(e),
        }
    }

    /// The identification step that raised this error, if any.
    pub fn step(&self) -> Option<u8> {
        match self {
            Error::Step { step, .. } => Some(*step),
            _ => None,
        }
    }

    /// Innermost error, with step tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
