use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Caller supplied arguments that violate a precondition.
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration value makes the operation impossible (e.g. clustering found nothing).
    #[error("configuration: {0}")]
    Config(String),
    /// A loss term or model output stopped being finite.
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error(transparent)]
    Diff(#[from] diffnet::DiffError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Input(msg.into()))
}
