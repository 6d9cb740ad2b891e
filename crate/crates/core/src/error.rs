use std::fmt;

/// Error classes shared across the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Tensor/layer shape mismatch.
    Dimension(String),
    /// Operation invoked in an invalid state (e.g. stepping a finished episode).
    State(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Dataset is missing something a trainer requires.
    Data(String),
    /// Training diverged (non-finite loss or parameters).
    Training(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dimension(m) => write!(f, "dimension error: {m}"),
            CoreError::State(m) => write!(f, "state error: {m}"),
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::Data(m) => write!(f, "data error: {m}"),
            CoreError::Training(m) => write!(f, "training error: {m}"),
        }
    }
}

impl std::error::Error for CoreError {}

pub type Result<T> = std::result::Result<T, CoreError>;
