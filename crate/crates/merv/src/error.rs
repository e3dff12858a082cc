use std::fmt;

/// Errors shared across the pipeline.
#[derive(Debug)]
pub enum MervError {
    /// Shape or axis mismatch in a tensor operation.
    Dimension(String),
    /// Temporal alignment cannot be satisfied for an encoder.
    Alignment(String),
    /// Malformed container file, CSV, or checkpoint.
    Format(String),
    /// Invalid run configuration (caught before any compute starts).
    Config(String),
    /// Training diverged or was asked to do something impossible.
    Training { step: usize, message: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, MervError>;

impl fmt::Display for MervError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MervError::Dimension(m) => write!(f, "dimension error: {m}"),
            MervError::Alignment(m) => write!(f, "alignment error: {m}"),
            MervError::Format(m) => write!(f, "format error: {m}"),
            MervError::Config(m) => write!(f, "config error: {m}"),
            MervError::Training { step, message } => {
                write!(f, "training error at step {step}: {message}")
            }
            MervError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for MervError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            MervError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for MervError {
    fn from(e: std::io::Error) -> Self {
        MervError::Io(e)
    }
}

impl MervError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        MervError::Dimension(msg.into())
    }

    pub fn alignment(msg: impl Into<String>) -> Self {
        MervError::Alignment(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        MervError::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MervError::Config(msg.into())
    }

    /// Short machine-readable category, used by the CLI for structured exits.
    pub fn category(&self) -> &'static str {
        match self {
            MervError::Dimension(_) => "dimension",
            MervError::Alignment(_) => "alignment",
            MervError::Format(_) => "format",
            MervError::Config(_) => "config",
            MervError::Training { .. } => "training",
            MervError::Io(_) => "io",
        }
    }
}
