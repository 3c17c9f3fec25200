use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Index { .. } => "index",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::Training(_) => "training",
            Error::Domain(_) => "domain",
            Error::Format(_) => "format",
            Error::Framing(_) => "framing",
            Error::Protocol(_) => "protocol",
            Error::Io(_) => "io",
        }
    }
}
