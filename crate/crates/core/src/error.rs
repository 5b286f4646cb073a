use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numeric failure in {location}: {message}")]
    Numeric { location: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn numeric(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, also used to pick CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Serde(_) => "config",
            Error::Io { .. } | Error::Format { .. } => "io",
            Error::Numeric { .. } | Error::DegenerateInput(_) | Error::DegenerateVector(_) => {
                "numeric"
            }
            Error::Contract(_) | Error::DegenerateMask(_) => "contract",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
