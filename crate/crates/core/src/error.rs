use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that does not fit the model or coder.
    #[error("input error: {0}")]
    Input(String),
    /// Incompatible configuration or dimensions.
    #[error("config error: {0}")]
    Config(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed or inconsistent checkpoint.
    #[error("format error{}: {message}", tensor.as_ref().map(|t| format!(" in tensor `{t}`")).unwrap_or_default())]
    Format {
        tensor: Option<String>,
        message: String,
    },
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("unknown token at bytes {start}..{end}: {span:?}")]
    UnknownToken {
        start: usize,
        end: usize,
        span: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(tensor: Option<&str>, message: impl Into<String>) -> Self {
        Error::Format {
            tensor: tensor.map(str::to_owned),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
