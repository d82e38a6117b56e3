use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("truncated record {0}")]
    Truncated(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }

    /// True for failures caused by bad user input (config, arguments, data layout)
    /// as opposed to numeric blow-ups.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Numeric(_) | Error::NonFinite(_) | Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
