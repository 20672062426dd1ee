use thiserror::Error;

/// Crate-wide error type. Variants are grouped by failure class so the CLI
/// can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {details}")]
    Shape { context: String, details: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input image: {0}")]
    InvalidImage(String),

    #[error("training aborted: loss became non-finite at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
