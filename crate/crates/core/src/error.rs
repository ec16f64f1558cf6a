use std::path::PathBuf;

/// Errors produced across the motion editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Layout(_) => "layout",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Consistency(_) => "consistency",
            Error::Capacity(_) => "capacity",
            Error::Checkpoint(_) => "checkpoint",
            Error::Numerical(_) => "numerical",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
