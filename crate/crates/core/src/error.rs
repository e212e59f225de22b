use std::path::PathBuf;

/// Errors produced anywhere in the kit.
///
/// Every variant renders with a fixed message prefix (`dimension error:`,
/// `config error:`, ...) so the command-line surface can report them verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    NonFinite(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate batch error: {0}")]
    DegenerateBatch(String),

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("label error: value {value} at position {position} is outside 0..=5")]
    Label { value: u8, position: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}, lr {lr:e}")]
    Diverged { epoch: usize, batch: usize, lr: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
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

    /// True for errors caused by invalid user input rather than a failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Label { .. } | Error::Dimension(_)
        )
    }
}
