use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("metric error: {0}")]
    Metric(String),

    /// A volume or tensor holds NaN or infinity.
    #[error("non-finite data: {0}")]
    NonFiniteData(String),

    /// Training diverged; `component` names the offending quantity.
    #[error("non-finite {component} at step {step}")]
    NonFinite { step: usize, component: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
