use std::path::PathBuf;

/// Errors raised by the preference-induction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration or a violated precondition on user input.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A numeric quantity left the finite range.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Rejection sampling hit its retry cap.
    #[error("retry cap of {cap} exhausted while {what}")]
    RetryCap { what: &'static str, cap: usize },
    #[error("remote judge: {0}")]
    Remote(String),
    #[error("refusing to overwrite existing output {0} (pass --force)")]
    Exists(PathBuf),
    #[error("malformed {what}: {msg}")]
    Parse { what: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::Exists(_) | Error::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
