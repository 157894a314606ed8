use std::path::PathBuf;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON")]
    Json(#[from] serde_json::Error),
}
