use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("alignment error: field `{field}` differs ({detail})")]
    Alignment { field: &'static str, detail: String },
    #[error("value error at index {index}: {detail}")]
    Value { index: usize, detail: String },
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid JSON")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
