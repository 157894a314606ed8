use std::path::PathBuf;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("weights do not match the model: {0}")]
    WeightMismatch(String),
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] ava_nn::NnError),
    #[error(transparent)]
    Core(#[from] ava_core::Error),
    #[error("invalid JSON")]
    Json(#[from] serde_json::Error),
}
