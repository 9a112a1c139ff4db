use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not fit the config: {0}")]
    Incompatible(String),
    #[error("malformed sidecar: {0}")]
    Sidecar(String),
    #[error("malformed matches CSV: {0}")]
    Csv(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] hcpm_core::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}
