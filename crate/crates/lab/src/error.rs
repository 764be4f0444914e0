use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] collapse_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{origin}:{line}: {msg}")]
    Parse { origin: String, line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
