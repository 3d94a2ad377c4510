use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("container format error: {0}")]
    Format(String),
    #[error("container version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
}
