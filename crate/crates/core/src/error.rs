use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum SclError {
    /// Tensor shape / dimension mismatch.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A caller violated an operation contract (bad labels, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed dataset or checkpoint file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// I/O failure, with the offending path in the message.
    #[error("i/o error: {0}")]
    Io(String),

    /// The generator spec cannot produce pairwise-distinct class codes.
    #[error("generator capacity exceeded: {0}")]
    Capacity(String),

    /// A NaN or Inf appeared where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SclError>;

impl SclError {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        SclError::Io(format!("{}: {}", path.display(), err))
    }
}
