use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Bad configuration text or override; the message names the line or key.
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("failed to read {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite loss {loss} at episode {episode} (episode rng word position {rng_word_pos})")]
    NonFiniteLoss {
        episode: u64,
        loss: f64,
        rng_word_pos: u128,
    },

    #[error("training interrupted at episode {episode}; checkpoint written to {checkpoint}")]
    Interrupted { episode: u64, checkpoint: PathBuf },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
