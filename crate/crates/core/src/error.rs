use thiserror::Error;

use crate::audio::TrackError;
use crate::kv_cache::CacheError;
use crate::runtime::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid chunk layout: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("training diverged at step {step} ({phase}): {detail}")]
    Diverged {
        step: u64,
        phase: &'static str,
        detail: String,
    },
    #[error("audio covers {available} frames, {required} required")]
    AudioExhausted { available: usize, required: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
