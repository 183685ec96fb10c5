//! Streaming chunk-autoregressive video diffusion at toy scale.
//!
//! A small diffusion transformer generates latent video in fixed-size chunks,
//! each conditioned on a reference frame and its own earlier output through a
//! rolling KV cache that keeps the reference frames permanently and
//! re-anchors rotary positions so indices never leave the training range.

pub mod attention;
pub mod audio;
pub mod autodiff;
pub mod dit;
pub mod discriminator;
pub mod error;
pub mod experiment;
pub mod kv_cache;
pub mod nn;
pub mod runtime;
pub mod scheduler;
pub mod tensor;
pub mod toy;
pub mod train;

pub use attention::{build_block_causal_mask, AttentionMask, ChunkLayout, RopeParams};
pub use audio::{AudioMask, AudioTrack, MaskPattern};
pub use autodiff::{Tape, Var};
pub use discriminator::{DiscConfig, DiscOutput, Discriminator};
pub use dit::{AvatarDit, Mode, ModelConfig, Prediction, Scope};
pub use error::{Error, Result};
pub use kv_cache::{CacheConfig, CacheEntry, CacheState, PositionMode};
pub use nn::ParamSet;
pub use runtime::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use runtime::config::{KvConfig, PipelineConfig};
pub use runtime::drift::drift_report;
pub use runtime::metrics::RunMetrics;
pub use runtime::pipeline::{stream, StreamOutput};
pub use scheduler::{LatentChunk, NoiseSchedule};
pub use tensor::Tensor;
