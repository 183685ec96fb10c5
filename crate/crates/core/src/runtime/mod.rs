//! Everything around the model at run time: configuration, checkpoints,
//! the streaming pipeline and its metrics, and drift diagnostics.

pub mod checkpoint;
pub mod config;
pub mod drift;
pub mod metrics;
pub mod pipeline;
