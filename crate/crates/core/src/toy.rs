//! Synthetic latent-video task for training and tests.
//!
//! Each clip has a random identity latent (the reference frame). Frame `t`
//! is the identity plus a sinusoidal motion along a fixed direction with a
//! per-clip random phase, plus a fixed linear read-out of that frame's
//! talking audio features, plus a little white noise. So generated frames
//! only make sense relative to the reference, and the audio drives part of
//! the content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{synth_features, AudioTrack, MaskPattern};
use crate::dit::ModelConfig;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Debug)]
pub struct ToyTask {
    pub tokens_per_frame: usize,
    pub channels: usize,
    pub audio_dim: usize,
    pub motion_amp: f64,
    /// Radians per frame.
    pub omega: f64,
    pub audio_gain: f64,
    pub noise_std: f64,
    pub identity_std: f64,
    direction: Tensor,
    readout: Tensor,
}

/// One clip: reference latent, generated frames and their audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `[tokens, channels]`.
    pub reference: Tensor,
    /// `[frames · tokens, channels]`.
    pub frames: Tensor,
    pub audio: AudioTrack,
}

impl ToyTask {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = cfg.tokens_per_frame * cfg.latent_channels;
        let d = Tensor::randn(&mut rng, &[numel], 1.0);
        let n = d.norm();
        let direction = d.map(|v| v / n * (numel as f64).sqrt());
        let readout = Tensor::randn(&mut rng, &[cfg.audio_dim, numel], 1.0 / (cfg.audio_dim as f64).sqrt());
        Self {
            tokens_per_frame: cfg.tokens_per_frame,
            channels: cfg.latent_channels,
            audio_dim: cfg.audio_dim,
            motion_amp: 0.6,
            omega: 0.45,
            audio_gain: 0.5,
            noise_std: 0.05,
            identity_std: 1.0,
            direction,
            readout,
        }
    }

    pub fn frame_numel(&self) -> usize {
        self.tokens_per_frame * self.channels
    }

    /// A clip of `frames` generated frames with the given mask pattern.
    pub fn clip(&self, seed: u64, frames: usize, pattern: &MaskPattern) -> Result<Clip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let audio = synth_features(rng.random(), frames, self.audio_dim, pattern)?;
        let numel = self.frame_numel();
        let reference = Tensor::randn(&mut rng, &[numel], self.identity_std);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (talking, _) = audio.apply_mask();
        let drive = talking.matmul(&self.readout)?;
        let noise = Tensor::randn(&mut rng, &[frames, numel], self.noise_std);
        let data = Tensor::from_fn(&[frames, numel], |i| {
            let (t, j) = (i / numel + 1, i % numel);
            reference.data()[j]
                + self.motion_amp * (self.omega * t as f64 + phase).sin() * self.direction.data()[j]
                + self.audio_gain * drive.data()[i]
                + noise.data()[i]
        });
        Ok(Clip {
            reference: reference.reshape(&[self.tokens_per_frame, self.channels])?,
            frames: data.reshape(&[frames * self.tokens_per_frame, self.channels])?,
            audio,
        })
    }

    /// Mixed talking/listening clip, the default training distribution.
    pub fn training_clip(&self, seed: u64, frames: usize) -> Result<Clip> {
        let period = 3 + (seed % 5) as usize;
        self.clip(seed, frames, &MaskPattern::Alternating { period })
    }
}
