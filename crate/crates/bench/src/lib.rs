//! Fixtures shared by the streaming benchmarks: a seeded toy student with
//! non-trivial weights and matching conditioning.

use chunkflow_core::audio::{synth_features, AudioTrack, MaskPattern};
use chunkflow_core::dit::{AvatarDit, Mode, ModelConfig};
use chunkflow_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub model: AvatarDit,
    pub reference: Tensor,
    pub audio: AudioTrack,
}

/// Student with weights jittered away from the zero-output init, plus a
/// reference frame and audio for `chunks` chunks.
pub fn fixture(config: ModelConfig, chunks: usize, seed: u64) -> Fixture {
    let mut model = AvatarDit::new(ModelConfig { mode: Mode::Student, ..config }, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let cfg = model.config().clone();
    let reference = Tensor::randn(&mut rng, &[cfg.tokens_per_frame, cfg.latent_channels], 1.0);
    let audio = synth_features(seed, chunks * cfg.chunk, cfg.audio_dim, &MaskPattern::Alternating { period: 4 })
        .expect("valid pattern");
    Fixture { model, reference, audio }
}
