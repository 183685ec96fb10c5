//! Consistency-aware discriminator.
//!
//! A copy of the teacher backbone reads a clean window `[reference, frames]`.
//! `num_extractors` query extractors sit on evenly spaced blocks; each has one
//! learnable query per frame position that cross-attends to that frame's
//! tokens only. Extractor features are averaged into one feature per frame.
//!
//! The local head projects each generated frame's feature to a logit. The
//! global head lets the reference feature attend over all generated-frame
//! features and projects the result to one logit.
//!
//! Parameters live in one [`ParamSet`]: the backbone's tensors first, in the
//! backbone's own order (so its ids index the same binding), then the
//! extractors and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention, AttentionMask};
use crate::audio::AudioTrack;
use crate::autodiff::{Tape, Var};
use crate::dit::{AvatarDit, ModelConfig, Scope};
use crate::nn::{Bound, Linear, ParamId, ParamSet};
use crate::runtime::checkpoint::Checkpoint;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscConfig {
    pub num_extractors: usize,
    /// Generated frames per window; one query per position plus the reference.
    pub frames: usize,
    /// Keep backbone weights fixed during training.
    pub freeze_backbone: bool,
}

impl DiscConfig {
    /// Three extractors, or one per block on shallower backbones.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            num_extractors: 3.min(cfg.layers),
            frames: cfg.window,
            freeze_backbone: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Extractor {
    layer: usize,
    queries: ParamId,
    norm: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    backbone: AvatarDit,
    backbone_len: usize,
    params: ParamSet,
    extractors: Vec<Extractor>,
    local_head: Linear,
    global_q: Linear,
    global_k: Linear,
    global_v: Linear,
    global_o: Linear,
    global_head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscOutput {
    pub per_frame_logits: Vec<f64>,
    pub global_logit: f64,
}

/// Tape handles of one discriminator pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    /// `[frames + 1, model_dim]`, row 0 is the reference.
    pub features: Var,
    /// `[frames, 1]`.
    pub local: Var,
    /// `[1, 1]`.
    pub global: Var,
}

/// Block hosting extractor `j` of `n` on an `layers`-deep backbone.
pub fn extractor_layer(j: usize, n: usize, layers: usize) -> usize {
    j * layers / n
}

impl Discriminator {
    /// Copies the teacher's weights into the backbone and initialises fresh
    /// extractors and heads from `seed`.
    pub fn from_teacher(teacher: &AvatarDit, config: DiscConfig, seed: u64) -> Result<Self> {
        let cfg = teacher.config();
        if config.num_extractors == 0 || config.num_extractors > cfg.layers {
            return Err(Error::Config(format!(
                "need 1..={} extractors for a {}-layer backbone, got {}",
                cfg.layers, cfg.layers, config.num_extractors
            )));
        }
        if config.frames == 0 {
            return Err(Error::Config("discriminator window must hold a generated frame".into()));
        }
        let backbone = teacher.clone();
        let mut params = ParamSet::new();
        for (name, t) in backbone.params().iter() {
            params.add(format!("backbone.{name}"), t.clone());
        }
        let backbone_len = params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let extractors = (0..config.num_extractors)
            .map(|j| {
                let p = format!("extractor.{j}");
                Extractor {
                    layer: extractor_layer(j, config.num_extractors, cfg.layers),
                    queries: params.add(format!("{p}.queries"), Tensor::randn(&mut rng, &[config.frames + 1, d], 1.0)),
                    norm: params.add(format!("{p}.norm"), Tensor::ones(&[d])),
                    q: Linear::new(&mut params, &mut rng, &format!("{p}.q"), (d, d), false, 1.0),
                    k: Linear::new(&mut params, &mut rng, &format!("{p}.k"), (d, d), true, 1.0),
                    v: Linear::new(&mut params, &mut rng, &format!("{p}.v"), (d, d), true, 1.0),
                    o: Linear::new(&mut params, &mut rng, &format!("{p}.o"), (d, d), true, 1.0),
                }
            })
            .collect();
        let local_head = Linear::new(&mut params, &mut rng, "local_head", (d, 1), true, 1.0);
        let global_q = Linear::new(&mut params, &mut rng, "global.q", (d, d), false, 1.0);
        let global_k = Linear::new(&mut params, &mut rng, "global.k", (d, d), true, 1.0);
        let global_v = Linear::new(&mut params, &mut rng, "global.v", (d, d), true, 1.0);
        let global_o = Linear::new(&mut params, &mut rng, "global.o", (d, d), true, 1.0);
        let global_head = Linear::new(&mut params, &mut rng, "global_head", (d, 1), true, 1.0);
        Ok(Self {
            config,
            backbone,
            backbone_len,
            params,
            extractors,
            local_head,
            global_q,
            global_k,
            global_v,
            global_o,
            global_head,
        })
    }

    /// Builds from a teacher checkpoint after checking it was saved for
    /// `expected`.
    pub fn init_from_teacher(ckpt: &Checkpoint, expected: &ModelConfig, config: DiscConfig, seed: u64) -> Result<Self> {
        ckpt.check_compatible(&expected.to_kv())?;
        let teacher = AvatarDit::from_params(expected.clone(), ckpt.params.clone())?;
        Self::from_teacher(&teacher, config, seed)
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.backbone.config()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn extractor_layers(&self) -> Vec<usize> {
        self.extractors.iter().map(|e| e.layer).collect()
    }

    /// Backbone weights as a standalone parameter table, in teacher naming.
    pub fn backbone_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, t) in self.params.iter().take(self.backbone_len) {
            ps.add(name.trim_start_matches("backbone."), t.clone());
        }
        ps
    }

    /// Registers parameters on `tape`; backbone ones as constants when frozen.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                if i < self.backbone_len && self.config.freeze_backbone {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        Bound::from_vars(vars)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }

    /// Per-frame features `[frames + 1, model_dim]` from a clean window
    /// `[(frames + 1) · tokens, channels]`.
    pub fn features(&self, tape: &mut Tape, p: &Bound, window: Var, audio: Option<&AudioTrack>) -> Result<Var> {
        let cfg = self.backbone.config();
        let tpf = cfg.tokens_per_frame;
        let (rows, _) = tape.value(window).dims2()?;
        if rows % tpf != 0 {
            return Err(Error::Config(format!("{rows} rows is not a whole number of {tpf}-token frames")));
        }
        let frames = rows / tpf;
        if frames < 2 {
            return Err(Error::Config("discriminator needs the reference and at least one generated frame".into()));
        }
        if frames - 1 > self.config.frames {
            return Err(Error::Config(format!(
                "{} generated frames exceed the discriminator window of {}",
                frames - 1,
                self.config.frames
            )));
        }
        let sigmas = vec![0.0; frames];
        let positions: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let out = self.backbone.forward_window(tape, p, window, &sigmas, &positions, Scope::Bidirectional, audio)?;
        let own_frame = AttentionMask::from_fn(frames, frames, |q, k| q == k).lift(1, tpf);
        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        let mut sum: Option<Var> = None;
        for e in &self.extractors {
            let h = tape.rmsnorm(out.hidden[e.layer], p[e.norm])?;
            let queries = tape.slice_rows(p[e.queries], 0, frames)?;
            let q = e.q.forward(tape, p, queries)?;
            let k = e.k.forward(tape, p, h)?;
            let v = e.v.forward(tape, p, h)?;
            let a = attention(tape, q, k, v, cfg.heads, Some(&own_frame), scale)?;
            let f = e.o.forward(tape, p, a)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, f)?,
                None => f,
            });
        }
        let sum = sum.expect("at least one extractor");
        Ok(tape.scale(sum, 1.0 / self.extractors.len() as f64))
    }

    /// Local and global logits from per-frame features.
    pub fn heads(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<(Var, Var)> {
        let cfg = self.backbone.config();
        let (frames, _) = tape.value(features).dims2()?;
        let reference = tape.slice_rows(features, 0, 1)?;
        let generated = tape.slice_rows(features, 1, frames - 1)?;
        let local = self.local_head.forward(tape, p, generated)?;
        let q = self.global_q.forward(tape, p, reference)?;
        let k = self.global_k.forward(tape, p, generated)?;
        let v = self.global_v.forward(tape, p, generated)?;
        let a = attention(tape, q, k, v, cfg.heads, None, 1.0 / (cfg.head_dim as f64).sqrt())?;
        let a = self.global_o.forward(tape, p, a)?;
        let global = self.global_head.forward(tape, p, a)?;
        Ok((local, global))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, window: Var, audio: Option<&AudioTrack>) -> Result<DiscVars> {
        let features = self.features(tape, p, window, audio)?;
        let (local, global) = self.heads(tape, p, features)?;
        Ok(DiscVars { features, local, global })
    }

    /// Inference pass over `[reference; frames]`.
    pub fn disc_forward(&self, reference: &Tensor, frames: &Tensor, audio: Option<&AudioTrack>) -> Result<DiscOutput> {
        let mut tape = Tape::inference();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::concat_rows(&[reference, frames])?);
        let out = self.forward(&mut tape, &p, x, audio)?;
        let local = tape.value(out.local).data().to_vec();
        let global = tape.value(out.global).item();
        if !local.iter().all(|v| v.is_finite()) || !global.is_finite() {
            return Err(Error::Config("discriminator produced non-finite logits".into()));
        }
        Ok(DiscOutput {
            per_frame_logits: local,
            global_logit: global,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            layers: 3,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn backbone_is_a_bitwise_copy() {
        let teacher = AvatarDit::new(config(), 5).unwrap();
        let d = Discriminator::from_teacher(&teacher, DiscConfig::for_model(teacher.config()), 1).unwrap();
        assert_eq!(&d.backbone_params(), teacher.params());
        assert_eq!(d.extractor_layers(), vec![0, 1, 2]);
        let again = Discriminator::from_teacher(&teacher, DiscConfig::for_model(teacher.config()), 1).unwrap();
        assert_eq!(d.params(), again.params());
    }

    #[test]
    fn single_extractor_variant() {
        let teacher = AvatarDit::new(config(), 5).unwrap();
        let cfg = DiscConfig {
            num_extractors: 1,
            ..DiscConfig::for_model(teacher.config())
        };
        let d = Discriminator::from_teacher(&teacher, cfg, 1).unwrap();
        assert_eq!(d.extractor_layers(), vec![0]);
        let too_many = DiscConfig {
            num_extractors: 4,
            ..DiscConfig::for_model(teacher.config())
        };
        assert!(Discriminator::from_teacher(&teacher, too_many, 1).is_err());
    }

    #[test]
    fn logit_count_and_single_frame_error() {
        let teacher = AvatarDit::new(config(), 5).unwrap();
        let d = Discriminator::from_teacher(&teacher, DiscConfig::for_model(teacher.config()), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = Tensor::randn(&mut rng, &[2, 4], 1.0);
        let frames = Tensor::randn(&mut rng, &[10, 4], 1.0);
        let out = d.disc_forward(&reference, &frames, None).unwrap();
        assert_eq!(out.per_frame_logits.len(), 5);
        let mut tape = Tape::inference();
        let p = d.bind_frozen(&mut tape);
        let only_ref = tape.constant(reference);
        assert!(d.forward(&mut tape, &p, only_ref, None).is_err());
    }
}
