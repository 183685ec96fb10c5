//! Toy interactive-avatar diffusion transformer.
//!
//! Latents are `[frames · tokens_per_frame, latent_channels]` row blocks, one
//! block of `tokens_per_frame` rows per frame. Each transformer block runs, in
//! order and each with a residual: self-attention, cross-attention to a fixed
//! learned prompt, talking-audio attention, listening-audio attention, and a
//! feed-forward layer. Self-attention and the feed-forward layer are gated by
//! per-frame timestep modulation whose projection starts at zero, and the
//! prompt and audio branches have zero-initialised output projections, so a
//! freshly built block is the identity.
//!
//! Teacher and student share one parameter set. They differ only in which
//! frames see which: the teacher attends bidirectionally over the window, the
//! student uses the block-causal mask (or, when streaming, the cached context
//! of a [`CacheState`]).

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention, build_block_causal_mask, chunk_of, AttentionMask, ChunkLayout, RopeParams};
use crate::audio::AudioTrack;
use crate::autodiff::{Tape, Var};
use crate::kv_cache::{CacheEntry, CacheState, EncodedView};
use crate::nn::{Bound, Linear, ParamId, ParamSet};
use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Teacher,
    Student,
}

/// What the network output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prediction {
    /// `v = ε − x₀` for `x_σ = (1−σ)·x₀ + σ·ε`.
    Velocity,
    Epsilon,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub tokens_per_frame: usize,
    pub latent_channels: usize,
    /// Generated frames per training window (`T`); the reference is extra.
    pub window: usize,
    pub chunk: usize,
    pub audio_dim: usize,
    pub time_embed_dim: usize,
    pub prompt_tokens: usize,
    pub ffn_mult: usize,
    pub rope_theta: f64,
    pub mode: Mode,
    pub prediction: Prediction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            head_dim: 32,
            tokens_per_frame: 4,
            latent_channels: 16,
            window: 12,
            chunk: 3,
            audio_dim: 32,
            time_embed_dim: 64,
            prompt_tokens: 4,
            ffn_mult: 4,
            rope_theta: 10_000.0,
            mode: Mode::Teacher,
            prediction: Prediction::Velocity,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the training examples and tests.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            model_dim: 32,
            heads: 2,
            head_dim: 16,
            tokens_per_frame: 2,
            latent_channels: 4,
            window: 12,
            chunk: 3,
            audio_dim: 8,
            time_embed_dim: 16,
            prompt_tokens: 2,
            ffn_mult: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} != heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(TensorError::OddHeadDim(self.head_dim).into());
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("time_embed_dim must be even".into()));
        }
        let positive = [
            self.layers,
            self.tokens_per_frame,
            self.latent_channels,
            self.audio_dim,
            self.prompt_tokens,
            self.ffn_mult,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        ChunkLayout::new(self.window, self.chunk)?;
        Ok(())
    }

    pub fn layout(&self) -> ChunkLayout {
        ChunkLayout::new(self.window, self.chunk).expect("validated layout")
    }

    pub fn rope(&self) -> RopeParams {
        RopeParams {
            head_dim: self.head_dim,
            theta_base: self.rope_theta,
            max_index: self.window,
        }
    }

    /// Values per latent frame.
    pub fn frame_numel(&self) -> usize {
        self.tokens_per_frame * self.latent_channels
    }

    /// Canonical `key=value` lines. `mode` is included last.
    pub fn to_kv(&self) -> String {
        let mut s = self.shape_kv();
        s.push_str(&format!("mode={}\n", self.mode));
        s
    }

    /// Everything that determines parameter shapes and semantics; excludes
    /// `mode` so teacher weights load into a student.
    pub fn shape_kv(&self) -> String {
        format!(
            "layers={}\nmodel_dim={}\nheads={}\nhead_dim={}\ntokens_per_frame={}\nlatent_channels={}\n\
             window={}\nchunk={}\naudio_dim={}\ntime_embed_dim={}\nprompt_tokens={}\nffn_mult={}\n\
             rope_theta={}\nprediction={}\n",
            self.layers,
            self.model_dim,
            self.heads,
            self.head_dim,
            self.tokens_per_frame,
            self.latent_channels,
            self.window,
            self.chunk,
            self.audio_dim,
            self.time_embed_dim,
            self.prompt_tokens,
            self.ffn_mult,
            self.rope_theta,
            self.prediction,
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Teacher => "teacher",
            Mode::Student => "student",
        })
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Prediction::Velocity => "velocity",
            Prediction::Epsilon => "epsilon",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Mode::Teacher),
            "student" => Ok(Mode::Student),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

impl std::str::FromStr for Prediction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "velocity" => Ok(Prediction::Velocity),
            "epsilon" => Ok(Prediction::Epsilon),
            _ => Err(Error::Config(format!("unknown prediction {s:?}"))),
        }
    }
}

/// Which frames the self-attention lets each frame see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Bidirectional,
    BlockCausal,
}

#[derive(Clone, Debug)]
struct AttnIds {
    norm: ParamId,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct BlockIds {
    modulation: Linear,
    self_attn: AttnIds,
    text: AttnIds,
    audio: AttnIds,
    interact: AttnIds,
    ffn_norm: ParamId,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct ModelIds {
    patch_in: Linear,
    spatial: ParamId,
    time1: Linear,
    time2: Linear,
    prompt: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    final_mod: Linear,
    patch_out: Linear,
}

/// Talking/listening features with the frame-level visibility of each audio
/// row from each query frame.
#[derive(Clone, Debug)]
pub struct AudioContext {
    pub talking: Tensor,
    pub listening: Tensor,
    /// `query_frames × audio_rows`.
    pub mask: AttentionMask,
}

/// Cached keys/values a chunk forward attends to, already rotary-encoded.
pub type Context = EncodedView;

/// Inputs for one forward pass over a block of frames.
#[derive(Clone, Debug)]
pub struct FrameBatch<'a> {
    /// `[frames · tokens_per_frame, latent_channels]`.
    pub latents: Var,
    /// Noise level of each frame.
    pub sigmas: &'a [f64],
    /// Rotary index of each frame.
    pub positions: &'a [f64],
    /// Frame-level self-attention mask over `[context frames, batch frames]`
    /// keys; `None` lets every frame see everything.
    pub mask: Option<&'a AttentionMask>,
    pub context: Option<&'a Context>,
    pub audio: Option<&'a AudioContext>,
}

#[derive(Debug)]
pub struct ForwardOut {
    /// Raw network output, `[frames · tokens, latent_channels]`.
    pub output: Var,
    /// Hidden state after each block, `[frames · tokens, model_dim]`.
    pub hidden: Vec<Var>,
    /// Non-encoded keys and values of the batch frames, per layer.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

/// Prediction for a chunk plus the raw KV recorded while computing it.
#[derive(Clone, Debug)]
pub struct ChunkOutput {
    pub clean: Tensor,
    pub entries: Vec<CacheEntry>,
}

#[derive(Clone, Debug)]
pub struct AvatarDit {
    config: ModelConfig,
    params: ParamSet,
    ids: ModelIds,
}

/// `zero_out` zero-initialises the output projection; only for branches that
/// are not already behind a zero-initialised gate.
#[allow(clippy::too_many_arguments)]
fn attn_ids(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, dim: usize, kv_in: usize, kv_bias: bool, zero_out: bool) -> AttnIds {
    AttnIds {
        norm: ps.add(format!("{name}.norm"), Tensor::ones(&[dim])),
        q: Linear::new(ps, rng, &format!("{name}.q"), (dim, dim), false, 1.0),
        k: Linear::new(ps, rng, &format!("{name}.k"), (kv_in, dim), kv_bias, 1.0),
        v: Linear::new(ps, rng, &format!("{name}.v"), (kv_in, dim), kv_bias, 1.0),
        o: Linear::new(ps, rng, &format!("{name}.o"), (dim, dim), kv_bias, if zero_out { 0.0 } else { 1.0 }),
    }
}

/// Sinusoidal embedding of `sigma · 1000`.
pub fn timestep_features(sigma: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = sigma * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).cos());
    }
    out
}

impl AvatarDit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.model_dim;
        let patch_in = Linear::new(&mut ps, &mut rng, "patch_in", (config.latent_channels, d), true, 1.0);
        let spatial = ps.add("spatial", Tensor::randn(&mut rng, &[config.tokens_per_frame, d], 0.02));
        let time1 = Linear::new(&mut ps, &mut rng, "time.0", (config.time_embed_dim, d), true, 1.0);
        let time2 = Linear::new(&mut ps, &mut rng, "time.1", (d, d), true, 1.0);
        let prompt = ps.add("prompt", Tensor::randn(&mut rng, &[config.prompt_tokens, d], 1.0));
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                BlockIds {
                    modulation: Linear::new(&mut ps, &mut rng, &format!("{p}.modulation"), (d, 6 * d), true, 0.0),
                    self_attn: attn_ids(&mut ps, &mut rng, &format!("{p}.self_attn"), d, d, true, false),
                    text: attn_ids(&mut ps, &mut rng, &format!("{p}.text_attn"), d, d, true, true),
                    audio: attn_ids(&mut ps, &mut rng, &format!("{p}.audio_attn"), d, config.audio_dim, false, true),
                    interact: attn_ids(&mut ps, &mut rng, &format!("{p}.interact_attn"), d, config.audio_dim, false, true),
                    ffn_norm: ps.add(format!("{p}.ffn.norm"), Tensor::ones(&[d])),
                    ff1: Linear::new(&mut ps, &mut rng, &format!("{p}.ffn.0"), (d, config.ffn_mult * d), true, 1.0),
                    ff2: Linear::new(&mut ps, &mut rng, &format!("{p}.ffn.1"), (config.ffn_mult * d, d), true, 1.0),
                }
            })
            .collect();
        let final_norm = ps.add("final.norm", Tensor::ones(&[d]));
        let final_mod = Linear::new(&mut ps, &mut rng, "final.modulation", (d, 2 * d), true, 0.0);
        let patch_out = Linear::new(&mut ps, &mut rng, "patch_out", (d, config.latent_channels), true, 0.0);
        Ok(Self {
            config,
            params: ps,
            ids: ModelIds {
                patch_in,
                spatial,
                time1,
                time2,
                prompt,
                blocks,
                final_norm,
                final_mod,
                patch_out,
            },
        })
    }

    /// Same architecture with weights copied from `params` (for example a
    /// checkpoint saved by another mode).
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() || model.params.copy_matching(&params) != params.len() {
            return Err(Error::Config("parameter table does not match model architecture".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Copy of this model running in `mode`.
    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut m = self.clone();
        m.config.mode = mode;
        m
    }

    pub fn default_scope(&self) -> Scope {
        match self.config.mode {
            Mode::Teacher => Scope::Bidirectional,
            Mode::Student => Scope::BlockCausal,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }

    fn token_frames(&self, frames: usize) -> Vec<usize> {
        (0..frames * self.config.tokens_per_frame)
            .map(|r| r / self.config.tokens_per_frame)
            .collect()
    }

    /// Per-frame conditioning vector `[frames, model_dim]` from the noise levels.
    pub fn timestep_embed(&self, tape: &mut Tape, p: &Bound, sigmas: &[f64]) -> Result<Var> {
        let dim = self.config.time_embed_dim;
        let feats: Vec<f64> = sigmas.iter().flat_map(|&s| timestep_features(s, dim)).collect();
        let x = tape.constant(Tensor::new(&[sigmas.len(), dim], feats)?);
        let h = self.ids.time1.forward(tape, p, x)?;
        let h = tape.silu(h);
        Ok(self.ids.time2.forward(tape, p, h)?)
    }

    /// Full forward over a block of frames.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &FrameBatch<'_>) -> Result<ForwardOut> {
        let cfg = &self.config;
        let tpf = cfg.tokens_per_frame;
        let frames = batch.sigmas.len();
        let (rows, ch) = tape.value(batch.latents).dims2()?;
        if rows != frames * tpf || ch != cfg.latent_channels || batch.positions.len() != frames {
            return Err(Error::Config(format!(
                "latents [{rows}, {ch}] do not match {frames} frames of {tpf}x{} tokens",
                cfg.latent_channels
            )));
        }
        let ctx_frames = batch.context.map_or(0, |c| c.len());
        if let Some(m) = batch.mask {
            if m.query_frames() != frames || m.key_frames() != ctx_frames + frames {
                return Err(Error::Config("self-attention mask does not cover the batch".into()));
            }
        }
        if let Some(c) = batch.context {
            if c.keys.len() != cfg.layers {
                return Err(Error::Config("context layer count mismatch".into()));
            }
        }

        let tok_frame = self.token_frames(frames);
        let spatial_idx: Vec<usize> = (0..rows).map(|r| r % tpf).collect();
        let tok_pos: Vec<f64> = tok_frame.iter().map(|&f| batch.positions[f]).collect();

        let h = self.ids.patch_in.forward(tape, p, batch.latents)?;
        let sp = tape.gather_rows(p[self.ids.spatial], &spatial_idx)?;
        let mut x = tape.add(h, sp)?;

        let cond = self.timestep_embed(tape, p, batch.sigmas)?;
        let cond = tape.silu(cond);

        let self_mask = batch.mask.map(|m| m.lift(tpf, tpf));
        let scale = 1.0 / (cfg.head_dim as f64).sqrt();

        let mut hidden = Vec::with_capacity(cfg.layers);
        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        for (l, b) in self.ids.blocks.iter().enumerate() {
            let m = b.modulation.forward(tape, p, cond)?;
            let m = tape.gather_rows(m, &tok_frame)?;
            let d = cfg.model_dim;
            let mut chunks = Vec::with_capacity(6);
            for i in 0..6 {
                chunks.push(tape.slice_cols(m, i * d, d)?);
            }
            let (shift1, scale1, gate1, shift2, scale2, gate2) =
                (chunks[0], chunks[1], chunks[2], chunks[3], chunks[4], chunks[5]);

            // self-attention
            let hn = tape.rmsnorm(x, p[b.self_attn.norm])?;
            let hn = modulate(tape, hn, shift1, scale1)?;
            let q = b.self_attn.q.forward(tape, p, hn)?;
            let k = b.self_attn.k.forward(tape, p, hn)?;
            let v = b.self_attn.v.forward(tape, p, hn)?;
            keys.push(tape.value(k).clone());
            values.push(tape.value(v).clone());
            let q = tape.rope(q, &tok_pos, cfg.head_dim, cfg.rope_theta)?;
            let k = tape.rope(k, &tok_pos, cfg.head_dim, cfg.rope_theta)?;
            let (k_all, v_all) = match batch.context {
                Some(c) if !c.is_empty() => {
                    let ck = tape.constant(c.keys[l].clone());
                    let cv = tape.constant(c.values[l].clone());
                    (tape.concat_rows(&[ck, k])?, tape.concat_rows(&[cv, v])?)
                }
                _ => (k, v),
            };
            let a = attention(tape, q, k_all, v_all, cfg.heads, self_mask.as_deref(), scale)?;
            let a = b.self_attn.o.forward(tape, p, a)?;
            let a = tape.mul(a, gate1)?;
            x = tape.add(x, a)?;

            // fixed prompt
            let hn = tape.rmsnorm(x, p[b.text.norm])?;
            let q = b.text.q.forward(tape, p, hn)?;
            let k = b.text.k.forward(tape, p, p[self.ids.prompt])?;
            let v = b.text.v.forward(tape, p, p[self.ids.prompt])?;
            let a = attention(tape, q, k, v, cfg.heads, None, scale)?;
            let a = b.text.o.forward(tape, p, a)?;
            x = tape.add(x, a)?;

            // talking and listening audio
            if let Some(audio) = batch.audio {
                for (ids, feats) in [(&b.audio, &audio.talking), (&b.interact, &audio.listening)] {
                    if let Some(a) = self.audio_branch(tape, p, ids, x, feats, &audio.mask, frames, scale)? {
                        x = tape.add(x, a)?;
                    }
                }
            }

            // feed-forward
            let hn = tape.rmsnorm(x, p[b.ffn_norm])?;
            let hn = modulate(tape, hn, shift2, scale2)?;
            let f = b.ff1.forward(tape, p, hn)?;
            let f = tape.gelu(f);
            let f = b.ff2.forward(tape, p, f)?;
            let f = tape.mul(f, gate2)?;
            x = tape.add(x, f)?;
            hidden.push(x);
        }

        let fm = self.ids.final_mod.forward(tape, p, cond)?;
        let fm = tape.gather_rows(fm, &tok_frame)?;
        let d = cfg.model_dim;
        let shift = tape.slice_cols(fm, 0, d)?;
        let sc = tape.slice_cols(fm, d, d)?;
        let hn = tape.rmsnorm(x, p[self.ids.final_norm])?;
        let hn = modulate(tape, hn, shift, sc)?;
        let output = self.ids.patch_out.forward(tape, p, hn)?;
        Ok(ForwardOut {
            output,
            hidden,
            keys,
            values,
        })
    }

    /// Cross-attention from latent tokens to per-frame audio features. Query
    /// frames with no visible audio receive nothing. Returns `None` when no
    /// frame sees any audio.
    #[allow(clippy::too_many_arguments)]
    fn audio_branch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ids: &AttnIds,
        x: Var,
        feats: &Tensor,
        mask: &AttentionMask,
        frames: usize,
        scale: f64,
    ) -> Result<Option<Var>> {
        let tpf = self.config.tokens_per_frame;
        let active: Vec<usize> = (0..frames).filter(|&f| !mask.visible(f).is_empty()).collect();
        if active.is_empty() {
            return Ok(None);
        }
        let rows: Vec<usize> = active.iter().flat_map(|&f| f * tpf..(f + 1) * tpf).collect();
        let sub_mask = AttentionMask::from_fn(active.len(), mask.key_frames(), |q, k| mask.allowed(active[q], k));
        let hn = tape.rmsnorm(x, p[ids.norm])?;
        let hn = tape.gather_rows(hn, &rows)?;
        let q = ids.q.forward(tape, p, hn)?;
        let f = tape.constant(feats.clone());
        let k = ids.k.forward(tape, p, f)?;
        let v = ids.v.forward(tape, p, f)?;
        let allowed = sub_mask.lift(tpf, 1);
        let a = attention(tape, q, k, v, self.config.heads, Some(&allowed), scale)?;
        let a = ids.o.forward(tape, p, a)?;
        Ok(Some(tape.scatter_rows(a, &rows, frames * tpf)?))
    }

    /// Converts a raw network output to a clean-latent estimate.
    pub fn to_clean(&self, tape: &mut Tape, output: Var, noisy: Var, sigmas: &[f64]) -> Result<Var> {
        let tpf = self.config.tokens_per_frame;
        let ch = self.config.latent_channels;
        let per_row: Vec<f64> = sigmas.iter().flat_map(|&s| std::iter::repeat_n(s, tpf * ch)).collect();
        let shape = tape.shape(output).to_vec();
        match self.config.prediction {
            Prediction::Velocity => {
                let s = tape.constant(Tensor::new(&shape, per_row)?);
                let sv = tape.mul(output, s)?;
                Ok(tape.sub(noisy, sv)?)
            }
            Prediction::Epsilon => {
                let s = tape.constant(Tensor::new(&shape, per_row.clone())?);
                let inv = tape.constant(Tensor::new(&shape, per_row.iter().map(|s| 1.0 / (1.0 - s).max(1e-3)).collect())?);
                let se = tape.mul(output, s)?;
                let d = tape.sub(noisy, se)?;
                Ok(tape.mul(d, inv)?)
            }
        }
    }

    /// Frame-level audio visibility for frames `first_frame..first_frame+frames`
    /// against audio rows of frames `audio_first..audio_first+audio_rows`.
    /// The reference frame (id 0) never sees audio.
    pub fn audio_mask(&self, scope: Scope, first_frame: usize, frames: usize, audio_first: usize, audio_rows: usize) -> AttentionMask {
        let c = self.config.chunk;
        AttentionMask::from_fn(frames, audio_rows, |q, k| {
            let qf = first_frame + q;
            let kf = audio_first + k;
            if qf == 0 || kf == 0 {
                return false;
            }
            match scope {
                Scope::Bidirectional => true,
                Scope::BlockCausal => chunk_of(kf, c) == chunk_of(qf, c) && kf <= qf,
            }
        })
    }

    /// Forward over a whole window `[reference, frames 1..F)` with no cache.
    ///
    /// `latents` covers all frames including the reference; `audio` has one
    /// row per generated frame.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_window(
        &self,
        tape: &mut Tape,
        p: &Bound,
        latents: Var,
        sigmas: &[f64],
        positions: &[f64],
        scope: Scope,
        audio: Option<&AudioTrack>,
    ) -> Result<ForwardOut> {
        let frames = sigmas.len();
        let mask = match scope {
            Scope::Bidirectional => None,
            Scope::BlockCausal => {
                let layout = ChunkLayout::new(frames - 1, self.config.chunk)?;
                Some(build_block_causal_mask(&layout))
            }
        };
        let audio_ctx = audio.map(|a| {
            let (talking, listening) = a.apply_mask();
            AudioContext {
                talking,
                listening,
                mask: self.audio_mask(scope, 0, frames, 1, a.frames()),
            }
        });
        self.forward(
            tape,
            p,
            &FrameBatch {
                latents,
                sigmas,
                positions,
                mask: mask.as_ref(),
                context: None,
                audio: audio_ctx.as_ref(),
            },
        )
    }

    /// Bidirectional teacher pass over `[reference; window]` with the window
    /// at noise level `sigma`; returns the clean estimate of the generated
    /// frames, `[T · tokens, channels]`.
    pub fn teacher_forward(&self, window: &Tensor, sigma: f64, reference: &Tensor, audio: &AudioTrack) -> Result<Tensor> {
        self.window_predict(window, sigma, reference, audio, Scope::Bidirectional)
    }

    /// Clean estimate of the generated frames under `scope`.
    pub fn window_predict(&self, window: &Tensor, sigma: f64, reference: &Tensor, audio: &AudioTrack, scope: Scope) -> Result<Tensor> {
        let frame_rows = self.config.tokens_per_frame;
        let gen_frames = window.shape()[0] / frame_rows;
        if audio.frames() != gen_frames {
            return Err(Error::AudioExhausted {
                available: audio.frames(),
                required: gen_frames,
            });
        }
        let mut tape = Tape::inference();
        let p = self.bind_frozen(&mut tape);
        let full = Tensor::concat_rows(&[reference, window])?;
        let x = tape.constant(full);
        let mut sigmas = vec![sigma; gen_frames + 1];
        sigmas[0] = 0.0;
        let positions: Vec<f64> = (0..=gen_frames).map(|f| f as f64).collect();
        let out = self.forward_window(&mut tape, &p, x, &sigmas, &positions, scope, Some(audio))?;
        let clean = self.to_clean(&mut tape, out.output, x, &sigmas)?;
        Ok(tape.value(clean).slice_rows(frame_rows, gen_frames * frame_rows)?)
    }

    /// One student pass over a chunk of frames, attending to `cache`.
    ///
    /// `frame_ids` are the chunk's global frame indices (ascending, after
    /// everything cached); `audio` has one row per chunk frame, or is `None`
    /// for the reference frame. The cache is not modified.
    #[allow(clippy::too_many_arguments)]
    pub fn chunk_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        latents: Var,
        frame_ids: &[usize],
        sigma: f64,
        cache: &CacheState,
        audio: Option<&AudioTrack>,
    ) -> Result<(ForwardOut, usize)> {
        let rope = self.config.rope();
        let (view, plan) = cache.context_view(frame_ids, &rope)?;
        if view.keys.len() != self.config.layers && !view.is_empty() {
            return Err(Error::Config("cache layer count does not match model".into()));
        }
        let sigmas = vec![sigma; frame_ids.len()];
        let positions: Vec<f64> = plan.incoming.iter().map(|&i| i as f64).collect();
        let audio_ctx = audio.map(|a| {
            let (talking, listening) = a.apply_mask();
            AudioContext {
                talking,
                listening,
                mask: self.audio_mask(Scope::BlockCausal, frame_ids[0], frame_ids.len(), frame_ids[0], a.frames()),
            }
        });
        let out = self.forward(
            tape,
            p,
            &FrameBatch {
                latents,
                sigmas: &sigmas,
                positions: &positions,
                mask: None,
                context: (!view.is_empty()).then_some(&view),
                audio: audio_ctx.as_ref(),
            },
        )?;
        Ok((out, plan.max()))
    }

    /// Inference chunk step: clean estimate plus this chunk's cache entries.
    pub fn student_forward_chunk(
        &self,
        chunk: &Tensor,
        frame_ids: &[usize],
        sigma: f64,
        cache: &CacheState,
        audio: Option<&AudioTrack>,
    ) -> Result<(ChunkOutput, usize)> {
        let mut tape = Tape::inference();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(chunk.clone());
        let (out, max_pos) = self.chunk_forward(&mut tape, &p, x, frame_ids, sigma, cache, audio)?;
        let sigmas = vec![sigma; frame_ids.len()];
        let clean = self.to_clean(&mut tape, out.output, x, &sigmas)?;
        let entries = split_entries(&out, frame_ids, self.config.tokens_per_frame)?;
        Ok((
            ChunkOutput {
                clean: tape.value(clean).clone(),
                entries,
            },
            max_pos,
        ))
    }
}

fn modulate(tape: &mut Tape, h: Var, shift: Var, scale: Var) -> std::result::Result<Var, TensorError> {
    let one_plus = tape.add_scalar(scale, 1.0);
    let h = tape.mul(h, one_plus)?;
    tape.add(h, shift)
}

/// Splits per-layer batch KV into one cache entry per frame.
pub fn split_entries(out: &ForwardOut, frame_ids: &[usize], tpf: usize) -> Result<Vec<CacheEntry>> {
    frame_ids
        .iter()
        .enumerate()
        .map(|(i, &frame_id)| {
            Ok(CacheEntry {
                frame_id,
                keys: out.keys.iter().map(|k| k.slice_rows(i * tpf, tpf)).collect::<std::result::Result<_, _>>()?,
                values: out.values.iter().map(|v| v.slice_rows(i * tpf, tpf)).collect::<std::result::Result<_, _>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_features, MaskPattern};
    use crate::kv_cache::{CacheConfig, PositionMode};
    use rand::Rng;

    fn randomized(cfg: ModelConfig, seed: u64) -> AvatarDit {
        let mut m = AvatarDit::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in m.params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        m
    }

    fn small() -> ModelConfig {
        ModelConfig {
            window: 6,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let m = AvatarDit::new(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&mut rng, &[12, 4], 1.0);
        let r = Tensor::randn(&mut rng, &[2, 4], 1.0);
        let a = synth_features(3, 6, 8, &MaskPattern::Talking).unwrap();
        let out = m.teacher_forward(&w, 0.5, &r, &a).unwrap();
        // velocity zero: clean estimate equals the noisy input
        assert!(out.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            model_dim: 30,
            ..ModelConfig::tiny()
        };
        assert!(AvatarDit::new(bad, 0).is_err());
        let bad = ModelConfig {
            window: 7,
            ..ModelConfig::tiny()
        };
        assert!(AvatarDit::new(bad, 0).is_err());
    }

    #[test]
    fn cached_chunks_match_masked_window() {
        let m = randomized(small(), 5);
        let tpf = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reference = Tensor::randn(&mut rng, &[tpf, 4], 1.0);
        let x1 = Tensor::randn(&mut rng, &[3 * tpf, 4], 1.0);
        let x2 = Tensor::randn(&mut rng, &[3 * tpf, 4], 1.0);
        let audio = synth_features(4, 6, 8, &MaskPattern::Alternating { period: 2 }).unwrap();
        let cfg = CacheConfig {
            sink_frames: 4,
            window_frames: 9,
            chunk: 3,
            positions: PositionMode::Anchored { cap: 13 },
        };
        let mut cache = CacheState::new(cfg).unwrap();
        let (r, _) = m.student_forward_chunk(&reference, &[0], 0.0, &cache, None).unwrap();
        cache.append_chunk(r.entries).unwrap();
        let a1 = audio.slice(0, 3).unwrap();
        let (c1, _) = m.student_forward_chunk(&x1, &[1, 2, 3], 0.66, &cache, Some(&a1)).unwrap();
        cache.append_chunk(c1.entries).unwrap();
        let a2 = audio.slice(3, 3).unwrap();
        let (c2, _) = m.student_forward_chunk(&x2, &[4, 5, 6], 0.33, &cache, Some(&a2)).unwrap();

        let mut tape = Tape::inference();
        let p = m.bind_frozen(&mut tape);
        let full = Tensor::concat_rows(&[&reference, &x1, &x2]).unwrap();
        let x = tape.constant(full);
        let sig = [0.0, 0.66, 0.66, 0.66, 0.33, 0.33, 0.33];
        let pos: Vec<f64> = (0..7).map(f64::from).collect();
        let out = m.forward_window(&mut tape, &p, x, &sig, &pos, Scope::BlockCausal, Some(&audio)).unwrap();
        let clean = m.to_clean(&mut tape, out.output, x, &sig).unwrap();
        let v = tape.value(clean);
        assert!(v.slice_rows(tpf, 3 * tpf).unwrap().max_abs_diff(&c1.clean) < 1e-10);
        assert!(v.slice_rows(4 * tpf, 3 * tpf).unwrap().max_abs_diff(&c2.clean) < 1e-10);
    }
}
