//! Few-step chunkwise sampling with student forcing.
//!
//! Corruption is linear interpolation `x_σ = (1−σ)·x + σ·ε`. A chunk starts
//! from pure noise at the first schedule level and takes one deterministic
//! step per level; the last step lands on the clean estimate. The KV entries
//! kept for later chunks come from the last forward pass (input at the final
//! noise level), so no extra clean pass is needed unless `clean_recache` asks
//! for one.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioTrack;
use crate::dit::{AvatarDit, ChunkOutput};
use crate::kv_cache::{CacheConfig, CacheState};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Strictly decreasing noise levels in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    levels: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Schedule("schedule is empty".into()));
        }
        if levels.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Schedule(format!("levels {levels:?} must lie in (0, 1]")));
        }
        if levels.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!("levels {levels:?} are not strictly decreasing")));
        }
        Ok(Self { levels })
    }

    /// `[1.0, 0.66, 0.33]`.
    pub fn student_default() -> Self {
        Self::new(vec![1.0, 0.66, 0.33]).expect("valid default")
    }

    /// A `steps`-level grid that contains every level of `student`: each
    /// interval between consecutive student levels (and from the last one to
    /// zero) is split uniformly, with steps spread as evenly as possible.
    pub fn subdivide(student: &NoiseSchedule, steps: usize) -> Result<Self> {
        let n = student.len();
        if steps < n {
            return Err(Error::Schedule(format!("{steps} steps cannot contain {n} student levels")));
        }
        let mut bounds = student.levels.clone();
        bounds.push(0.0);
        let mut levels = Vec::with_capacity(steps);
        for i in 0..n {
            let k = steps / n + usize::from(i < steps % n);
            let (hi, lo) = (bounds[i], bounds[i + 1]);
            for j in 0..k {
                levels.push(hi - (hi - lo) * j as f64 / k as f64);
            }
        }
        Self::new(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.levels[0]
    }

    pub fn last(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    /// Level after step `i`; zero after the last.
    pub fn next_level(&self, i: usize) -> f64 {
        self.levels.get(i + 1).copied().unwrap_or(0.0)
    }

    /// Whether `self` is a subset of `grid` (exact match within 1e-12).
    pub fn is_subset_of(&self, grid: &NoiseSchedule) -> bool {
        self.levels.iter().all(|s| grid.position(*s).is_some())
    }

    pub fn position(&self, sigma: f64) -> Option<usize> {
        self.levels.iter().position(|l| (l - sigma).abs() < 1e-12)
    }
}

/// `C` frames of latents, `[C · tokens_per_frame, latent_channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentChunk {
    /// First global frame index.
    pub start_frame: usize,
    pub frames: usize,
    pub data: Tensor,
    /// Current noise level; zero means clean.
    pub sigma: f64,
}

impl LatentChunk {
    pub fn frame_ids(&self) -> Vec<usize> {
        (self.start_frame..self.start_frame + self.frames).collect()
    }
}

/// `(1−σ)·clean + σ·ε` with `ε ~ N(0, 1)` drawn from `seed`.
pub fn add_noise(clean: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(&mut rng, clean.shape(), 1.0);
    interpolate(clean, &eps, sigma)
}

/// `(1−σ)·clean + σ·noise`.
pub fn interpolate(clean: &Tensor, noise: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Schedule(format!("noise level {sigma} outside [0, 1]")));
    }
    Ok(clean.zip_map(noise, |x, e| (1.0 - sigma) * x + sigma * e)?)
}

/// Deterministic step from level `sigma` to `next` given a clean estimate:
/// the implied noise `(x − (1−σ)·x̂₀)/σ` is re-mixed at the new level.
pub fn step_to(x: &Tensor, clean: &Tensor, sigma: f64, next: f64) -> Result<Tensor> {
    if next <= 0.0 {
        return Ok(clean.clone());
    }
    Ok(x.zip_map(clean, |xv, c| {
        let eps = (xv - (1.0 - sigma) * c) / sigma;
        (1.0 - next) * c + next * eps
    })?)
}

/// Anything that can run one chunk pass against a cache. [`AvatarDit`] is
/// the real implementation; tests plug in analytic ones.
pub trait ChunkDenoiser {
    fn tokens_per_frame(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn chunk(&self) -> usize;

    /// Clean estimate and raw KV for `frame_ids` at level `sigma`, plus the
    /// largest rotary index used.
    fn predict(&self, x: &Tensor, frame_ids: &[usize], sigma: f64, cache: &CacheState, audio: Option<&AudioTrack>) -> Result<(ChunkOutput, usize)>;
}

impl ChunkDenoiser for AvatarDit {
    fn tokens_per_frame(&self) -> usize {
        self.config().tokens_per_frame
    }

    fn latent_channels(&self) -> usize {
        self.config().latent_channels
    }

    fn chunk(&self) -> usize {
        self.config().chunk
    }

    fn predict(&self, x: &Tensor, frame_ids: &[usize], sigma: f64, cache: &CacheState, audio: Option<&AudioTrack>) -> Result<(ChunkOutput, usize)> {
        self.student_forward_chunk(x, frame_ids, sigma, cache, audio)
    }
}

/// Counters filled in while sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Instruments {
    /// Chunk passes, excluding the reference prefill.
    pub forwards: usize,
    pub prefill_forwards: usize,
    pub max_position: usize,
    pub chunk_times: Vec<Duration>,
    /// Set once any chunk was conditioned on frames the sampler did not
    /// generate itself (never, by construction).
    pub external_context: bool,
}

#[derive(Clone, Debug)]
pub struct DenoiseResult {
    pub clean: Tensor,
    pub entries: Vec<crate::kv_cache::CacheEntry>,
}

/// Denoises one chunk from `noise` at the first schedule level.
///
/// With `clean_recache` an extra pass on the clean estimate at level zero
/// supplies the KV entries instead of the final noisy pass.
pub fn denoise_chunk<M: ChunkDenoiser + ?Sized>(
    model: &M,
    cache: &CacheState,
    chunk: &LatentChunk,
    audio: Option<&AudioTrack>,
    schedule: &NoiseSchedule,
    clean_recache: bool,
    inst: &mut Instruments,
) -> Result<DenoiseResult> {
    if schedule.is_empty() {
        return Err(Error::Schedule("schedule is empty".into()));
    }
    if cache.is_empty() {
        return Err(Error::Layout("cache must hold the reference frame before denoising".into()));
    }
    if (chunk.sigma - schedule.first()).abs() > 1e-12 {
        return Err(Error::Schedule(format!(
            "chunk at level {} does not start the schedule at {}",
            chunk.sigma,
            schedule.first()
        )));
    }
    let ids = chunk.frame_ids();
    let mut x = chunk.data.clone();
    let mut last = None;
    for (i, &sigma) in schedule.levels().iter().enumerate() {
        let (out, max_pos) = model.predict(&x, &ids, sigma, cache, audio)?;
        inst.forwards += 1;
        inst.max_position = inst.max_position.max(max_pos);
        x = step_to(&x, &out.clean, sigma, schedule.next_level(i))?;
        last = Some(out);
    }
    let mut out = last.expect("non-empty schedule");
    if clean_recache {
        let (re, max_pos) = model.predict(&out.clean, &ids, 0.0, cache, audio)?;
        inst.forwards += 1;
        inst.max_position = inst.max_position.max(max_pos);
        out.entries = re.entries;
    }
    Ok(DenoiseResult {
        clean: out.clean,
        entries: out.entries,
    })
}

#[derive(Clone, Debug)]
pub struct RolloutOptions {
    pub schedule: NoiseSchedule,
    pub cache: CacheConfig,
    pub seed: u64,
    pub clean_recache: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::student_default(),
            cache: CacheConfig::default(),
            seed: 0,
            clean_recache: false,
        }
    }
}

/// One generated chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedChunk {
    pub index: usize,
    pub start_frame: usize,
    pub clean: Tensor,
}

/// Lazy student-forcing rollout: each `next` generates one chunk conditioned
/// on the reference and the sampler's own previous chunks.
pub struct Rollout<'a, M: ChunkDenoiser + ?Sized> {
    model: &'a M,
    audio: &'a AudioTrack,
    opts: RolloutOptions,
    cache: CacheState,
    rng: ChaCha8Rng,
    next_chunk: usize,
    num_chunks: usize,
    inst: Instruments,
    failed: bool,
}

impl<'a, M: ChunkDenoiser + ?Sized> Rollout<'a, M> {
    /// Prefills the cache with the reference frame (one pass at level zero).
    pub fn new(model: &'a M, reference: &Tensor, audio: &'a AudioTrack, num_chunks: usize, opts: RolloutOptions) -> Result<Self> {
        let c = model.chunk();
        if opts.cache.chunk != c {
            return Err(Error::Config(format!("cache chunk {} != model chunk {c}", opts.cache.chunk)));
        }
        if audio.frames() < num_chunks * c {
            return Err(Error::AudioExhausted {
                available: audio.frames(),
                required: num_chunks * c,
            });
        }
        let rows = model.tokens_per_frame();
        if reference.shape() != [rows, model.latent_channels()] {
            return Err(Error::Config(format!("reference shape {:?} is not one frame", reference.shape())));
        }
        let mut cache = CacheState::new(opts.cache)?;
        let mut inst = Instruments::default();
        let (out, max_pos) = model.predict(reference, &[0], 0.0, &cache, None)?;
        inst.prefill_forwards += 1;
        inst.max_position = max_pos;
        cache.append_chunk(out.entries)?;
        let rng = ChaCha8Rng::seed_from_u64(opts.seed);
        Ok(Self {
            model,
            audio,
            opts,
            cache,
            rng,
            next_chunk: 1,
            num_chunks,
            inst,
            failed: false,
        })
    }

    pub fn instruments(&self) -> &Instruments {
        &self.inst
    }

    pub fn cache(&self) -> &CacheState {
        &self.cache
    }

    fn step(&mut self) -> Result<GeneratedChunk> {
        let c = self.model.chunk();
        let i = self.next_chunk;
        let start = (i - 1) * c + 1;
        let shape = [c * self.model.tokens_per_frame(), self.model.latent_channels()];
        let noise = Tensor::randn(&mut self.rng, &shape, 1.0);
        let chunk = LatentChunk {
            start_frame: start,
            frames: c,
            data: noise,
            sigma: self.opts.schedule.first(),
        };
        let audio = self.audio.slice(start - 1, c).ok_or(Error::AudioExhausted {
            available: self.audio.frames(),
            required: start - 1 + c,
        })?;
        let t0 = Instant::now();
        let res = denoise_chunk(
            self.model,
            &self.cache,
            &chunk,
            Some(&audio),
            &self.opts.schedule,
            self.opts.clean_recache,
            &mut self.inst,
        )?;
        self.cache.append_chunk(res.entries)?;
        self.inst.chunk_times.push(t0.elapsed());
        self.next_chunk += 1;
        Ok(GeneratedChunk {
            index: i,
            start_frame: start,
            clean: res.clean,
        })
    }
}

impl<M: ChunkDenoiser + ?Sized> Iterator for Rollout<'_, M> {
    type Item = Result<GeneratedChunk>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_chunk > self.num_chunks {
            return None;
        }
        let r = self.step();
        self.failed = r.is_err();
        Some(r)
    }
}

/// Runs a rollout to completion; returns the chunks and the counters.
pub fn rollout<M: ChunkDenoiser + ?Sized>(
    model: &M,
    reference: &Tensor,
    audio: &AudioTrack,
    num_chunks: usize,
    opts: RolloutOptions,
) -> Result<(Vec<GeneratedChunk>, Instruments)> {
    let mut r = Rollout::new(model, reference, audio, num_chunks, opts)?;
    let chunks = r.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((chunks, r.inst))
}
