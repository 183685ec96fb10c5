//! Two-stage streaming pipeline: a denoise thread generating latent chunks
//! and a decode stage turning them into output frames, joined by a bounded
//! queue of two chunks.
//!
//! Timing comes from one of two clocks. The wall clock measures each stage's
//! busy time (compute plus any injected delay, which is slept). The simulated
//! clock ignores compute and charges exactly the injected delays, then replays
//! the queue discipline to get completion times, so its metrics are exact and
//! reproducible.

use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, Checkpoint};
use super::config::{ClockMode, PipelineConfig};
use super::metrics::{RunMetrics, StageMetrics};
use crate::audio::AudioTrack;
use crate::dit::{AvatarDit, Mode, ModelConfig};
use crate::scheduler::{GeneratedChunk, Instruments, Rollout, RolloutOptions};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Queue capacity between the stages.
pub const QUEUE_DEPTH: usize = 2;

/// Stand-in for a latent decoder: a fixed random linear map per token.
#[derive(Clone, Debug, PartialEq)]
pub struct StubDecoder {
    weight: Tensor,
}

impl StubDecoder {
    pub fn new(latent_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor::randn(&mut rng, &[latent_channels, out_channels], 1.0 / (latent_channels as f64).sqrt());
        Self { weight }
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.matmul(&self.weight)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedChunk {
    pub index: usize,
    pub start_frame: usize,
    pub latents: Tensor,
    pub pixels: Tensor,
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub chunks: Vec<DecodedChunk>,
    pub metrics: RunMetrics,
}

/// Loads the checkpoint named by `config` as a student.
pub fn load_student(config: &PipelineConfig) -> Result<AvatarDit> {
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("no checkpoint given".into()))?;
    student_from_checkpoint(&load_checkpoint(path)?)
}

pub fn student_from_checkpoint(ckpt: &Checkpoint) -> Result<AvatarDit> {
    let mut cfg = ModelConfig::parse_kv(&ckpt.config)?;
    cfg.mode = Mode::Student;
    AvatarDit::from_params(cfg, ckpt.params.clone())
}

fn check(config: &PipelineConfig, model: &AvatarDit, audio: &AudioTrack) -> Result<usize> {
    config.validate()?;
    let c = model.config().chunk;
    if config.cache.chunk != c {
        return Err(Error::Config(format!("pipeline chunk {} does not match model chunk {c}", config.cache.chunk)));
    }
    let available = audio.frames() / c;
    if available == 0 {
        return Err(Error::AudioExhausted {
            available: audio.frames(),
            required: c,
        });
    }
    Ok(config.num_chunks.min(available))
}

fn rollout_options(config: &PipelineConfig) -> RolloutOptions {
    RolloutOptions {
        schedule: config.schedule.clone(),
        cache: config.cache,
        seed: config.seed,
        clean_recache: config.clean_recache,
    }
}

fn decoder_for(config: &PipelineConfig, model: &AvatarDit) -> StubDecoder {
    StubDecoder::new(model.config().latent_channels, config.decode_channels, config.seed ^ 0xdec0de)
}

fn decode_chunk(decoder: &StubDecoder, g: GeneratedChunk) -> Result<DecodedChunk> {
    let pixels = decoder.decode(&g.clean)?;
    Ok(DecodedChunk {
        index: g.index,
        start_frame: g.start_frame,
        latents: g.clean,
        pixels,
    })
}

fn micros(d: Duration) -> u64 {
    d.as_micros() as u64
}

/// Denoise then decode, one chunk at a time on the calling thread. Same
/// outputs as [`stream`]; used as its reference.
pub fn run_sequential(config: &PipelineConfig, model: &AvatarDit, reference: &Tensor, audio: &AudioTrack) -> Result<Vec<DecodedChunk>> {
    let n = check(config, model, audio)?;
    let decoder = decoder_for(config, model);
    Rollout::new(model, reference, audio, n, rollout_options(config))?
        .map(|g| g.and_then(|g| decode_chunk(&decoder, g)))
        .collect()
}

/// Streams `config.num_chunks` chunks (fewer if the audio runs out, which
/// is flagged in the metrics).
pub fn stream(config: &PipelineConfig, model: &AvatarDit, reference: &Tensor, audio: &AudioTrack) -> Result<StreamOutput> {
    let n = check(config, model, audio)?;
    let decoder = decoder_for(config, model);
    let opts = rollout_options(config);
    let wall = config.clock == ClockMode::Wall;
    let (tx, rx) = sync_channel::<(GeneratedChunk, u64, u64)>(QUEUE_DEPTH);
    let start = Instant::now();

    let (produced, decoded) = thread::scope(|s| {
        let producer = s.spawn(move || -> Result<Instruments> {
            let mut r = Rollout::new(model, reference, audio, n, opts)?;
            let mut i = 0;
            loop {
                let t0 = Instant::now();
                let Some(g) = r.next() else { break };
                let g = g?;
                if wall {
                    thread::sleep(Duration::from_micros(config.denoise_delay.for_chunk(i)));
                }
                let busy = micros(t0.elapsed());
                if tx.send((g, busy, micros(start.elapsed()))).is_err() {
                    break;
                }
                i += 1;
            }
            Ok(r.instruments().clone())
        });
        let mut out = Vec::with_capacity(n);
        let mut den_busy = Vec::with_capacity(n);
        let mut dec_busy = Vec::with_capacity(n);
        let mut den_done = Vec::with_capacity(n);
        let mut done = Vec::with_capacity(n);
        let mut failure = None;
        for (i, (g, busy, ready)) in rx.iter().enumerate() {
            let t0 = Instant::now();
            match decode_chunk(&decoder, g) {
                Ok(d) => out.push(d),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
            if wall {
                thread::sleep(Duration::from_micros(config.decode_delay.for_chunk(i)));
            }
            den_busy.push(busy);
            den_done.push(ready);
            dec_busy.push(micros(t0.elapsed()));
            done.push(micros(start.elapsed()));
        }
        drop(rx);
        let inst = producer.join().expect("denoise thread panicked");
        match failure {
            Some(e) => Err(e),
            None => Ok((inst?, (out, den_busy, den_done, dec_busy, done))),
        }
    })?;
    let inst = produced;
    let (chunks, den_busy, den_done, dec_busy, done) = decoded;

    let (den_busy, dec_busy, den_done, dec_done) = match config.clock {
        ClockMode::Wall => (den_busy, dec_busy, den_done, done),
        ClockMode::Simulated => {
            let den: Vec<u64> = (0..chunks.len()).map(|i| config.denoise_delay.for_chunk(i)).collect();
            let dec: Vec<u64> = (0..chunks.len()).map(|i| config.decode_delay.for_chunk(i)).collect();
            let (den_done, dec_done) = simulate_timeline(&den, &dec, QUEUE_DEPTH);
            (den, dec, den_done, dec_done)
        }
    };
    let metrics = RunMetrics {
        chunks: chunks.len(),
        requested_chunks: config.num_chunks,
        chunk_seconds: config.chunk_seconds,
        denoise: StageMetrics::new(den_busy, den_done),
        decode: StageMetrics::new(dec_busy, dec_done),
        max_position: inst.max_position,
        forwards: inst.forwards,
        prefill_forwards: inst.prefill_forwards,
    };
    Ok(StreamOutput { chunks, metrics })
}

/// Completion times of both stages given per-chunk busy times.
///
/// The producer finishes chunk `i` at `d_i`, then pushes it once the queue
/// has room, which is when the consumer has taken chunk `i − depth`. The
/// consumer takes chunk `i` when it is pushed and the previous decode has
/// finished.
pub fn simulate_timeline(denoise: &[u64], decode: &[u64], depth: usize) -> (Vec<u64>, Vec<u64>) {
    let n = denoise.len();
    let mut den_done = Vec::with_capacity(n);
    let mut pushed = Vec::with_capacity(n);
    let mut taken: Vec<u64> = Vec::with_capacity(n);
    let mut dec_done: Vec<u64> = Vec::with_capacity(n);
    let mut free_at = 0;
    for i in 0..n {
        let d = free_at + denoise[i];
        den_done.push(d);
        let room = if i >= depth { taken[i - depth] } else { 0 };
        let p = d.max(room);
        pushed.push(p);
        free_at = p;
        let prev = if i == 0 { 0 } else { dec_done[i - 1] };
        let t = p.max(prev);
        taken.push(t);
        dec_done.push(t + decode[i]);
    }
    (den_done, dec_done)
}
