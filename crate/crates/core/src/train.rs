//! Teacher training, ODE-pair initialisation, score distillation and
//! adversarial refinement.
//!
//! Every loss goes through [`TrainLog::record`], which rejects non-finite
//! values, so a diverging run stops at the first bad step with its phase and
//! step number.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioMask, AudioTrack};
use crate::autodiff::{Tape, Var};
use crate::discriminator::{DiscVars, Discriminator};
use crate::dit::{split_entries, AvatarDit, Scope};
use crate::kv_cache::{CacheConfig, CacheEntry, CacheState};
use crate::nn::{Bound, ParamSet};
use crate::runtime::checkpoint::Checkpoint;
use crate::runtime::config::KvConfig;
use crate::scheduler::{interpolate, rollout, step_to, Instruments, NoiseSchedule, RolloutOptions};
use crate::tensor::Tensor;
use crate::toy::{Clip, ToyTask};
use crate::{Error, Result};

/// Adam with optional global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies accumulated gradients, clears them, and returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamSet) -> f64 {
        let norm = params.grad_norm();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = t.data_mut();
            for i in 0..data.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                data[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        params.zero_grads();
        norm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub phase: &'static str,
    pub name: &'static str,
    pub value: f64,
}

/// Append-only training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    lines: Vec<LogLine>,
}

impl TrainLog {
    pub fn record(&mut self, step: u64, phase: &'static str, name: &'static str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                phase,
                detail: format!("{name} = {value}"),
            });
        }
        self.lines.push(LogLine { step, phase, name, value });
        Ok(())
    }

    pub fn lines(&self) -> &[LogLine] {
        &self.lines
    }

    pub fn series(&self, phase: &str, name: &str) -> Vec<f64> {
        self.lines
            .iter()
            .filter(|l| l.phase == phase && l.name == name)
            .map(|l| l.value)
            .collect()
    }

    /// Same lines as CSV with a `step,phase,name,value` header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,phase,name,value\n");
        for l in &self.lines {
            let _ = writeln!(s, "{},{},{},{}", l.step, l.phase, l.name, l.value);
        }
        s
    }

    /// `step, phase, loss_name, value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(s, "{}, {}, {}, {}", l.step, l.phase, l.name, l.value);
        }
        s
    }
}

/// Mean of the first and last `k` entries.
pub fn head_tail_means(series: &[f64], k: usize) -> (f64, f64) {
    let k = k.min(series.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&series[..k]), mean(&series[series.len() - k..]))
}

fn mse_value(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64
}

#[derive(Clone, Debug)]
pub struct TeacherOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherOptions {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Noise level for a training example; biased towards the middle.
fn sample_sigma(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(0.02..0.98);
    // logit-normal-ish: average two uniforms
    let v: f64 = rng.random_range(0.02..0.98);
    0.5 * (u + v)
}

/// Denoising loss of one window under `scope`; returns the loss var.
fn window_loss(model: &AvatarDit, tape: &mut Tape, p: &Bound, clip: &Clip, sigma: f64, noise: &Tensor, scope: Scope) -> Result<Var> {
    let tpf = model.config().tokens_per_frame;
    let frames = clip.audio.frames();
    let noisy = interpolate(&clip.frames, noise, sigma)?;
    let full = Tensor::concat_rows(&[&clip.reference, &noisy])?;
    let x = tape.constant(full);
    let mut sigmas = vec![sigma; frames + 1];
    sigmas[0] = 0.0;
    let pos: Vec<f64> = (0..=frames).map(|f| f as f64).collect();
    let out = model.forward_window(tape, p, x, &sigmas, &pos, scope, Some(&clip.audio))?;
    let clean = model.to_clean(tape, out.output, x, &sigmas)?;
    let gen = tape.slice_rows(clean, tpf, frames * tpf)?;
    let target = tape.constant(clip.frames.clone());
    Ok(tape.mse(gen, target)?)
}

/// Trains the bidirectional teacher on toy clips with a shared noise level
/// per window and clean-latent regression.
pub fn train_teacher(model: &mut AvatarDit, task: &ToyTask, opts: &TeacherOptions, log: &mut TrainLog) -> Result<Adam> {
    let mut adam = Adam::new(model.params(), opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let window = model.config().window;
    for step in 0..opts.steps as u64 {
        let mut total = 0.0;
        for _ in 0..opts.batch {
            let clip = task.training_clip(rng.random(), window)?;
            let sigma = sample_sigma(&mut rng);
            let noise = Tensor::randn(&mut rng, clip.frames.shape(), 1.0);
            let mut tape = Tape::new();
            let p = model.bind(&mut tape);
            let loss = window_loss(model, &mut tape, &p, &clip, sigma, &noise, Scope::Bidirectional)?;
            let loss = tape.scale(loss, 1.0 / opts.batch as f64);
            total += tape.value(loss).item();
            let g = tape.backward(loss)?;
            model.params_mut().accumulate(&p, &g);
        }
        log.record(step, "teacher", "denoise", total)?;
        adam.step(model.params_mut());
    }
    Ok(adam)
}

/// Teacher trajectory for one clip, stored only at student levels.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeTrajectory {
    pub reference: Tensor,
    pub audio: AudioTrack,
    /// `(σ, window state at σ)` for each student level, in schedule order.
    pub snapshots: Vec<(f64, Tensor)>,
    /// Final teacher output.
    pub clean: Tensor,
}

/// One regression pair, restricted to a chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct OdePair {
    pub trajectory: usize,
    pub chunk: usize,
    pub sigma: f64,
    pub noisy: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeDataset {
    pub schedule: NoiseSchedule,
    pub chunk: usize,
    pub tokens_per_frame: usize,
    pub trajectories: Vec<OdeTrajectory>,
}

impl OdeDataset {
    /// Every `(trajectory, chunk, level)` pair.
    pub fn pairs(&self) -> Vec<OdePair> {
        let rows = self.chunk * self.tokens_per_frame;
        let mut out = Vec::new();
        for (k, tr) in self.trajectories.iter().enumerate() {
            let chunks = tr.clean.shape()[0] / rows;
            for j in 0..chunks {
                let target = tr.clean.slice_rows(j * rows, rows).expect("chunk in range");
                for (sigma, x) in &tr.snapshots {
                    out.push(OdePair {
                        trajectory: k,
                        chunk: j + 1,
                        sigma: *sigma,
                        noisy: x.slice_rows(j * rows, rows).expect("chunk in range"),
                        target: target.clone(),
                    });
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Packs the dataset into a checkpoint container: layout keys in the
    /// config text, one named tensor per stored array.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let levels: Vec<String> = self.schedule.levels().iter().map(f64::to_string).collect();
        let config = format!(
            "kind=ode_pairs\nchunk={}\ntokens_per_frame={}\nschedule={}\ntrajectories={}\n",
            self.chunk,
            self.tokens_per_frame,
            levels.join(","),
            self.trajectories.len()
        );
        let mut params = ParamSet::new();
        for (k, tr) in self.trajectories.iter().enumerate() {
            let mask: Vec<f64> = tr.audio.mask().values().iter().map(|&m| f64::from(m)).collect();
            params.add(format!("{k}.reference"), tr.reference.clone());
            params.add(format!("{k}.audio"), tr.audio.features().clone());
            params.add(format!("{k}.mask"), Tensor::new(&[mask.len()], mask).expect("vector"));
            for (i, (_, x)) in tr.snapshots.iter().enumerate() {
                params.add(format!("{k}.snapshot.{i}"), x.clone());
            }
            params.add(format!("{k}.clean"), tr.clean.clone());
        }
        Checkpoint { config, params }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kv = KvConfig::parse(&ckpt.config)?;
        let kind: String = kv.get("kind", String::new())?;
        if kind != "ode_pairs" {
            return Err(Error::Config(format!("expected an ode_pairs file, got kind {kind:?}")));
        }
        let chunk = kv.get("chunk", 0usize)?;
        let tokens_per_frame = kv.get("tokens_per_frame", 0usize)?;
        let schedule = NoiseSchedule::new(kv.get_list("schedule")?.unwrap_or_default())?;
        let count = kv.get("trajectories", 0usize)?;
        kv.finish()?;
        let get = |name: String| {
            ckpt.params
                .by_name(&name)
                .map(|t| {
                    let mut t = t.clone();
                    t.set_requires_grad(false);
                    t
                })
                .ok_or_else(|| Error::Config(format!("ode_pairs file lacks {name}")))
        };
        let mut trajectories = Vec::with_capacity(count);
        for k in 0..count {
            let mask = get(format!("{k}.mask"))?.data().iter().map(|&m| m as u8).collect();
            let audio = AudioTrack::new(get(format!("{k}.audio"))?, AudioMask::new(mask)?)?;
            let snapshots = schedule
                .levels()
                .iter()
                .enumerate()
                .map(|(i, &sigma)| Ok((sigma, get(format!("{k}.snapshot.{i}"))?)))
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(OdeTrajectory {
                reference: get(format!("{k}.reference"))?,
                audio,
                snapshots,
                clean: get(format!("{k}.clean"))?,
            });
        }
        Ok(Self {
            schedule,
            chunk,
            tokens_per_frame,
            trajectories,
        })
    }
}

/// Runs the teacher's deterministic sampler over `grid` for each clip's
/// conditioning, keeping the states at the student levels and the final
/// output.
pub fn generate_ode_pairs(teacher: &AvatarDit, clips: &[Clip], student: &NoiseSchedule, grid: &NoiseSchedule, seed: u64) -> Result<OdeDataset> {
    if let Some(missing) = student.levels().iter().find(|s| grid.position(**s).is_none()) {
        return Err(Error::Schedule(format!("student level {missing} is not on the teacher grid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(clips.len());
    for clip in clips {
        let noise = Tensor::randn(&mut rng, clip.frames.shape(), 1.0);
        let mut snapshots = Vec::with_capacity(student.len());
        let clean = teacher_trajectory(teacher, &clip.reference, &clip.audio, grid, noise, |sigma, x| {
            if student.position(sigma).is_some() {
                snapshots.push((sigma, x.clone()));
            }
        })?;
        trajectories.push(OdeTrajectory {
            reference: clip.reference.clone(),
            audio: clip.audio.clone(),
            snapshots,
            clean,
        });
    }
    Ok(OdeDataset {
        schedule: student.clone(),
        chunk: teacher.config().chunk,
        tokens_per_frame: teacher.config().tokens_per_frame,
        trajectories,
    })
}

/// Deterministic many-step teacher sampler over the whole window from
/// `noise`; `visit` sees the state entering each grid level.
pub fn teacher_trajectory(
    teacher: &AvatarDit,
    reference: &Tensor,
    audio: &AudioTrack,
    grid: &NoiseSchedule,
    noise: Tensor,
    mut visit: impl FnMut(f64, &Tensor),
) -> Result<Tensor> {
    let mut x = noise;
    for (i, &sigma) in grid.levels().iter().enumerate() {
        visit(sigma, &x);
        let clean = teacher.teacher_forward(&x, sigma, reference, audio)?;
        x = step_to(&x, &clean, sigma, grid.next_level(i))?;
    }
    Ok(x)
}

/// Few-step student rollout over the clip's audio, concatenated.
pub fn student_sample(student: &AvatarDit, reference: &Tensor, audio: &AudioTrack, opts: RolloutOptions) -> Result<Tensor> {
    let chunks = audio.frames() / student.config().chunk;
    let (out, _) = rollout(student, reference, audio, chunks, opts)?;
    let parts: Vec<&Tensor> = out.iter().map(|c| &c.clean).collect();
    Ok(Tensor::concat_rows(&parts)?)
}

/// Mean [`moment_distance`] between `k` student and `k` teacher samples per
/// conditioning clip.
#[allow(clippy::too_many_arguments)]
pub fn distribution_gap(
    student: &AvatarDit,
    teacher: &AvatarDit,
    clips: &[Clip],
    k: usize,
    schedule: &NoiseSchedule,
    grid: &NoiseSchedule,
    cache: CacheConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for clip in clips {
        let mut s = Vec::with_capacity(k);
        let mut t = Vec::with_capacity(k);
        for _ in 0..k {
            let opts = RolloutOptions {
                schedule: schedule.clone(),
                cache,
                seed: rng.random(),
                clean_recache: false,
            };
            s.push(student_sample(student, &clip.reference, &clip.audio, opts)?);
            let noise = Tensor::randn(&mut rng, clip.frames.shape(), 1.0);
            t.push(teacher_trajectory(teacher, &clip.reference, &clip.audio, grid, noise, |_, _| {})?);
        }
        total += moment_distance(&s, &t);
    }
    Ok(total / clips.len() as f64)
}

/// One chunk pass on `tape`: clean estimate var plus detached cache entries.
fn chunk_pass(
    model: &AvatarDit,
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    ids: &[usize],
    sigma: f64,
    cache: &CacheState,
    audio: Option<&AudioTrack>,
) -> Result<(Var, Vec<CacheEntry>)> {
    let (out, _) = model.chunk_forward(tape, p, x, ids, sigma, cache, audio)?;
    let sigmas = vec![sigma; ids.len()];
    let clean = model.to_clean(tape, out.output, x, &sigmas)?;
    let entries = split_entries(&out, ids, model.config().tokens_per_frame)?;
    Ok((clean, entries))
}

fn prefill(model: &AvatarDit, reference: &Tensor, cache_cfg: CacheConfig) -> Result<CacheState> {
    let mut cache = CacheState::new(cache_cfg)?;
    let (out, _) = model.student_forward_chunk(reference, &[0], 0.0, &cache, None)?;
    cache.append_chunk(out.entries)?;
    Ok(cache)
}

#[derive(Clone, Debug)]
pub struct OdeInitOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub cache: CacheConfig,
}

impl Default for OdeInitOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            cache: CacheConfig::default(),
        }
    }
}

/// Regression of the student's chunk predictions onto the teacher's final
/// outputs, run through the same cached chunk path used at inference. The
/// context for chunk `j` is the teacher trajectory at the last student level,
/// which is what a rollout would have cached.
pub fn ode_init(student: &mut AvatarDit, data: &OdeDataset, opts: &OdeInitOptions, log: &mut TrainLog) -> Result<Adam> {
    if data.is_empty() {
        return Err(Error::Config("ODE dataset is empty".into()));
    }
    let mut adam = Adam::new(student.params(), opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let rows = data.chunk * data.tokens_per_frame;
    let n = data.schedule.len();
    for step in 0..opts.steps as u64 {
        let tr = &data.trajectories[rng.random_range(0..data.trajectories.len())];
        let chunks = tr.clean.shape()[0] / rows;
        let mut cache = prefill(student, &tr.reference, opts.cache)?;
        let mut tape = Tape::new();
        let p = student.bind(&mut tape);
        let mut losses = Vec::with_capacity(chunks);
        for j in 0..chunks {
            let ids: Vec<usize> = (j * data.chunk + 1..=(j + 1) * data.chunk).collect();
            let audio = tr.audio.slice(j * data.chunk, data.chunk);
            let level = rng.random_range(0..n);
            let (sigma, state) = &tr.snapshots[level];
            let x = tape.constant(state.slice_rows(j * rows, rows)?);
            let (clean, entries) = chunk_pass(student, &mut tape, &p, x, &ids, *sigma, &cache, audio.as_ref())?;
            let target = tape.constant(tr.clean.slice_rows(j * rows, rows)?);
            losses.push(tape.mse(clean, target)?);
            let ctx = if level == n - 1 {
                entries
            } else {
                let (last_sigma, last_state) = &tr.snapshots[n - 1];
                let (out, _) = student.student_forward_chunk(&last_state.slice_rows(j * rows, rows)?, &ids, *last_sigma, &cache, audio.as_ref())?;
                out.entries
            };
            cache.append_chunk(ctx)?;
        }
        let mut loss = losses[0];
        for &l in &losses[1..] {
            loss = tape.add(loss, l)?;
        }
        let loss = tape.scale(loss, 1.0 / losses.len() as f64);
        log.record(step, "ode_init", "regression", tape.value(loss).item())?;
        let g = tape.backward(loss)?;
        student.params_mut().accumulate(&p, &g);
        adam.step(student.params_mut());
    }
    Ok(adam)
}

/// Mean regression loss of the student over every pair of the dataset,
/// evaluated through the cached chunk path.
pub fn ode_eval(student: &AvatarDit, data: &OdeDataset, cache_cfg: CacheConfig) -> Result<f64> {
    let rows = data.chunk * data.tokens_per_frame;
    let (mut total, mut count) = (0.0, 0usize);
    let n = data.schedule.len();
    for tr in &data.trajectories {
        let chunks = tr.clean.shape()[0] / rows;
        let mut cache = prefill(student, &tr.reference, cache_cfg)?;
        for j in 0..chunks {
            let ids: Vec<usize> = (j * data.chunk + 1..=(j + 1) * data.chunk).collect();
            let audio = tr.audio.slice(j * data.chunk, data.chunk);
            let target = tr.clean.slice_rows(j * rows, rows)?;
            let mut ctx = None;
            for (level, (sigma, state)) in tr.snapshots.iter().enumerate() {
                let (out, _) = student.student_forward_chunk(&state.slice_rows(j * rows, rows)?, &ids, *sigma, &cache, audio.as_ref())?;
                total += mse_value(&out.clean, &target);
                count += 1;
                if level == n - 1 {
                    ctx = Some(out.entries);
                }
            }
            cache.append_chunk(ctx.expect("non-empty schedule"))?;
        }
    }
    Ok(total / count as f64)
}

/// Weighting of the distribution-matching direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SidWeight {
    Constant(f64),
    /// `1 / mean|x_g − x̂_teacher|`, scale-free.
    Normalized,
}

#[derive(Clone, Debug)]
pub struct SidOptions {
    pub schedule: NoiseSchedule,
    pub cache: CacheConfig,
    pub weight: SidWeight,
    /// Levels the generated samples are re-noised at.
    pub renoise: Vec<f64>,
    /// Re-noised copies per step whose directions are averaged.
    pub draws: usize,
    /// Aux regression steps per student step.
    pub aux_steps: usize,
    /// Backpropagate through a uniformly drawn denoising pass instead of
    /// always the last.
    pub random_exit: bool,
}

impl Default for SidOptions {
    fn default() -> Self {
        let schedule = NoiseSchedule::student_default();
        Self {
            renoise: schedule.levels().to_vec(),
            schedule,
            cache: CacheConfig::default(),
            weight: SidWeight::Constant(1.0),
            draws: 1,
            aux_steps: 1,
            random_exit: true,
        }
    }
}

/// Output of a differentiable student-forcing rollout.
pub struct StudentSample {
    /// Generated window, `[frames · tokens, channels]`.
    pub frames: Var,
    pub instruments: Instruments,
}

/// Student-forcing rollout over `audio.frames()` frames from `noise`.
///
/// Each chunk runs the schedule up to pass `exit` (an index into the
/// schedule); that pass is recorded on `tape` and its clean estimate is the
/// chunk's sample. Earlier passes and the cache context are detached. When
/// `exit` is the last pass its KV is cached directly; otherwise the sample
/// is re-mixed to the final level and one detached pass supplies the KV,
/// which is what full sampling would have cached for that content.
#[allow(clippy::too_many_arguments)]
pub fn student_rollout_on_tape(
    student: &AvatarDit,
    tape: &mut Tape,
    p: &Bound,
    reference: &Tensor,
    audio: &AudioTrack,
    noise: &Tensor,
    schedule: &NoiseSchedule,
    exit: usize,
    cache_cfg: CacheConfig,
) -> Result<StudentSample> {
    let n = schedule.len();
    if exit >= n {
        return Err(Error::Schedule(format!("exit pass {exit} outside a {n}-level schedule")));
    }
    let c = student.config().chunk;
    let rows = c * student.config().tokens_per_frame;
    let chunks = audio.frames() / c;
    let mut cache = prefill(student, reference, cache_cfg)?;
    let mut inst = Instruments {
        prefill_forwards: 1,
        ..Instruments::default()
    };
    let mut outs = Vec::with_capacity(chunks);
    for j in 0..chunks {
        let ids: Vec<usize> = (j * c + 1..=(j + 1) * c).collect();
        let a = audio.slice(j * c, c);
        let mut x = noise.slice_rows(j * rows, rows)?;
        for (i, &sigma) in schedule.levels().iter().enumerate().take(exit) {
            let (out, _) = student.student_forward_chunk(&x, &ids, sigma, &cache, a.as_ref())?;
            inst.forwards += 1;
            x = step_to(&x, &out.clean, sigma, schedule.next_level(i))?;
        }
        let sigma = schedule.levels()[exit];
        let xv = tape.constant(x.clone());
        let (clean, entries) = chunk_pass(student, tape, p, xv, &ids, sigma, &cache, a.as_ref())?;
        inst.forwards += 1;
        let entries = if exit + 1 == n {
            entries
        } else {
            let ctx = step_to(&x, tape.value(clean), sigma, schedule.last())?;
            let (out, _) = student.student_forward_chunk(&ctx, &ids, schedule.last(), &cache, a.as_ref())?;
            inst.forwards += 1;
            out.entries
        };
        cache.append_chunk(entries)?;
        outs.push(clean);
    }
    Ok(StudentSample {
        frames: tape.concat_rows(&outs)?,
        instruments: inst,
    })
}

/// Models involved in distillation.
pub struct SidModels<'a> {
    pub student: &'a mut AvatarDit,
    pub aux: &'a mut AvatarDit,
    pub teacher: &'a AvatarDit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SidStats {
    pub student_loss: f64,
    pub aux_loss: f64,
    /// RMS of the distribution-matching direction.
    pub direction_rms: f64,
}

/// One distillation step on one clip's conditioning.
#[allow(clippy::too_many_arguments)]
pub fn sid_step(
    models: SidModels<'_>,
    adam_student: &mut Adam,
    adam_aux: &mut Adam,
    reference: &Tensor,
    audio: &AudioTrack,
    opts: &SidOptions,
    rng: &mut ChaCha8Rng,
    step: u64,
    log: &mut TrainLog,
) -> Result<SidStats> {
    let SidModels { student, aux, teacher } = models;
    let shape = [audio.frames() * student.config().tokens_per_frame, student.config().latent_channels];
    let noise = Tensor::randn(rng, &shape, 1.0);

    let mut tape = Tape::new();
    let p = student.bind(&mut tape);
    let exit = if opts.random_exit {
        rng.random_range(0..opts.schedule.len())
    } else {
        opts.schedule.len() - 1
    };
    let sample = student_rollout_on_tape(student, &mut tape, &p, reference, audio, &noise, &opts.schedule, exit, opts.cache)?;
    let xg = tape.value(sample.frames).clone();

    let direction = score_direction(teacher, aux, &xg, reference, audio, opts, rng)?;
    let direction_rms = (direction.data().iter().map(|v| v * v).sum::<f64>() / direction.numel() as f64).sqrt();
    let g = tape.constant(direction);
    let prod = tape.mul(sample.frames, g)?;
    let loss = tape.mean(prod);
    let student_loss = tape.value(loss).item();
    log.record(step, "distill", "student", student_loss)?;
    log.record(step, "distill", "direction_rms", direction_rms)?;
    let grads = tape.backward(loss)?;
    student.params_mut().accumulate(&p, &grads);
    adam_student.step(student.params_mut());

    let mut aux_loss = 0.0;
    for _ in 0..opts.aux_steps.max(1) {
        aux_loss = aux_regression_step(aux, adam_aux, &xg, reference, audio, &opts.renoise, rng)?;
    }
    log.record(step, "distill", "aux", aux_loss)?;
    Ok(SidStats {
        student_loss,
        aux_loss,
        direction_rms,
    })
}

/// Averaged `w · (x̂_aux − x̂_teacher)` over `opts.draws` re-noisings of `xg`.
pub fn score_direction(
    teacher: &AvatarDit,
    aux: &AvatarDit,
    xg: &Tensor,
    reference: &Tensor,
    audio: &AudioTrack,
    opts: &SidOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let draws = opts.draws.max(1);
    let mut direction = Tensor::zeros(xg.shape());
    for _ in 0..draws {
        let sigma = opts.renoise[rng.random_range(0..opts.renoise.len())];
        let eps = Tensor::randn(rng, xg.shape(), 1.0);
        let noisy = interpolate(xg, &eps, sigma)?;
        let real = teacher.window_predict(&noisy, sigma, reference, audio, Scope::Bidirectional)?;
        let fake = aux.window_predict(&noisy, sigma, reference, audio, Scope::Bidirectional)?;
        let w = match opts.weight {
            SidWeight::Constant(w) => w,
            SidWeight::Normalized => {
                let d = xg.data().iter().zip(real.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / xg.numel() as f64;
                1.0 / d.max(1e-6)
            }
        };
        let d = fake.zip_map(&real, |f, r| w * (f - r) / draws as f64)?;
        direction = direction.zip_map(&d, |a, b| a + b)?;
    }
    Ok(direction)
}

/// Clean-latent regression of the aux network on fixed generated samples.
pub fn aux_regression_step(aux: &mut AvatarDit, adam: &mut Adam, samples: &Tensor, reference: &Tensor, audio: &AudioTrack, levels: &[f64], rng: &mut ChaCha8Rng) -> Result<f64> {
    let sigma = levels[rng.random_range(0..levels.len())];
    let noise = Tensor::randn(rng, samples.shape(), 1.0);
    let clip = Clip {
        reference: reference.clone(),
        frames: samples.clone(),
        audio: audio.clone(),
    };
    let mut tape = Tape::new();
    let p = aux.bind(&mut tape);
    let loss = window_loss(aux, &mut tape, &p, &clip, sigma, &noise, Scope::Bidirectional)?;
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    aux.params_mut().accumulate(&p, &g);
    adam.step(aux.params_mut());
    Ok(value)
}

/// Relativistic loss of `a` against `b`, averaged over the local and global
/// branches: `½·[mean_f softplus(−(a_f − b_f)) + softplus(−(a_g − b_g))]`.
pub fn relativistic_loss(tape: &mut Tape, a: &DiscVars, b: &DiscVars) -> Result<Var> {
    let dl = tape.sub(a.local, b.local)?;
    let dl = tape.scale(dl, -1.0);
    let local = tape.softplus(dl);
    let local = tape.mean(local);
    let dg = tape.sub(a.global, b.global)?;
    let dg = tape.scale(dg, -1.0);
    let global = tape.softplus(dg);
    let global = tape.sum(global);
    let both = tape.add(local, global)?;
    Ok(tape.scale(both, 0.5))
}

/// Scalar critic value used by the gradient penalties: mean local logit plus
/// the global logit.
pub fn critic_value(tape: &mut Tape, d: &DiscVars) -> Result<Var> {
    let local = tape.mean(d.local);
    let global = tape.sum(d.global);
    Ok(tape.add(local, global)?)
}

/// Finite-difference gradient penalty `γ/2 · ((D(x + εu) − D(x)) / ε)²` with
/// `u` standard normal over the generated frames, whose expectation over `u`
/// is `γ/2 · ‖∇ₓD‖²` to first order.
#[allow(clippy::too_many_arguments)]
pub fn fd_penalty(
    disc: &Discriminator,
    tape: &mut Tape,
    p: &Bound,
    reference: &Tensor,
    frames: &Tensor,
    at: &DiscVars,
    audio: Option<&AudioTrack>,
    gamma: f64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let u = Tensor::randn(rng, frames.shape(), 1.0);
    let moved = frames.zip_map(&u, |x, u| x + eps * u)?;
    let x = tape.constant(Tensor::concat_rows(&[reference, &moved])?);
    let shifted = disc.forward(tape, p, x, audio)?;
    let d1 = critic_value(tape, &shifted)?;
    let d0 = critic_value(tape, at)?;
    let diff = tape.sub(d1, d0)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.sum(sq);
    Ok(tape.scale(sq, gamma / (2.0 * eps * eps)))
}

#[derive(Clone, Debug)]
pub struct AdvOptions {
    pub schedule: NoiseSchedule,
    pub cache: CacheConfig,
    /// Penalty weight for both R1 and R2.
    pub gamma: f64,
    /// Finite-difference step of the penalties.
    pub fd_eps: f64,
    pub random_exit: bool,
    /// Weight of a distillation term mixed into the generator loss; needs
    /// [`AdvModels::distill`].
    pub distill_weight: f64,
    /// Distillation settings used when `distill_weight > 0`.
    pub sid: SidOptions,
}

impl Default for AdvOptions {
    fn default() -> Self {
        let sid = SidOptions::default();
        Self {
            schedule: sid.schedule.clone(),
            cache: sid.cache,
            gamma: 0.1,
            fd_eps: 1e-2,
            random_exit: true,
            distill_weight: 0.0,
            sid,
        }
    }
}

pub struct AdvModels<'a> {
    pub student: &'a mut AvatarDit,
    pub disc: &'a mut Discriminator,
    /// Teacher and aux for the optional distillation term.
    pub distill: Option<(&'a AvatarDit, &'a AvatarDit)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvStats {
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub r1: f64,
    pub r2: f64,
}

/// One alternating update: discriminator on (real clip, detached student
/// sample), then generator against the updated discriminator.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step(
    models: AdvModels<'_>,
    adam_student: &mut Adam,
    adam_disc: &mut Adam,
    real: &Clip,
    opts: &AdvOptions,
    rng: &mut ChaCha8Rng,
    step: u64,
    log: &mut TrainLog,
) -> Result<AdvStats> {
    let AdvModels { student, disc, distill } = models;
    let audio = &real.audio;
    let reference = &real.reference;
    let noise = Tensor::randn(rng, real.frames.shape(), 1.0);
    let exit = if opts.random_exit {
        rng.random_range(0..opts.schedule.len())
    } else {
        opts.schedule.len() - 1
    };
    let mut gtape = Tape::new();
    let gp = student.bind(&mut gtape);
    let sample = student_rollout_on_tape(student, &mut gtape, &gp, reference, audio, &noise, &opts.schedule, exit, opts.cache)?;
    let fake = gtape.value(sample.frames).clone();

    // discriminator
    let mut tape = Tape::new();
    let p = disc.bind(&mut tape);
    let xr = tape.constant(Tensor::concat_rows(&[reference, &real.frames])?);
    let xf = tape.constant(Tensor::concat_rows(&[reference, &fake])?);
    let dr = disc.forward(&mut tape, &p, xr, Some(audio))?;
    let df = disc.forward(&mut tape, &p, xf, Some(audio))?;
    let adv = relativistic_loss(&mut tape, &dr, &df)?;
    let r1 = fd_penalty(disc, &mut tape, &p, reference, &real.frames, &dr, Some(audio), opts.gamma, opts.fd_eps, rng)?;
    let r2 = fd_penalty(disc, &mut tape, &p, reference, &fake, &df, Some(audio), opts.gamma, opts.fd_eps, rng)?;
    let total = tape.add(adv, r1)?;
    let total = tape.add(total, r2)?;
    let (disc_loss, r1v, r2v) = (tape.value(adv).item(), tape.value(r1).item(), tape.value(r2).item());
    log.record(step, "refine", "disc", disc_loss)?;
    log.record(step, "refine", "r1", r1v)?;
    log.record(step, "refine", "r2", r2v)?;
    let g = tape.backward(total)?;
    disc.params_mut().accumulate(&p, &g);
    adam_disc.step(disc.params_mut());

    // generator
    let dp = disc.bind_frozen(&mut gtape);
    let rv = gtape.constant(reference.clone());
    let xf = gtape.concat_rows(&[rv, sample.frames])?;
    let xr = gtape.constant(Tensor::concat_rows(&[reference, &real.frames])?);
    let df = disc.forward(&mut gtape, &dp, xf, Some(audio))?;
    let dr = disc.forward(&mut gtape, &dp, xr, Some(audio))?;
    let mut loss = relativistic_loss(&mut gtape, &df, &dr)?;
    let gen_loss = gtape.value(loss).item();
    log.record(step, "refine", "gen", gen_loss)?;
    if opts.distill_weight > 0.0 {
        let (teacher, aux) = distill.ok_or_else(|| Error::Config("distill_weight needs a teacher and aux".into()))?;
        let dir = score_direction(teacher, aux, &fake, reference, audio, &opts.sid, rng)?;
        let dv = gtape.constant(dir.map(|v| v * opts.distill_weight));
        let prod = gtape.mul(sample.frames, dv)?;
        let term = gtape.mean(prod);
        log.record(step, "refine", "distill", gtape.value(term).item())?;
        loss = gtape.add(loss, term)?;
    }
    let g = gtape.backward(loss)?;
    student.params_mut().accumulate(&gp, &g);
    adam_student.step(student.params_mut());
    Ok(AdvStats {
        disc_loss,
        gen_loss,
        r1: r1v,
        r2: r2v,
    })
}

/// Per-position mean and standard deviation over samples.
pub fn sample_moments(samples: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let len = samples[0].numel();
    let mut mean = vec![0.0; len];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; len];
    for s in samples {
        for ((d, v), m) in sd.iter_mut().zip(s.data()).zip(&mean) {
            *d += (v - m).powi(2) / n;
        }
    }
    sd.iter_mut().for_each(|d| *d = d.sqrt());
    (mean, sd)
}

/// Distance between two sample sets under the same conditioning: RMS over
/// positions of the difference in means plus that of the difference in
/// standard deviations.
pub fn moment_distance(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (ma, sa) = sample_moments(a);
    let (mb, sb) = sample_moments(b);
    let rms = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    rms(&ma, &mb) + rms(&sa, &sb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&ps, 0.1);
        adam.clip = None;
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape);
            let sq = tape.mul(b[id], b[id]).unwrap();
            let l = tape.sum(sq);
            let g = tape.backward(l).unwrap();
            ps.accumulate(&b, &g);
            adam.step(&mut ps);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(adam.steps(), 500);
    }

    #[test]
    fn log_rejects_nan() {
        let mut log = TrainLog::default();
        log.record(0, "teacher", "denoise", 1.0).unwrap();
        let err = log.record(1, "teacher", "denoise", f64::NAN).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, phase: "teacher", .. }));
        assert_eq!(log.to_text(), "0, teacher, denoise, 1\n");
    }

    #[test]
    fn moments_of_identical_sets_match() {
        let a = vec![Tensor::ones(&[2]), Tensor::zeros(&[2])];
        assert_eq!(moment_distance(&a, &a), 0.0);
        let b = vec![Tensor::full(&[2], 0.5), Tensor::full(&[2], 0.5)];
        assert!((moment_distance(&a, &b) - 0.5).abs() < 1e-12);
    }
}
