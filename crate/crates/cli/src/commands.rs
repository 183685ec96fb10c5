//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use chunkflow_core::audio::load_track;
use chunkflow_core::dit::{AvatarDit, Mode, ModelConfig};
use chunkflow_core::experiment::{ToyRun, ToyRunOptions};
use chunkflow_core::kv_cache::{CacheConfig, CacheError, PositionMode};
use chunkflow_core::nn::ParamSet;
use chunkflow_core::runtime::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use chunkflow_core::runtime::config::{ClockMode, KvConfig, PipelineConfig};
use chunkflow_core::runtime::drift::{drift_csv, drift_report, mean_drift};
use chunkflow_core::runtime::pipeline::{self, student_from_checkpoint};
use chunkflow_core::scheduler::{rollout, RolloutOptions};
use chunkflow_core::tensor::Tensor;
use chunkflow_core::toy::ToyTask;
use chunkflow_core::train::OdeDataset;
use chunkflow_core::Error;

use crate::Common;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Run(e) if is_input_error(e) => 1,
            CliError::Run(_) => 2,
        }
    }
}

fn is_input_error(e: &Error) -> bool {
    match e {
        Error::Config(_) | Error::Schedule(_) | Error::Layout(_) | Error::AudioExhausted { .. } | Error::Track(_) => true,
        Error::Cache(c) => matches!(c, CacheError::Config(_)),
        Error::Checkpoint(c) => !matches!(c, CheckpointError::Io(_)),
        _ => false,
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> Result<KvConfig> {
    match &common.config {
        None => Ok(KvConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
            Ok(KvConfig::parse(&text)?)
        }
    }
}

/// Input file named by `key`, else `default` under the output directory.
fn input(kv: &KvConfig, key: &str, common: &Common, default: &str) -> Result<PathBuf> {
    let path = kv.raw(key).map_or_else(|| common.out.join(default), PathBuf::from);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Invalid(format!("{key}: no such file {}", path.display())))
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(Error::from)?;
    Ok(path)
}

fn save(dir: &Path, name: &str, config: String, params: &ParamSet) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let path = dir.join(name);
    let ckpt = Checkpoint {
        config,
        params: params.clone(),
    };
    save_checkpoint(&ckpt, &path).map_err(Error::from)?;
    Ok(path)
}

fn summary(rows: &[(&str, String)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

fn toy_options(kv: &KvConfig, common: &Common) -> Result<ToyRunOptions> {
    let mut o = ToyRunOptions::from_kv(kv)?;
    if let Some(seed) = common.seed {
        o.seed = seed;
    }
    Ok(o)
}

fn load_model(path: &Path, cfg: &ModelConfig, mode: Mode) -> Result<AvatarDit> {
    let ckpt = load_checkpoint(path).map_err(Error::from)?;
    ckpt.check_compatible(&cfg.to_kv()).map_err(Error::from)?;
    let cfg = ModelConfig { mode, ..cfg.clone() };
    Ok(AvatarDit::from_params(cfg, ckpt.params)?)
}

/// Toy run with its teacher loaded from the `teacher` input.
fn run_with_teacher(kv: &KvConfig, common: &Common) -> Result<ToyRun> {
    let opts = toy_options(kv, common)?;
    let path = input(kv, "teacher", common, "teacher.ckpt")?;
    let mut run = ToyRun::new(opts)?;
    run.teacher = load_model(&path, &run.options.model, Mode::Teacher)?;
    Ok(run)
}

pub fn train_teacher(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let opts = toy_options(&kv, common)?;
    kv.finish()?;
    let mut run = ToyRun::new(opts)?;
    run.train_teacher()?;
    let cfg = run.options.model.to_kv();
    let ckpt = save(&common.out, "teacher.ckpt", cfg, run.teacher.params())?;
    write(&common.out, "metrics.csv", &run.log.to_csv())?;
    let losses = run.log.series("teacher", "denoise");
    let tail = &losses[losses.len().saturating_sub(100)..];
    let last = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    println!("teacher trained for {} steps, final loss {last:.5}; wrote {}", losses.len(), ckpt.display());
    Ok(())
}

pub fn gen_ode_pairs(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let run = run_with_teacher(&kv, common)?;
    kv.finish()?;
    let data = run.ode_pairs()?;
    let path = common.out.join("ode_pairs.ckpt");
    fs::create_dir_all(&common.out).map_err(Error::from)?;
    save_checkpoint(&data.to_checkpoint(), &path).map_err(Error::from)?;
    let rows = [
        ("trajectories", data.trajectories.len().to_string()),
        ("pairs", data.pairs().len().to_string()),
        ("levels", data.schedule.len().to_string()),
    ];
    write(&common.out, "metrics.csv", &summary(&rows))?;
    println!("{} trajectories, {} pairs; wrote {}", rows[0].1, rows[1].1, path.display());
    Ok(())
}

pub fn ode_init(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let mut run = run_with_teacher(&kv, common)?;
    let pairs = input(&kv, "pairs", common, "ode_pairs.ckpt")?;
    kv.finish()?;
    let data = OdeDataset::from_checkpoint(&load_checkpoint(&pairs).map_err(Error::from)?)?;
    let (student, before, after) = run.ode_student(&data)?;
    let ckpt = save(&common.out, "ode_student.ckpt", run.options.model.to_kv(), student.params())?;
    write(&common.out, "metrics.csv", &run.log.to_csv())?;
    let rows = [
        ("ode_loss_before", before.to_string()),
        ("ode_loss_after", after.to_string()),
        ("improvement", (before / after).to_string()),
    ];
    write(&common.out, "summary.csv", &summary(&rows))?;
    println!("ode loss {before:.5} -> {after:.5} ({:.1}x); wrote {}", before / after, ckpt.display());
    Ok(())
}

pub fn distill(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let mut run = run_with_teacher(&kv, common)?;
    let path = input(&kv, "student", common, "ode_student.ckpt")?;
    kv.finish()?;
    let mut student = load_model(&path, &run.options.model, Mode::Student)?;
    let before = run.gap(&student)?;
    let aux = run.distill(&mut student)?;
    let after = run.gap(&student)?;
    let cfg = run.options.model.to_kv();
    let ckpt = save(&common.out, "distilled.ckpt", cfg.clone(), student.params())?;
    save(&common.out, "aux.ckpt", cfg, aux.params())?;
    write(&common.out, "metrics.csv", &run.log.to_csv())?;
    let rows = [
        ("gap_before", before.to_string()),
        ("gap_after", after.to_string()),
        ("improvement", (before / after).to_string()),
    ];
    write(&common.out, "summary.csv", &summary(&rows))?;
    println!("teacher gap {before:.4} -> {after:.4} ({:.2}x); wrote {}", before / after, ckpt.display());
    Ok(())
}

pub fn refine(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let mut run = run_with_teacher(&kv, common)?;
    let path = input(&kv, "student", common, "distilled.ckpt")?;
    kv.finish()?;
    let mut student = load_model(&path, &run.options.model, Mode::Student)?;
    let before = run.real_fake_distance(&student)?;
    let disc = run.refine(&mut student)?;
    let after = run.real_fake_distance(&student)?;
    let cfg = run.options.model.to_kv();
    let ckpt = save(&common.out, "refined.ckpt", cfg.clone(), student.params())?;
    save(&common.out, "disc.ckpt", cfg, disc.params())?;
    write(&common.out, "metrics.csv", &run.log.to_csv())?;
    let rows = [("distance_before", before.to_string()), ("distance_after", after.to_string())];
    write(&common.out, "summary.csv", &summary(&rows))?;
    println!("real/fake distance {before:.4} -> {after:.4}; wrote {}", ckpt.display());
    Ok(())
}

/// Reference frame and audio for a run: a toy clip from `clip_seed`, with
/// its audio replaced by the `audio` track file when given.
fn conditioning(kv: &KvConfig, model: &ModelConfig, frames: usize, seed: u64) -> Result<(Tensor, chunkflow_core::audio::AudioTrack)> {
    let clip_seed = kv.get("clip_seed", seed)?;
    let clip = ToyTask::new(model, 0).training_clip(clip_seed, frames)?;
    let audio = match kv.raw("audio") {
        Some(path) => load_track(path).map_err(Error::from)?,
        None => clip.audio,
    };
    if audio.audio_dim() != model.audio_dim {
        return Err(CliError::Invalid(format!("audio has {} features per frame, model expects {}", audio.audio_dim(), model.audio_dim)));
    }
    Ok((clip.reference, audio))
}

fn pipeline_config(kv: &KvConfig, common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_kv(kv)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn checkpoint_path(cfg: &PipelineConfig, common: &Common) -> Result<PathBuf> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| common.out.join("refined.ckpt"));
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Invalid(format!("checkpoint: no such file {}", path.display())))
    }
}

pub fn stream(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let cfg = pipeline_config(&kv, common)?;
    let path = checkpoint_path(&cfg, common)?;
    let model = student_from_checkpoint(&load_checkpoint(&path).map_err(Error::from)?)?;
    let (reference, audio) = conditioning(&kv, model.config(), cfg.num_chunks * model.config().chunk, cfg.seed)?;
    kv.finish()?;
    let out = pipeline::stream(&cfg, &model, &reference, &audio)?;
    let m = &out.metrics;
    write(&common.out, "summary.csv", &m.summary_csv())?;
    write(&common.out, "chunks.csv", &m.chunks_csv())?;
    if let Some(target) = &cfg.output {
        let mut params = ParamSet::new();
        for c in &out.chunks {
            params.add(format!("chunk.{}", c.index), c.pixels.clone());
        }
        let config = format!("kind=stream\nchunks={}\n", out.chunks.len());
        save_checkpoint(&Checkpoint { config, params }, target).map_err(Error::from)?;
    }
    if m.stopped_early() {
        eprintln!("audio ran out after {} of {} chunks", m.chunks, m.requested_chunks);
    }
    println!(
        "{} chunks: ffd {} us, latency {} us, rtf denoise {:.3} decode {:.3}, real time {}",
        m.chunks,
        m.ffd_us(),
        m.latency_us(),
        m.denoise_rtf(),
        m.decode_rtf(),
        m.sustains_real_time()
    );
    Ok(())
}

pub fn bench(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let mut cfg = pipeline_config(&kv, common)?;
    cfg.clock = ClockMode::Wall;
    let model_cfg = ModelConfig::from_kv(&kv, &ModelConfig::tiny())?;
    let model = match &cfg.checkpoint {
        Some(_) => student_from_checkpoint(&load_checkpoint(checkpoint_path(&cfg, common)?).map_err(Error::from)?)?,
        None => AvatarDit::new(ModelConfig { mode: Mode::Student, ..model_cfg }, cfg.seed)?,
    };
    let (reference, audio) = conditioning(&kv, model.config(), cfg.num_chunks * model.config().chunk, cfg.seed)?;
    kv.finish()?;
    let mut csv = String::from("variant,chunks,forwards,denoise_ms_per_chunk,decode_ms_per_chunk,denoise_rtf,decode_rtf,ffd_us,latency_us,real_time\n");
    for (name, recache) in [("cached", false), ("clean_recache", true)] {
        let run = PipelineConfig {
            clean_recache: recache,
            ..cfg.clone()
        };
        let m = pipeline::stream(&run, &model, &reference, &audio)?.metrics;
        let per = |busy: u64| busy as f64 / 1e3 / m.chunks.max(1) as f64;
        let line = format!(
            "{name},{},{},{:.3},{:.3},{:.4},{:.4},{},{},{}\n",
            m.chunks,
            m.forwards,
            per(m.denoise.total_busy_us()),
            per(m.decode.total_busy_us()),
            m.denoise_rtf(),
            m.decode_rtf(),
            m.ffd_us(),
            m.latency_us(),
            m.sustains_real_time()
        );
        print!("{line}");
        csv.push_str(&line);
    }
    write(&common.out, "bench.csv", &csv)?;
    Ok(())
}

pub fn drift(common: &Common) -> Result<()> {
    let kv = load_config(common)?;
    let seed = match common.seed {
        Some(s) => s,
        None => kv.get("seed", 0u64)?,
    };
    let path = input(&kv, "checkpoint", common, "refined.ckpt")?;
    let model = student_from_checkpoint(&load_checkpoint(&path).map_err(Error::from)?)?;
    let chunk = model.config().chunk;
    let chunks: usize = kv.get("num_chunks", 100)?;
    let cache = CacheConfig::from_kv(&kv, chunk, &CacheConfig { chunk, ..CacheConfig::default() })?;
    let compare: bool = kv.get("compare", false)?;
    let (reference, audio) = conditioning(&kv, model.config(), chunks * chunk, seed)?;
    kv.finish()?;
    if chunks == 0 {
        return Err(CliError::Invalid("num_chunks must be positive".into()));
    }
    let curve = |cache: CacheConfig| -> Result<Vec<f64>> {
        let opts = RolloutOptions {
            cache,
            seed,
            ..RolloutOptions::default()
        };
        let (out, _) = rollout(&model, &reference, &audio, chunks, opts)?;
        let cleans: Vec<Tensor> = out.into_iter().map(|g| g.clean).collect();
        Ok(drift_report(&cleans, &reference)?)
    };
    let main = curve(cache)?;
    write(&common.out, "drift.csv", &drift_csv(&main))?;
    let mut rows = vec![("mean_drift", mean_drift(&main).to_string())];
    if compare {
        let off = CacheConfig {
            sink_frames: 0,
            window_frames: cache.sink_frames + cache.window_frames,
            chunk,
            positions: PositionMode::Global,
        };
        let base = curve(off)?;
        write(&common.out, "drift_baseline.csv", &drift_csv(&base))?;
        rows.push(("mean_drift_baseline", mean_drift(&base).to_string()));
    }
    write(&common.out, "summary.csv", &summary(&rows))?;
    for (k, v) in &rows {
        println!("{k} {v}");
    }
    Ok(())
}
