//! End-to-end runs on the toy task: teacher training, ODE pairs, ODE
//! initialisation, distillation and adversarial refinement, with the
//! evaluation measures used to judge each stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{DiscConfig, Discriminator};
use crate::dit::{AvatarDit, Mode, ModelConfig};
use crate::kv_cache::CacheConfig;
use crate::scheduler::{NoiseSchedule, RolloutOptions};
use crate::tensor::Tensor;
use crate::toy::{Clip, ToyTask};
use crate::train::{
    adversarial_step, distribution_gap, generate_ode_pairs, moment_distance, ode_eval, ode_init, sid_step, student_sample,
    train_teacher, Adam, AdvModels, AdvOptions, OdeDataset, OdeInitOptions, SidModels, SidOptions, TeacherOptions, TrainLog,
};
use crate::runtime::config::KvConfig;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ToyRunOptions {
    pub seed: u64,
    pub model: ModelConfig,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub trajectories: usize,
    pub teacher_grid_steps: usize,
    pub ode_steps: usize,
    pub ode_lr: f64,
    pub sid_steps: usize,
    pub sid_lr: f64,
    pub aux_lr: f64,
    pub sid: SidOptions,
    pub refine_steps: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub adv: AdvOptions,
    pub cache: CacheConfig,
    pub eval_clips: usize,
    pub eval_samples: usize,
}

impl Default for ToyRunOptions {
    fn default() -> Self {
        let schedule = NoiseSchedule::student_default();
        let grid = NoiseSchedule::subdivide(&schedule, 20).expect("default schedule subdivides");
        Self {
            seed: 0,
            model: ModelConfig::tiny(),
            teacher_steps: 3000,
            teacher_lr: 2e-3,
            trajectories: 16,
            teacher_grid_steps: 20,
            ode_steps: 2000,
            ode_lr: 1e-3,
            sid_steps: 1200,
            sid_lr: 3e-4,
            aux_lr: 1e-3,
            sid: SidOptions {
                renoise: grid.levels().iter().copied().filter(|&s| s > 0.04).collect(),
                draws: 3,
                aux_steps: 5,
                ..SidOptions::default()
            },
            refine_steps: 500,
            gen_lr: 1e-5,
            disc_lr: 1e-3,
            adv: AdvOptions::default(),
            cache: CacheConfig::default(),
            eval_clips: 8,
            eval_samples: 64,
        }
    }
}

impl ToyRunOptions {
    /// Reads run keys over the defaults: model and cache keys, `seed`,
    /// `teacher_steps`, `teacher_lr`, `trajectories`, `teacher_grid_steps`,
    /// `ode_steps`, `ode_lr`, `sid_steps`, `sid_lr`, `aux_lr`, `sid_draws`,
    /// `sid_aux_steps`, `random_exit`, `refine_steps`, `gen_lr`, `disc_lr`,
    /// `gamma`, `fd_eps`, `distill_weight`, `eval_clips`, `eval_samples`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let model = ModelConfig::from_kv(kv, &d.model)?;
        let cache = CacheConfig::from_kv(kv, model.chunk, &CacheConfig { chunk: model.chunk, ..d.cache })?;
        let random_exit = kv.get("random_exit", d.sid.random_exit)?;
        let sid = SidOptions {
            draws: kv.get("sid_draws", d.sid.draws)?,
            aux_steps: kv.get("sid_aux_steps", d.sid.aux_steps)?,
            random_exit,
            cache,
            ..d.sid.clone()
        };
        let adv = AdvOptions {
            gamma: kv.get("gamma", d.adv.gamma)?,
            fd_eps: kv.get("fd_eps", d.adv.fd_eps)?,
            distill_weight: kv.get("distill_weight", d.adv.distill_weight)?,
            random_exit,
            cache,
            sid: sid.clone(),
            ..d.adv.clone()
        };
        let o = Self {
            seed: kv.get("seed", d.seed)?,
            model,
            teacher_steps: kv.get("teacher_steps", d.teacher_steps)?,
            teacher_lr: kv.get("teacher_lr", d.teacher_lr)?,
            trajectories: kv.get("trajectories", d.trajectories)?,
            teacher_grid_steps: kv.get("teacher_grid_steps", d.teacher_grid_steps)?,
            ode_steps: kv.get("ode_steps", d.ode_steps)?,
            ode_lr: kv.get("ode_lr", d.ode_lr)?,
            sid_steps: kv.get("sid_steps", d.sid_steps)?,
            sid_lr: kv.get("sid_lr", d.sid_lr)?,
            aux_lr: kv.get("aux_lr", d.aux_lr)?,
            sid,
            refine_steps: kv.get("refine_steps", d.refine_steps)?,
            gen_lr: kv.get("gen_lr", d.gen_lr)?,
            disc_lr: kv.get("disc_lr", d.disc_lr)?,
            adv,
            cache,
            eval_clips: kv.get("eval_clips", d.eval_clips)?,
            eval_samples: kv.get("eval_samples", d.eval_samples)?,
        };
        if !o.model.window.is_multiple_of(o.model.chunk) {
            return Err(Error::Config(format!("window {} is not a multiple of chunk {}", o.model.window, o.model.chunk)));
        }
        if o.trajectories == 0 || o.eval_clips == 0 || o.eval_samples == 0 {
            return Err(Error::Config("trajectories, eval_clips and eval_samples must be positive".into()));
        }
        Ok(o)
    }
}

/// Clip seeds are drawn from disjoint ranges per use so training and
/// evaluation never share conditioning.
fn clip_seed(run: u64, purpose: u64, k: u64) -> u64 {
    purpose * 1_000_000_000 + run * 1_000_000 + k
}

pub struct ToyRun {
    pub options: ToyRunOptions,
    pub task: ToyTask,
    pub teacher: AvatarDit,
    pub grid: NoiseSchedule,
    pub log: TrainLog,
}

impl ToyRun {
    pub fn new(options: ToyRunOptions) -> Result<Self> {
        let task = ToyTask::new(&options.model, 0);
        let teacher = AvatarDit::new(options.model.clone(), options.seed)?;
        let grid = NoiseSchedule::subdivide(&options.sid.schedule, options.teacher_grid_steps)?;
        Ok(Self {
            options,
            task,
            teacher,
            grid,
            log: TrainLog::default(),
        })
    }

    fn frames(&self) -> usize {
        self.options.model.window
    }

    pub fn train_teacher(&mut self) -> Result<()> {
        let o = TeacherOptions {
            steps: self.options.teacher_steps,
            batch: 4,
            lr: self.options.teacher_lr,
            seed: self.options.seed,
        };
        train_teacher(&mut self.teacher, &self.task, &o, &mut self.log)?;
        Ok(())
    }

    pub fn clips(&self, purpose: u64, count: usize) -> Result<Vec<Clip>> {
        (0..count as u64)
            .map(|k| self.task.training_clip(clip_seed(self.options.seed, purpose, k), self.frames()))
            .collect()
    }

    pub fn eval_clips(&self) -> Result<Vec<Clip>> {
        self.clips(9, self.options.eval_clips)
    }

    pub fn ode_pairs(&self) -> Result<OdeDataset> {
        let clips = self.clips(1, self.options.trajectories)?;
        generate_ode_pairs(&self.teacher, &clips, &self.options.sid.schedule, &self.grid, self.options.seed)
    }

    /// Student initialised from the teacher weights and regressed on `data`.
    /// Returns the student and its regression loss before and after.
    pub fn ode_student(&mut self, data: &OdeDataset) -> Result<(AvatarDit, f64, f64)> {
        let mut student = self.teacher.with_mode(Mode::Student);
        let before = ode_eval(&student, data, self.options.cache)?;
        let o = OdeInitOptions {
            steps: self.options.ode_steps,
            lr: self.options.ode_lr,
            seed: self.options.seed,
            cache: self.options.cache,
        };
        ode_init(&mut student, data, &o, &mut self.log)?;
        let after = ode_eval(&student, data, self.options.cache)?;
        Ok((student, before, after))
    }

    /// Distils `student` in place; returns the trained aux network.
    pub fn distill(&mut self, student: &mut AvatarDit) -> Result<AvatarDit> {
        let mut aux = self.teacher.clone();
        let mut adam_s = Adam::new(student.params(), self.options.sid_lr);
        let mut adam_a = Adam::new(aux.params(), self.options.aux_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        let clips = self.clips(2, self.options.sid_steps)?;
        let opts = SidOptions {
            cache: self.options.cache,
            ..self.options.sid.clone()
        };
        for (step, clip) in clips.iter().enumerate() {
            let models = SidModels {
                student,
                aux: &mut aux,
                teacher: &self.teacher,
            };
            sid_step(models, &mut adam_s, &mut adam_a, &clip.reference, &clip.audio, &opts, &mut rng, step as u64, &mut self.log)?;
        }
        Ok(aux)
    }

    /// Moment distance between student and teacher samples on the held-out
    /// clips.
    pub fn gap(&self, student: &AvatarDit) -> Result<f64> {
        distribution_gap(
            student,
            &self.teacher,
            &self.eval_clips()?,
            self.options.eval_samples,
            &self.options.sid.schedule,
            &self.grid,
            self.options.cache,
            self.options.seed ^ 0x5eed,
        )
    }

    /// Adversarial refinement of `student` on real toy clips.
    pub fn refine(&mut self, student: &mut AvatarDit) -> Result<Discriminator> {
        let (steps, gen_lr, disc_lr) = (self.options.refine_steps, self.options.gen_lr, self.options.disc_lr);
        let opts = AdvOptions {
            cache: self.options.cache,
            ..self.options.adv.clone()
        };
        let mut disc = Discriminator::from_teacher(&self.teacher, DiscConfig::for_model(&self.options.model), self.options.seed + 1)?;
        let mut adam_s = Adam::new(student.params(), gen_lr);
        let mut adam_d = Adam::new(disc.params(), disc_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed ^ 0xad);
        let clips = self.clips(3, steps)?;
        for (step, clip) in clips.iter().enumerate() {
            let models = AdvModels {
                student,
                disc: &mut disc,
                distill: None,
            };
            adversarial_step(models, &mut adam_s, &mut adam_d, clip, &opts, &mut rng, step as u64, &mut self.log)?;
        }
        Ok(disc)
    }

    /// Distance between reference-relative frame statistics of student
    /// samples and of real clips, pooled over the held-out clips.
    pub fn real_fake_distance(&self, student: &AvatarDit) -> Result<f64> {
        let clips = self.clips(8, 64)?;
        let mut real = Vec::with_capacity(clips.len());
        let mut fake = Vec::with_capacity(clips.len());
        for (k, c) in clips.iter().enumerate() {
            let opts = RolloutOptions {
                schedule: self.options.sid.schedule.clone(),
                cache: self.options.cache,
                seed: self.options.seed * 7919 + k as u64,
                clean_recache: false,
            };
            let s = student_sample(student, &c.reference, &c.audio, opts)?;
            real.push(residual(&c.frames, &c.reference));
            fake.push(residual(&s, &c.reference));
        }
        Ok(moment_distance(&fake, &real))
    }
}

/// `frames − reference`, the reference broadcast over frames.
pub fn residual(frames: &Tensor, reference: &Tensor) -> Tensor {
    let r = reference.data();
    Tensor::from_fn(frames.shape(), |i| frames.data()[i] - r[i % r.len()])
}
