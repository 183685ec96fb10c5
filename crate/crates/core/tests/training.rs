use chunkflow_core::autodiff::Tape;
use chunkflow_core::discriminator::{DiscConfig, Discriminator};
use chunkflow_core::dit::{AvatarDit, Mode, ModelConfig};
use chunkflow_core::nn::ParamSet;
use chunkflow_core::scheduler::{add_noise, interpolate, step_to, NoiseSchedule};
use chunkflow_core::tensor::Tensor;
use chunkflow_core::toy::ToyTask;
use chunkflow_core::train::{
    adversarial_step, head_tail_means, moment_distance, relativistic_loss, sid_step, train_teacher, Adam, AdvModels, AdvOptions,
    SidModels, SidOptions, TeacherOptions, TrainLog,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn step_to_moves_along_the_noise_line(seed in any::<u64>(), sigma in 0.05f64..1.0, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let noise = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let next = sigma * frac;
        let x = interpolate(&clean, &noise, sigma).unwrap();
        let y = step_to(&x, &clean, sigma, next).unwrap();
        let want = interpolate(&clean, &noise, next).unwrap();
        prop_assert!(y.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn subdivided_grid_contains_student_levels(steps in 3usize..30) {
        let s = NoiseSchedule::student_default();
        let g = NoiseSchedule::subdivide(&s, steps).unwrap();
        prop_assert!(s.is_subset_of(&g));
        prop_assert!(g.levels().windows(2).all(|w| w[0] > w[1]));
        prop_assert!(g.len() >= s.len());
    }

    #[test]
    fn equal_logits_give_ln2(v in -5.0f64..5.0) {
        let cfg = ModelConfig::tiny();
        let teacher = AvatarDit::new(cfg.clone(), 1).unwrap();
        let disc = Discriminator::from_teacher(&teacher, DiscConfig::for_model(&cfg), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&mut rng, &[8, 4], 1.0);
        let mut tape = Tape::new();
        let p = disc.bind_frozen(&mut tape);
        let xv = tape.constant(x.map(|a| a + v));
        let d = disc.forward(&mut tape, &p, xv, None).unwrap();
        let l = relativistic_loss(&mut tape, &d, &d).unwrap();
        prop_assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut ps = ParamSet::new();
    ps.add("x", Tensor::new(&[3], vec![3.0, -2.0, 0.5]).unwrap());
    let mut adam = Adam::new(&ps, 0.05);
    for _ in 0..500 {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let sq = tape.mul(p.vars()[0], p.vars()[0]).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        ps.accumulate(&p, &g);
        adam.step(&mut ps);
    }
    assert!(ps.by_name("x").unwrap().norm() < 1e-2);
    assert_eq!(adam.steps(), 500);
}

#[test]
fn teacher_loss_falls() {
    let cfg = ModelConfig::tiny();
    let task = ToyTask::new(&cfg, 0);
    let mut m = AvatarDit::new(cfg, 1).unwrap();
    let mut log = TrainLog::default();
    let o = TeacherOptions { steps: 300, batch: 2, lr: 2e-3, seed: 0 };
    train_teacher(&mut m, &task, &o, &mut log).unwrap();
    let (head, tail) = head_tail_means(&log.series("teacher", "denoise"), 50);
    assert!(tail < 0.8 * head, "{head} -> {tail}");
    assert!(log.to_csv().starts_with("step,phase,name,value\n0,teacher,denoise,"));
}

#[test]
fn distillation_and_adversarial_steps_update_the_student() {
    let cfg = ModelConfig::tiny();
    let task = ToyTask::new(&cfg, 0);
    let teacher = AvatarDit::new(cfg.clone(), 2).unwrap();
    let mut teacher_trained = teacher.clone();
    train_teacher(&mut teacher_trained, &task, &TeacherOptions { steps: 20, batch: 1, lr: 1e-3, seed: 0 }, &mut TrainLog::default()).unwrap();
    let mut student = teacher_trained.with_mode(Mode::Student);
    let before = student.params().clone();
    let mut aux = teacher_trained.clone();
    let mut adam_s = Adam::new(student.params(), 1e-3);
    let mut adam_a = Adam::new(aux.params(), 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut log = TrainLog::default();
    let clip = task.training_clip(5, cfg.window).unwrap();
    for step in 0..2 {
        let models = SidModels { student: &mut student, aux: &mut aux, teacher: &teacher_trained };
        let s = sid_step(models, &mut adam_s, &mut adam_a, &clip.reference, &clip.audio, &SidOptions::default(), &mut rng, step, &mut log).unwrap();
        assert!(s.student_loss.is_finite() && s.aux_loss.is_finite());
    }
    assert_ne!(student.params(), &before);

    let mut disc = Discriminator::from_teacher(&teacher_trained, DiscConfig::for_model(&cfg), 6).unwrap();
    let disc_before = disc.params().clone();
    let mut adam_d = Adam::new(disc.params(), 1e-3);
    let models = AdvModels { student: &mut student, disc: &mut disc, distill: None };
    let st = adversarial_step(models, &mut adam_s, &mut adam_d, &clip, &AdvOptions::default(), &mut rng, 0, &mut log).unwrap();
    assert!(st.r1 >= 0.0 && st.r2 >= 0.0 && st.disc_loss.is_finite());
    assert_ne!(disc.params(), &disc_before);
    // the backbone moves too unless frozen
    assert_eq!(log.series("refine", "gen").len(), 1);
}

#[test]
fn moment_distance_vanishes_on_identical_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<Tensor> = (0..5).map(|_| Tensor::randn(&mut rng, &[2, 3], 1.0)).collect();
    assert!(moment_distance(&a, &a).abs() < 1e-12);
    let shifted: Vec<Tensor> = a.iter().map(|t| t.map(|v| v + 1.0)).collect();
    assert!(moment_distance(&a, &shifted) > 0.5);
    let _ = add_noise(&a[0], 0.5, 1).unwrap();
}
