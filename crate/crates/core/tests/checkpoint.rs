use chunkflow_core::dit::{AvatarDit, Mode, ModelConfig};
use chunkflow_core::nn::ParamSet;
use chunkflow_core::runtime::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use chunkflow_core::runtime::pipeline::student_from_checkpoint;
use chunkflow_core::scheduler::NoiseSchedule;
use chunkflow_core::tensor::Tensor;
use chunkflow_core::toy::ToyTask;
use chunkflow_core::train::{generate_ode_pairs, OdeDataset};
use proptest::prelude::*;

proptest! {
    #[test]
    fn checkpoints_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4, name in "[a-z.]{1,12}") {
        let n = values.len() / rows * rows;
        prop_assume!(n > 0);
        let mut params = ParamSet::new();
        params.add(name.clone(), Tensor::new(&[rows, n / rows], values[..n].to_vec()).unwrap());
        params.add("bias", Tensor::from_fn(&[3], |i| i as f64 - 1.5));
        let c = Checkpoint { config: format!("layers=2\nnote={name}\n"), params };
        prop_assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncated_checkpoints_fail(cut in 0usize..200) {
        let mut params = ParamSet::new();
        params.add("w", Tensor::ones(&[4, 4]));
        let bytes = Checkpoint { config: "layers=2\n".into(), params }.to_bytes();
        prop_assume!(cut < bytes.len());
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn teacher_file_loads_as_student_with_same_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let cfg = ModelConfig::tiny();
    let teacher = AvatarDit::new(cfg.clone(), 3).unwrap();
    save_checkpoint(&Checkpoint { config: cfg.to_kv(), params: teacher.params().clone() }, &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let student = student_from_checkpoint(&ckpt).unwrap();
    assert_eq!(student.config().mode, Mode::Student);
    assert_eq!(student.params(), teacher.params());
    // the mode does not enter the compatibility digest; shapes do
    assert!(ckpt.check_compatible(&student.config().to_kv()).is_ok());
    let wider = ModelConfig { model_dim: 48, ..cfg };
    assert!(matches!(ckpt.check_compatible(&wider.to_kv()), Err(CheckpointError::DigestMismatch { .. })));
}

#[test]
fn ode_pairs_survive_the_file_format() {
    let cfg = ModelConfig::tiny();
    let teacher = AvatarDit::new(cfg.clone(), 4).unwrap();
    let task = ToyTask::new(&cfg, 0);
    let clips: Vec<_> = (0..2).map(|k| task.training_clip(k, cfg.window).unwrap()).collect();
    let student = NoiseSchedule::student_default();
    let grid = NoiseSchedule::subdivide(&student, 4).unwrap();
    let data = generate_ode_pairs(&teacher, &clips, &student, &grid, 1).unwrap();
    let back = OdeDataset::from_checkpoint(&Checkpoint::from_bytes(&data.to_checkpoint().to_bytes()).unwrap()).unwrap();
    assert_eq!(back, data);
    assert_eq!(back.pairs().len(), 2 * (cfg.window / cfg.chunk) * student.len());
    let not_pairs = Checkpoint { config: cfg.to_kv(), params: teacher.params().clone() };
    assert!(OdeDataset::from_checkpoint(&not_pairs).is_err());
}
