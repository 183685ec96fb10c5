use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chunkflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const QUICK: &str = "teacher_steps=20\ntrajectories=1\node_steps=5\nsid_steps=2\nrefine_steps=2\neval_clips=1\neval_samples=2\n";

#[test]
fn training_stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.cfg", QUICK);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    for cmd in ["train-teacher", "gen-ode-pairs", "ode-init", "distill", "refine"] {
        let o = chunkflow(&[cmd, "--config", &cfg, "--seed", "5", "--out", out]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["teacher.ckpt", "ode_pairs.ckpt", "ode_student.ckpt", "distilled.ckpt", "aux.ckpt", "refined.ckpt", "disc.ckpt"] {
        assert!(Path::new(out).join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(Path::new(out).join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,phase,name,value\n"));
    assert!(metrics.contains(",refine,disc,"));
    let summary = fs::read_to_string(Path::new(out).join("summary.csv")).unwrap();
    assert!(summary.starts_with("metric,value\ndistance_before,"));

    let s = write_config(dir.path(), "stream.cfg", "num_chunks=4\ndenoise_first_us=330000\ndenoise_steady_us=331200\n");
    let o = chunkflow(&["stream", "--config", &s, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(Path::new(out).join("summary.csv")).unwrap();
    assert!(summary.starts_with("metric,value\nchunks,4\n"));
    let chunks = fs::read_to_string(Path::new(out).join("chunks.csv")).unwrap();
    assert_eq!(chunks.lines().count(), 5);

    let d = write_config(dir.path(), "drift.cfg", "num_chunks=6\ncompare=true\n");
    let o = chunkflow(&["drift", "--config", &d, "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = fs::read_to_string(Path::new(out).join("drift.csv")).unwrap();
    assert!(curve.starts_with("chunk,drift\n"));
    assert_eq!(curve.lines().count(), 7);
    assert!(Path::new(out).join("drift_baseline.csv").is_file());
}

#[test]
fn bench_runs_without_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.cfg", "num_chunks=3\n");
    let o = chunkflow(&["bench", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("variant,chunks,forwards,"));
    assert!(lines.next().unwrap().starts_with("cached,3,9,"));
    assert!(lines.next().unwrap().starts_with("clean_recache,3,12,"));
}

#[test]
fn invalid_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let typo = write_config(dir.path(), "typo.cfg", "teacher_stepz=3\n");
    assert_eq!(code(&chunkflow(&["train-teacher", "--config", &typo, "--out", out])), 1);
    let bad = write_config(dir.path(), "bad.cfg", "teacher_steps=many\n");
    assert_eq!(code(&chunkflow(&["train-teacher", "--config", &bad, "--out", out])), 1);
    let missing = dir.path().join("nope.cfg");
    assert_eq!(code(&chunkflow(&["train-teacher", "--config", missing.to_str().unwrap()])), 1);
    // no teacher checkpoint in the output directory
    assert_eq!(code(&chunkflow(&["gen-ode-pairs", "--out", out])), 1);
    assert_eq!(code(&chunkflow(&["stream", "--out", out])), 1);
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let c = write_config(dir.path(), "g.cfg", &format!("checkpoint={}\n", garbage.display()));
    assert_eq!(code(&chunkflow(&["stream", "--config", &c, "--out", out])), 1);
    assert_eq!(code(&chunkflow(&["no-such-command"])), 1);
    assert_eq!(code(&chunkflow(&["stream", "--seed", "minus-one"])), 1);
    assert_eq!(code(&chunkflow(&["--help"])), 0);
}

#[test]
fn run_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let cfg = write_config(dir.path(), "t.cfg", "teacher_steps=1\n");
    let out = blocker.join("sub");
    let o = chunkflow(&["train-teacher", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
