//! `chunkflow` command line: toy training stages, streaming and
//! measurement runs driven by flat `key=value` config files.
//!
//! Exit codes: 0 on success, 1 for invalid input (arguments, config,
//! incompatible files), 2 when a run fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "chunkflow", version, about = "Streaming chunk-autoregressive avatar diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; also the default location of input checkpoints.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a bidirectional teacher on the toy task.
    TrainTeacher(Common),
    /// Sample teacher ODE trajectories at the student levels.
    GenOdePairs(Common),
    /// Regress a causal student onto the ODE pairs.
    OdeInit(Common),
    /// Score-based distillation of the student against the teacher.
    Distill(Common),
    /// Adversarial refinement against real toy clips.
    Refine(Common),
    /// Run the two-stage streaming pipeline.
    Stream(Common),
    /// Wall-clock throughput of the streaming pipeline.
    Bench(Common),
    /// Per-chunk drift of a long rollout.
    Drift(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::TrainTeacher(c) => commands::train_teacher(c),
        Command::GenOdePairs(c) => commands::gen_ode_pairs(c),
        Command::OdeInit(c) => commands::ode_init(c),
        Command::Distill(c) => commands::distill(c),
        Command::Refine(c) => commands::refine(c),
        Command::Stream(c) => commands::stream(c),
        Command::Bench(c) => commands::bench(c),
        Command::Drift(c) => commands::drift(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
