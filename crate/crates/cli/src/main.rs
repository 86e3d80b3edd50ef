//! `depthforge` command-line tool.
//!
//! Exit codes: 0 ok, 2 config, 3 numeric, 4 checkpoint, 5 gradcheck, 6 I/O.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthforge::training::TrainMode;
use depthforge::Error;

use crate::config::RunConfig;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;
pub const EXIT_IO: u8 = 6;

#[derive(Parser, Debug)]
#[command(name = "depthforge", version, about = "Self-supervised depth training, evaluation and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the multi-task network on synthetic scenes.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the ground-truth oracle).
    Eval(EvalArgs),
    /// Evaluate at several input brightness scales.
    Sweep(SweepArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write predicted or ground-truth depth as a coloured PLY point cloud.
    ExportPointcloud(ExportArgs),
}

/// Options shared by every command that builds scenes or a model.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file (`[train]`, `[loss]`, `[net]`, `[scenes]`, `[eval]` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` and the seed environment variable.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Number of synthetic scenes.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    scene_seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> depthforge::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.mode {
            t.mode = v;
        }
        if let Some(v) = self.height {
            t.height = v;
        }
        if let Some(v) = self.width {
            t.width = v;
        }
        if let Some(v) = self.scenes {
            cfg.scenes.count = v;
        }
        if let Some(v) = self.scene_seed {
            cfg.scenes.seed = v;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for the loss CSV, checkpoints and run metadata.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

/// Which depth source to evaluate.
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ModelSource {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use ground-truth depth as the prediction (harness control).
    #[arg(long, visible_alias = "gt")]
    oracle: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    out: PathBuf,
    /// Depth cap in metres.
    #[arg(long)]
    cap: Option<f64>,
    /// Also report metrics per semantic class.
    #[arg(long)]
    per_class: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated brightness factors in (0, 1].
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    cap: Option<f64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Only run cases whose name contains this substring.
    #[arg(long)]
    filter: Option<String>,
    /// Also run a case with a deliberately wrong gradient.
    #[arg(long)]
    corrupted: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: ModelSource,
    /// Output `.ply` path; metadata goes next to it as `.json`.
    #[arg(long)]
    out: PathBuf,
    /// Which synthetic scene to export.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Scene(_) => EXIT_CONFIG,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Io(_) | Error::Image(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_NUMERIC,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::ExportPointcloud(a) => commands::export_pointcloud(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
