use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::Failure;

/// Train, fuse, run and analyse lightweight image-enhancement networks.
#[derive(Debug, Parser)]
#[command(name = "mobileie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from a JSON config.
    Train(TrainArgs),
    /// Collapse a training checkpoint into the single-path inference form.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a training checkpoint against its fused archive on random inputs.
    Verify {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, value_parser = parse_size, default_value = "64x64")]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Enhance one image or every image in a directory.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean PSNR / SSIM / MAE over `DIR/input` and `DIR/target` pairs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Latency of a forward pass; a training checkpoint is timed in both forms.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Input size as HxW.
        #[arg(long, value_parser = parse_size, default_value = "400x600")]
        size: (usize, usize),
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Channel KL matrices and, against a baseline, kernel-delta grids.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `input/` and `target/` images.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Optional held-out pairs, laid out like `--data`.
    #[arg(long, requires = "data")]
    val: Option<PathBuf>,
    /// Number of generated training pairs.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Fuse { input, out } => commands::fuse(&input, &out),
        Command::Verify {
            train,
            fused,
            trials,
            tol,
            size,
            seed,
        } => commands::verify(&train, &fused, trials, tol, size, seed),
        Command::Infer { model, input, out } => commands::infer(&model, &input, &out),
        Command::Eval { model, data } => commands::eval(&model, &data),
        Command::Bench { model, size, iters } => commands::bench(&model, size, iters),
        Command::Inspect {
            model,
            baseline,
            report,
        } => commands::inspect(&model, baseline.as_deref(), &report),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, msg }) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
