//! `unifan` — train and probe extreme-multilabel models with a uniform
//! fixed-fan-in sparse output layer.
//!
//! Every subcommand reads one flat key=value config (file plus trailing
//! overrides), validates it fully, then runs. Exit codes: 0 success,
//! 2 configuration error, 3 data error, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unifan::{Error, Result};

use config::Config;

#[derive(Parser)]
#[command(name = "unifan", version, about = "Sparse-output-layer training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file of key=value lines (# comments allowed).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Cap worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,

    /// Bit-reproducible mode: one thread, 64-bit arithmetic, wall-time
    /// fields report zero.
    #[arg(long)]
    deterministic: bool,

    /// Overrides the seed key.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides the out key).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Trailing key=value overrides, applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and best/final checkpoints.
    Train(CommonArgs),
    /// Score a saved checkpoint on a dataset.
    Eval(CommonArgs),
    /// Time the sparse head kernels under both losses.
    Bench(CommonArgs),
    /// Run the label-hashing ensemble baseline and compare heads.
    Mach(CommonArgs),
    /// Print parameter-memory tables (pure arithmetic, no allocation).
    Memreport(CommonArgs),
    /// Generate a synthetic clustered dataset.
    Synth(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Train(a)
            | Command::Eval(a)
            | Command::Bench(a)
            | Command::Mach(a)
            | Command::Memreport(a)
            | Command::Synth(a) => a,
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let threads = if args.deterministic {
        Some(1)
    } else {
        args.threads
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let mut cfg = Config::load(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string());
    }
    if let Some(out) = &args.out {
        cfg.set("out", out.display().to_string());
    }
    // Deterministic runs use f64 end to end and skip wall-clock readings so
    // repeated invocations produce byte-identical artifacts.
    let wall = !args.deterministic;
    match (&cli.command, args.deterministic) {
        (Command::Train(_), true) => commands::cmd_train::<f64>(&cfg, wall),
        (Command::Train(_), false) => commands::cmd_train::<f32>(&cfg, wall),
        (Command::Eval(_), true) => commands::cmd_eval::<f64>(&cfg, wall),
        (Command::Eval(_), false) => commands::cmd_eval::<f32>(&cfg, wall),
        (Command::Bench(_), true) => commands::cmd_bench::<f64>(&cfg, wall),
        (Command::Bench(_), false) => commands::cmd_bench::<f32>(&cfg, wall),
        (Command::Mach(_), true) => commands::cmd_mach::<f64>(&cfg, wall),
        (Command::Mach(_), false) => commands::cmd_mach::<f32>(&cfg, wall),
        (Command::Memreport(_), _) => commands::cmd_memreport(&cfg),
        (Command::Synth(_), _) => commands::cmd_synth(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::Shape { .. } => 2,
                Error::Parse { .. } | Error::Format { .. } | Error::Io(_) => 3,
                Error::NonFinite(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
