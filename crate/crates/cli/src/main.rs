use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use synflow_cli::commands::{self, Ctx};
use synflow_cli::config::{load_config, RunConfig};

#[derive(Parser)]
#[command(name = "synflow", version, about = "Reaction-template GFlowNet for synthesizable molecules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the policies; writes metrics.csv and checkpoints.
    Train(Common),
    /// Sample routes from a checkpoint into routes.jsonl.
    Sample(Common),
    /// Diversity, modes, top-k reward and novelty of samples into eval.csv.
    Eval(Common),
    /// Enumerate every terminal molecule of the environment.
    Enumerate(Common),
    /// Solved-route rates of the trained and uniform backward policies.
    Routes(Common),
    /// Compare exp(logZ) under a constant reward with the exact count.
    EstimateSpace(Common),
    /// Finite-difference check of the trajectory balance gradients.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps the worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Checkpoint to load (sample, eval, routes); defaults to <out>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn context(c: &Common) -> Result<Ctx> {
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = match &c.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let seed = c.seed.unwrap_or(config.seed);
    let out = c
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("synflow-out"));
    Ok(Ctx {
        config,
        seed,
        out,
        checkpoint: c.checkpoint.clone(),
    })
}

fn run(cli: Cli) -> Result<()> {
    let (common, f): (&Common, fn(&Ctx) -> Result<()>) = match &cli.command {
        Command::Train(c) => (c, commands::train),
        Command::Sample(c) => (c, commands::sample),
        Command::Eval(c) => (c, commands::eval),
        Command::Enumerate(c) => (c, commands::enumerate),
        Command::Routes(c) => (c, commands::routes),
        Command::EstimateSpace(c) => (c, commands::estimate_space),
        Command::Gradcheck(c) => (c, commands::gradcheck),
    };
    f(&context(common)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SYNFLOW_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
