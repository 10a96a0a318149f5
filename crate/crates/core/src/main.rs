//! Batch front door for the conductance laboratory.
//!
//! Subcommands mirror the experiment kinds; every run reads a TOML config,
//! applies command-line overrides, and writes CSV/plot/manifest artifacts
//! into the output directory. Exit codes: 0 success, 2 validation failure,
//! 3 runtime failure. Failures are reported as JSON on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rcm_lab::config::{parse_config, ExperimentConfig, ExperimentKind};
use rcm_lab::experiment::run_experiment;
use rcm_lab::Error;

#[derive(Parser)]
#[command(
    name = "rcm-lab",
    version,
    about = "Random conductance model laboratory: heat flow, resistance weights, correctors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo relaxation moments of a local observable.
    Relax(RunArgs),
    /// On-diagonal heat-kernel series for one environment.
    Kernel(RunArgs),
    /// Massive-corrector mass sweep.
    Corrector(RunArgs),
    /// Resistance weights, paths, and moderation statistics.
    Weights(RunArgs),
    /// Slow-relaxation experiment under power-law-near-zero conductances.
    Necessity(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's worker thread count (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Relax(_) => ExperimentKind::Relax,
            Command::Kernel(_) => ExperimentKind::Kernel,
            Command::Corrector(_) => ExperimentKind::Corrector,
            Command::Weights(_) => ExperimentKind::Weights,
            Command::Necessity(_) => ExperimentKind::Necessity,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Relax(a)
            | Command::Kernel(a)
            | Command::Corrector(a)
            | Command::Weights(a)
            | Command::Necessity(a) => a,
        }
    }
}

fn fail(code: u8, stage: &str, message: String) -> ExitCode {
    let payload = serde_json::json!({
        "error": { "stage": stage, "message": message }
    });
    eprintln!("{payload}");
    ExitCode::from(code)
}

fn load_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| vec![format!("cannot read {}: {e}", args.config.display())])?;
    let mut cfg = match parse_config(&text) {
        Ok(cfg) => cfg,
        Err(Error::InvalidConfig(list)) => return Err(list),
        Err(other) => return Err(vec![other.to_string()]),
    };
    if cfg.experiment != kind {
        return Err(vec![format!(
            "config declares experiment `{}` but the `{kind}` subcommand was invoked",
            cfg.experiment
        )]);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let kind = cli.command.kind();
    let cfg = match load_config(kind, cli.command.args()) {
        Ok(cfg) => cfg,
        Err(list) => return fail(2, "validation", list.join("; ")),
    };
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    match run_experiment(&cfg) {
        Ok(summary) => {
            println!(
                "wrote {} file(s) to {}",
                summary.files.len(),
                summary.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(3, "runtime", e.to_string()),
    }
}
