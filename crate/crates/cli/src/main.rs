//! Pipeline driver: simulate pseudo-data, transform to the wavelet basis,
//! select model structures, fit per-coefficient chains, and emit posterior
//! inference summaries. Every stage writes a manifest with input/output
//! checksums so stale artifacts are detected and runs are reproducible.

mod commands;
mod config;
mod heatmap;
mod manifest;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "spfmm", version, about = "Semiparametric functional mixed models")]
struct Cli {
    /// Run configuration file.
    #[arg(short, long, default_value = "spfmm.toml")]
    config: PathBuf,
    /// Override the output directory (also SPFMM_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the chain worker count (also SPFMM_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    /// Treat non-converged fits as errors (exit code 4).
    #[arg(long)]
    strict_convergence: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a pseudo-dataset from the configured scenario.
    Simulate,
    /// Ingest and validate the dataset, then transform, filter, and compress.
    Transform,
    /// Run the model-selection heuristic over the configured candidates.
    Select,
    /// Fit the per-coefficient samplers (resumes completed coefficients).
    Fit,
    /// Posterior summaries: surfaces, bands, serial aggregates, derivatives,
    /// degrees of freedom, regional aggregation.
    Infer,
    /// Convergence diagnostics over the fitted chains.
    Diagnose,
    /// All stages in order.
    Pipeline,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(out) = cli.out {
        cfg.run.output_dir = out;
    } else if let Ok(out) = std::env::var("SPFMM_OUT") {
        cfg.run.output_dir = PathBuf::from(out);
    }
    if let Some(w) = cli.workers {
        cfg.chain.workers = w.max(1);
    } else if let Ok(w) = std::env::var("SPFMM_WORKERS") {
        if let Ok(w) = w.parse::<usize>() {
            cfg.chain.workers = w.max(1);
        }
    }
    let opts = commands::Options { strict_convergence: cli.strict_convergence };
    let result = match cli.cmd {
        Cmd::Simulate => commands::simulate::run(&cfg, &opts),
        Cmd::Transform => commands::transform::run(&cfg, &opts),
        Cmd::Select => commands::select::run(&cfg, &opts),
        Cmd::Fit => commands::fit::run(&cfg, &opts),
        Cmd::Infer => commands::infer::run(&cfg, &opts),
        Cmd::Diagnose => commands::diagnose::run(&cfg, &opts),
        Cmd::Pipeline => commands::simulate::run(&cfg, &opts)
            .and_then(|_| commands::transform::run(&cfg, &opts))
            .and_then(|_| commands::select::run(&cfg, &opts))
            .and_then(|_| commands::fit::run(&cfg, &opts))
            .and_then(|_| commands::infer::run(&cfg, &opts))
            .and_then(|_| commands::diagnose::run(&cfg, &opts)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Validation(e)) => {
            eprintln!("validation error: {e:#}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
        Err(commands::Failure::NonConvergence(msg)) => {
            eprintln!("non-convergence: {msg}");
            ExitCode::from(4)
        }
    }
}
