//! `rpmeta`: sparse multivariate meta-analysis from the command line.
//!
//! Subcommands: `simulate` (synthetic replicate batches), `fit` (posterior
//! estimation of one dataset), `univariate` (per-variate REML comparator),
//! and `evaluate` (paired comparison across a replicate directory).
//!
//! Exit codes: 0 success (for `fit`: converged), 2 completed but
//! non-converged, 1 any error.

mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "rpmeta", version, about = "Sparse multivariate meta-analysis via random projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a batch of synthetic meta-analysis replicates.
    Simulate(SimulateArgs),
    /// Fit the low-dimensional multivariate model to a dataset CSV.
    Fit(FitArgs),
    /// Per-variate REML random-effects analysis of a dataset CSV.
    Univariate(UnivariateArgs),
    /// Pair multivariate and univariate results across replicates.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory (one subdirectory per replicate).
    #[arg(long)]
    out: PathBuf,
    /// Key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replicates.
    #[arg(long)]
    n_meta: Option<usize>,
    #[arg(long)]
    studies_min: Option<usize>,
    #[arg(long)]
    studies_max: Option<usize>,
    #[arg(long)]
    units_min: Option<u64>,
    #[arg(long)]
    units_max: Option<u64>,
    #[arg(long)]
    p_min: Option<usize>,
    #[arg(long)]
    p_max: Option<usize>,
    /// Probability a study reports a variate.
    #[arg(long)]
    density: Option<f64>,
    /// Heterogeneity offset standard deviation.
    #[arg(long)]
    het_sd: Option<f64>,
}

/// Sampler and interval options shared by `fit` and `evaluate`.
#[derive(Args, Clone)]
struct SamplerFlags {
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    max_tree_depth: Option<usize>,
    /// Convergence threshold on split R-hat of the mean coordinates.
    #[arg(long)]
    rhat_threshold: Option<f64>,
    /// Equal-tailed credible-interval level.
    #[arg(long)]
    level: Option<f64>,
    /// Cap for the automatically selected projection dimension.
    #[arg(long)]
    q_max: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV (study_id,variate_id,estimate,std_err).
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Projection dimension; selected automatically when omitted.
    #[arg(long)]
    q: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct UnivariateArgs {
    /// Dataset CSV (study_id,variate_id,estimate,std_err).
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of replicate_* subdirectories produced by `simulate`.
    replicates: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fit and analyze replicates whose outputs are missing, instead of
    /// listing them and proceeding on the rest.
    #[arg(long)]
    fit_missing: bool,
    #[command(flatten)]
    sampler: SamplerFlags,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap would exit 2 for usage errors; 2 means non-converged here
            let _ = err.print();
            std::process::exit(1);
        }
    };
    let outcome = match cli.command {
        Command::Simulate(args) => commands::simulate::run(args),
        Command::Fit(args) => commands::fit::run(args),
        Command::Univariate(args) => commands::univariate::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
