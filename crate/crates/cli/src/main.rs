//! `umid`: train the testbed, build baselines, audit, verify the theory
//! simulations and evaluate defenses, with a manifest for every run.

mod commands;
mod error;
mod manifest;
mod params;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "umid", version, about = "Text-only membership inference auditing for dual encoders")]
pub struct Cli {
    /// Worker threads for inversion runs, batch queries and simulation trials.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Root seed; overrides the config file and UMID_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InversionFlags {
    /// Randomized runs per query.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Ascent steps per run.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Ascent step size.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset and train the target encoder pair.
    TrainTestbed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build a gibberish baseline by inverting semantic-null strings.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// plain or covert
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        inversion: InversionFlags,
    },
    /// Audit query identities against a baseline.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// JSONL with `text` and optional `is_member` per line.
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        inversion: InversionFlags,
        /// Votes needed for a member decision.
        #[arg(long)]
        threshold: Option<usize>,
        /// Add the coherence feature and the cluster vote.
        #[arg(long)]
        enhanced: bool,
        /// JSONL `{text, samples}` of local modality samples.
        #[arg(long)]
        local_samples: Option<PathBuf>,
        /// Repeat the audit with this many seeds.
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Monte Carlo check of finite-sample separation in the prototype model.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// RMS deviation of the statistics over a grid of run counts.
    VerifyConcentration {
        #[command(flatten)]
        common: Common,
        /// Comma-separated run counts.
        #[arg(long)]
        n_grid: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Audit accuracy with and without a defense.
    EvalDefense {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// dp or filter
        #[arg(long)]
        defense: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        sensitivity: Option<f64>,
        /// Noise scale used directly instead of the (epsilon, delta) formula.
        #[arg(long)]
        sigma: Option<f64>,
        /// Build the defended baseline from covert gibberish.
        #[arg(long)]
        covert: bool,
        #[command(flatten)]
        inversion: InversionFlags,
    },
    /// Recompute metrics from a decisions file and ground truth.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        decisions: PathBuf,
        /// JSONL with `text` and `is_member`.
        #[arg(long)]
        truth: PathBuf,
        /// Re-threshold the recorded votes.
        #[arg(long)]
        threshold: Option<usize>,
    },
    /// Write semantic-null strings, one per line.
    GenGibberish {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Re-execute the command recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let env_seed = std::env::var(params::SEED_ENV).ok();
    if let Err(e) = run(argv, env_seed) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}

pub fn run(argv: Vec<String>, env_seed: Option<String>) -> CliResult<()> {
    let cli = match Cli::try_parse_from(std::iter::once("umid".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { error::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(error::CliError::config("--jobs must be at least 1"));
        }
        // A pool may already exist when a manifest is re-run in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    commands::dispatch(cli.command, argv, env_seed)
}
