use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use duetfair::objectives::Variant;

#[derive(Debug, Parser)]
#[command(name = "duetfair", version, about = "Subgroup-robust segmentation experiments on synthetic cohorts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training cohort and its held-out twin.
    GenData(Common),
    /// Train a model and write params, the epoch log and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Train on this cohort instead of generating one from the config.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Evaluate trained params and write metrics JSON plus a per-sample CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Params file; defaults to params.json in the output directory.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Cohort to evaluate; defaults to the held-out cohort of the config.
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Method name recorded in the report; defaults to the run name.
        #[arg(long)]
        method: Option<String>,
    },
    /// Dual/primal equivalence sweep and gradient finite-difference check.
    Oracle(Common),
    /// Compare one or more metrics files: CSV, summary JSON and per-group SVGs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Metrics JSON files written by `eval`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON). Unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for data, initialization and resampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config and DUETFAIR_OUT.
    #[arg(long, env = "DUETFAIR_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// erm, fairdro, groupdro or fairdro-penalty.
    #[arg(long, value_parser = parse_variant)]
    pub objective: Option<Variant>,
    /// KL radius applied to every group.
    #[arg(long, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    /// Weight of the robust term in fairdro-penalty.
    #[arg(long = "lambda-rob", allow_negative_numbers = true)]
    pub lambda_rob: Option<f64>,
    /// Disable the subgroup-routed expert layer.
    #[arg(long = "no-dmoe")]
    pub no_dmoe: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: duetfair::Error| e.to_string())
}
