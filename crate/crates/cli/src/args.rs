use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "ivtool", version, about = "Instrumental-variables estimation, weak-instrument-robust tests and confidence sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a k-class estimator.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// ols, tsls, liml, fuller[:a] or kappa:<value>.
        #[arg(long, default_value = "liml")]
        estimator: String,
    },
    /// Test a hypothesised value of the coefficients of interest.
    Test {
        #[command(flatten)]
        data: DataArgs,
        /// Comma list of ar, lr, clr, lm, lm-local, wald[:estimator], or `all`.
        #[arg(long, default_value = "all")]
        name: String,
        /// Hypothesised coefficients of X then D (comma list); zeros by default.
        #[arg(long, allow_hyphen_values = true)]
        beta: Option<String>,
    },
    /// Confidence sets by test inversion.
    Confset {
        #[command(flatten)]
        data: DataArgs,
        /// Comma list of ar, lr, clr, lm, lm-local, wald[:estimator], or `all`.
        #[arg(long, default_value = "all")]
        name: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Also write `(beta, statistic, p-value)` rows for each test to this CSV file.
        #[arg(long)]
        export_grid: Option<PathBuf>,
        /// Grid for --export-grid as `lo:hi:points`.
        #[arg(long, default_value = "-1:1:201", allow_hyphen_values = true)]
        grid: String,
    },
    /// Misspecification and identification diagnostics.
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        /// Level for the boundedness and emptiness predicates.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Also run the residual-prediction test (uses --seed).
        #[arg(long)]
        residual_prediction: bool,
    },
}

impl Command {
    pub fn data(&self) -> &DataArgs {
        match self {
            Command::Fit { data, .. }
            | Command::Test { data, .. }
            | Command::Confset { data, .. }
            | Command::Diagnose { data, .. } => data,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::Test { .. } => "test",
            Command::Confset { .. } => "confset",
            Command::Diagnose { .. } => "diagnose",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// Fixed-width Card extract; roles default to the standard Card model.
    Card,
    /// CSV with a header row; roles must be given.
    Csv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Card)]
    pub format: Format,
    /// Outcome column.
    #[arg(long)]
    pub y: Option<String>,
    /// Endogenous regressors of interest.
    #[arg(long)]
    pub x: Option<String>,
    /// Endogenous nuisance regressors.
    #[arg(long)]
    pub w: Option<String>,
    /// Included exogenous covariates.
    #[arg(long)]
    pub c: Option<String>,
    /// Included exogenous regressors of interest.
    #[arg(long)]
    pub d: Option<String>,
    /// Instruments.
    #[arg(long)]
    pub z: Option<String>,
    #[arg(long)]
    pub no_intercept: bool,
    /// Keep C as explicit regressors instead of partialling it out; the fit
    /// then reports its coefficients too.
    #[arg(long)]
    pub explicit_c: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}

/// Splits a comma list, dropping empty entries.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect()
}
