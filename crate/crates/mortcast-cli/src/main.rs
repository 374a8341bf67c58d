//! `mortcast`: fit Bayesian mortality models by MCMC, forecast death
//! probabilities with credible intervals, and evaluate forecasts by
//! rolling-origin backtests.
//!
//! Concurrency (backtest origins) is controlled solely by the
//! `RAYON_NUM_THREADS` environment variable; results do not depend on it.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::Overrides;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mortcast",
    version,
    about = "Bayesian mortality-rate fitting, forecasting, and backtesting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Convert an HMD deaths/exposures file pair into a mortality store
    Import {
        #[arg(long)]
        deaths: PathBuf,
        #[arg(long)]
        exposures: PathBuf,
        #[arg(long, help = "female, male, or total")]
        sex: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model by MCMC; writes draws.csv and report.json
    Fit {
        #[arg(long, help = "TOML configuration file; flags override it")]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Posterior-predictive forecasts from a fitted draw store
    Forecast {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long, help = "forecast horizon in years")]
        k: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Rolling-origin evaluation; writes score tables and forecast rows
    Backtest {
        #[arg(long, help = "TOML configuration file; flags override it")]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, help = "score an existing forecast-row CSV instead of fitting")]
        external: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4, help = "half-width for the oracle model")]
        oracle_epsilon: f64,
    },
    /// Effective-sample-size table recomputed from a draw store
    Diag {
        #[arg(long)]
        draws: PathBuf,
        #[arg(long, help = "write CSV here instead of stdout")]
        out: Option<PathBuf>,
    },
    /// Configuration inspection
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
pub enum ConfigAction {
    /// Print every configuration key with its default value
    Show,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
