//! Declarative run configuration: one TOML file covers every command, and
//! command-line flags override individual fields (flags win).

use crate::commands::CliError;
use clap::Args;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model family: `gmrf` or `hp` (`oracle` is allowed for backtests).
    pub model: String,
    /// Mortality store CSV produced by `import`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub window: WindowConfig,
    pub mcmc: McmcConfig,
    pub forecast: ForecastConfig,
    pub backtest: BacktestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "gmrf".into(),
            data: None,
            out_dir: PathBuf::from("out"),
            window: WindowConfig::default(),
            mcmc: McmcConfig::default(),
            forecast: ForecastConfig::default(),
            backtest: BacktestConfig::default(),
        }
    }
}

/// Age/year sub-window to fit on; unset fields mean the full data extent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_lo: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_hi: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub year_first: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub year_last: Option<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Acceptance target for the per-year curve proposals (hp only).
    pub accept_target: f64,
    /// Metropolis-correct hyperparameter updates for the truncation-box
    /// normalizers (hp only; slower).
    pub truncation_correction: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            iterations: 60_000,
            burnin: 20_000,
            thin: 10,
            seed: 0,
            accept_target: 0.25,
            truncation_correction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub horizons: Vec<usize>,
    pub level: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            horizons: vec![5, 15],
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestConfig {
    /// Training window length in years.
    pub window: usize,
    pub origin_first: i32,
    pub last_observed_year: i32,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            window: 10,
            origin_first: 1989,
            last_observed_year: 2013,
        }
    }
}

/// Flag-level overrides shared by `fit` and `backtest`; every field maps
/// onto one configuration key and, when given, replaces it.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, help = "model family: gmrf or hp (backtest also: oracle)")]
    pub model: Option<String>,
    #[arg(long, help = "mortality store CSV from `import`")]
    pub data: Option<PathBuf>,
    #[arg(long, help = "directory for output files")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub age_lo: Option<u32>,
    #[arg(long)]
    pub age_hi: Option<u32>,
    #[arg(long)]
    pub year_first: Option<i32>,
    #[arg(long)]
    pub year_last: Option<i32>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub accept_target: Option<f64>,
    #[arg(long)]
    pub truncation_correction: Option<bool>,
    #[arg(long, help = "comma-separated forecast horizons, e.g. 5,15")]
    pub horizons: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long, help = "backtest training window length in years")]
    pub train_window: Option<usize>,
    #[arg(long)]
    pub origin_first: Option<i32>,
    #[arg(long)]
    pub last_observed_year: Option<i32>,
}

impl RunConfig {
    /// Read a TOML file, or start from defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(v) = &o.model {
            self.model = v.clone();
        }
        if let Some(v) = &o.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if o.age_lo.is_some() {
            self.window.age_lo = o.age_lo;
        }
        if o.age_hi.is_some() {
            self.window.age_hi = o.age_hi;
        }
        if o.year_first.is_some() {
            self.window.year_first = o.year_first;
        }
        if o.year_last.is_some() {
            self.window.year_last = o.year_last;
        }
        if let Some(v) = o.iterations {
            self.mcmc.iterations = v;
        }
        if let Some(v) = o.burnin {
            self.mcmc.burnin = v;
        }
        if let Some(v) = o.thin {
            self.mcmc.thin = v;
        }
        if let Some(v) = o.seed {
            self.mcmc.seed = v;
        }
        if let Some(v) = o.accept_target {
            self.mcmc.accept_target = v;
        }
        if let Some(v) = o.truncation_correction {
            self.mcmc.truncation_correction = v;
        }
        if let Some(v) = &o.horizons {
            let parsed: Result<Vec<usize>, _> =
                v.split(',').map(|s| s.trim().parse::<usize>()).collect();
            self.forecast.horizons = parsed
                .map_err(|_| CliError::Validation(format!("bad horizons list {v:?}")))?;
        }
        if let Some(v) = o.level {
            self.forecast.level = v;
        }
        if let Some(v) = o.train_window {
            self.backtest.window = v;
        }
        if let Some(v) = o.origin_first {
            self.backtest.origin_first = v;
        }
        if let Some(v) = o.last_observed_year {
            self.backtest.last_observed_year = v;
        }
        Ok(())
    }

    /// Full default configuration as a TOML document.
    pub fn show_defaults() -> String {
        let body = toml::to_string_pretty(&RunConfig::default())
            .expect("defaults are plain data");
        format!(
            "# All configuration keys with their default values.\n\
             # `data` is unset by default and must be supplied (file or --data).\n\
             # Unset [window] keys mean the full extent of the data.\n{body}"
        )
    }
}
