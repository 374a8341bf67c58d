//! Command implementations and the error-to-exit-code contract: 2 for
//! validation problems, 3 for data problems, 4 for numerical failures.

use crate::config::{Overrides, RunConfig};
use crate::{Command, ConfigAction};
use mortcast::backtest::{
    forecast_rows_to_csv, ingest_external_forecasts, run_backtest, score_rows, BacktestError,
    BacktestModel, BacktestPlan,
};
use mortcast::draws::{
    ess_table, gmrf_draws_to_store, hp_draws_to_store, parse_draws_store, DrawsError, DrawsFile,
    FitReport,
};
use mortcast::forecast::{quantile_sorted, ForecastDraws, ForecastError};
use mortcast::gmrf::{self, ChainConfig, GmrfError};
use mortcast::hpdyn::{self, HpChainConfig, HpDynError};
use mortcast::lifetable::{
    parse_hmd_table, to_initial_exposure, LifetableError, MortalityGrid, Sex, TableKind,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<LifetableError> for CliError {
    fn from(e: LifetableError) -> Self {
        match e {
            LifetableError::WindowOutOfBounds { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DrawsError> for CliError {
    fn from(e: DrawsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GmrfError> for CliError {
    fn from(e: GmrfError) -> Self {
        match e {
            GmrfError::InvalidConfig(_) | GmrfError::InvalidHyper(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<HpDynError> for CliError {
    fn from(e: HpDynError) -> Self {
        match e {
            HpDynError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::AgeRange { .. }
            | ForecastError::Horizon(..)
            | ForecastError::BadLevel(_) => CliError::Validation(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::BadPlan(_) | BacktestError::BadLevel(_) => {
                CliError::Validation(e.to_string())
            }
            BacktestError::Gmrf(inner) => inner.into(),
            BacktestError::HpDyn(inner) => inner.into(),
            BacktestError::Forecast(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

/// Write via a sibling temp file and rename, so readers never observe a
/// half-written output.
fn write_atomic(path: &Path, content: &str) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Data(format!("cannot write {}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    fs::write(&tmp, content).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Import {
            deaths,
            exposures,
            sex,
            out,
        } => cmd_import(&deaths, &exposures, &sex, &out),
        Command::Fit { config, overrides } => cmd_fit(config.as_deref(), &overrides),
        Command::Forecast {
            draws,
            k,
            level,
            seed,
            out_dir,
        } => cmd_forecast(&draws, k, level, seed, &out_dir),
        Command::Backtest {
            config,
            overrides,
            external,
            oracle_epsilon,
        } => cmd_backtest(config.as_deref(), &overrides, external.as_deref(), oracle_epsilon),
        Command::Diag { draws, out } => cmd_diag(&draws, out.as_deref()),
        Command::Config { action } => match action {
            ConfigAction::Show => {
                print!("{}", RunConfig::show_defaults());
                Ok(())
            }
        },
    }
}

fn cmd_import(deaths: &Path, exposures: &Path, sex: &str, out: &Path) -> Result<(), CliError> {
    let sex: Sex = sex.parse().map_err(CliError::Validation)?;
    let d = parse_hmd_table(&read(deaths)?, TableKind::Deaths, sex)?;
    let n_avg = parse_hmd_table(&read(exposures)?, TableKind::Exposures, sex)?;
    let n = to_initial_exposure(&n_avg, &d)?;
    let grid = MortalityGrid::from_tables(sex, &d, &n)?;
    write_atomic(out, &grid.to_store_csv())?;
    println!(
        "wrote {} ({} ages x {} years, {})",
        out.display(),
        grid.n_ages(),
        grid.n_years(),
        grid.sex()
    );
    Ok(())
}

fn load_windowed_grid(cfg: &RunConfig) -> Result<MortalityGrid, CliError> {
    let Some(data) = &cfg.data else {
        return Err(CliError::Validation(
            "no data store given (set `data` in the config or pass --data)".into(),
        ));
    };
    let grid = MortalityGrid::from_store_csv(&read(data)?)?;
    let w = &cfg.window;
    let ages = (
        w.age_lo.unwrap_or_else(|| grid.age_lo()),
        w.age_hi.unwrap_or_else(|| grid.age_hi()),
    );
    let years = (
        w.year_first.unwrap_or_else(|| grid.year_first()),
        w.year_last.unwrap_or_else(|| grid.year_last()),
    );
    Ok(grid.window(ages, years)?)
}

fn cmd_fit(config: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides)?;
    let grid = load_windowed_grid(&cfg)?;
    let m = &cfg.mcmc;
    let started = Instant::now();
    let (store_text, mut report) = match cfg.model.as_str() {
        "gmrf" => {
            let chain = ChainConfig {
                iterations: m.iterations,
                burnin: m.burnin,
                thin: m.thin,
                seed: m.seed,
            };
            let draws = gmrf::run_chain_gmrf(&grid, &chain)?;
            let report = FitReport {
                model: "gmrf".into(),
                iterations: m.iterations,
                burnin: m.burnin,
                thin: m.thin,
                seed: m.seed,
                draws_retained: draws.draws.len(),
                wall_time_seconds: 0.0,
                diagnostics: draws.diagnostics.clone(),
            };
            (gmrf_draws_to_store(&draws), report)
        }
        "hp" => {
            let chain = HpChainConfig {
                iterations: m.iterations,
                burnin: m.burnin,
                thin: m.thin,
                seed: m.seed,
                accept_target: m.accept_target,
                truncation_correction: m.truncation_correction,
            };
            let draws = hpdyn::run_chain_hp(&grid, &chain)?;
            let report = FitReport {
                model: "hp".into(),
                iterations: m.iterations,
                burnin: m.burnin,
                thin: m.thin,
                seed: m.seed,
                draws_retained: draws.draws.len(),
                wall_time_seconds: 0.0,
                diagnostics: draws.diagnostics.clone(),
            };
            (hp_draws_to_store(&draws), report)
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown model `{other}` (expected gmrf or hp)"
            )))
        }
    };
    report.wall_time_seconds = started.elapsed().as_secs_f64();
    let draws_path = cfg.out_dir.join("draws.csv");
    let report_path = cfg.out_dir.join("report.json");
    write_atomic(&draws_path, &store_text)?;
    write_atomic(&report_path, &report.to_json())?;
    println!(
        "fit {} retained {} draws in {:.1}s; wrote {} and {}",
        report.model,
        report.draws_retained,
        report.wall_time_seconds,
        draws_path.display(),
        report_path.display()
    );
    Ok(())
}

/// Survival curves out of the forecast year `T+k`: per age and span, the
/// posterior mean and equal-tailed interval of the survival probability.
fn survival_csv(fs: &ForecastDraws, k: usize, level: f64) -> Result<String, CliError> {
    let mut out = String::from("age,span,mean,lo,hi\n");
    let tail = (1.0 - level) / 2.0;
    for age in fs.age_lo..=fs.age_hi() {
        let max_s = (fs.age_hi() - age) as usize + 1;
        for s in 1..=max_s {
            let mut draws = fs.survival_curve(age, s, k)?;
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            draws.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are ordered"));
            let lo = quantile_sorted(&draws, tail);
            let hi = quantile_sorted(&draws, 1.0 - tail);
            out.push_str(&format!("{age},{s},{mean},{lo},{hi}\n"));
        }
    }
    Ok(out)
}

fn cmd_forecast(
    draws: &Path,
    k: usize,
    level: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Validation("horizon k must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Validation(format!(
            "interval level {level} must lie in (0, 1)"
        )));
    }
    let file = parse_draws_store(&read(draws)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = match &file {
        DrawsFile::Gmrf(d) => gmrf::predict_gmrf(d, k, &mut rng)?,
        DrawsFile::Hp(d) => hpdyn::predict_forward(d, k, &mut rng)?,
    };
    write_atomic(&out_dir.join("forecast_draws.csv"), &fs.to_draws_csv())?;
    write_atomic(&out_dir.join("forecast_summary.csv"), &fs.to_summary_csv()?)?;
    write_atomic(&out_dir.join("survival.csv"), &survival_csv(&fs, k, level)?)?;
    println!(
        "forecast {} horizons 1..={} for ages {}..={}; wrote 3 files to {}",
        fs.model,
        fs.horizons,
        fs.age_lo,
        fs.age_hi(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_backtest(
    config: Option<&Path>,
    overrides: &Overrides,
    external: Option<&Path>,
    oracle_epsilon: f64,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(overrides)?;
    let grid = load_windowed_grid(&cfg)?;
    let plan = BacktestPlan {
        window: cfg.backtest.window,
        horizons: cfg.forecast.horizons.clone(),
        origin_first: cfg.backtest.origin_first,
        last_observed_year: cfg.backtest.last_observed_year,
        age_lo: grid.age_lo(),
        age_hi: grid.age_hi(),
        level: cfg.forecast.level,
    };
    let scores_csv_path = cfg.out_dir.join("backtest_scores.csv");
    let scores_json_path = cfg.out_dir.join("backtest_scores.json");
    let table = if let Some(path) = external {
        let rows = ingest_external_forecasts(&read(path)?)?;
        score_rows(&grid, &plan, &rows, &[])?
    } else {
        let m = &cfg.mcmc;
        let model = match cfg.model.as_str() {
            "gmrf" => BacktestModel::Gmrf {
                config: ChainConfig {
                    iterations: m.iterations,
                    burnin: m.burnin,
                    thin: m.thin,
                    seed: m.seed,
                },
            },
            "hp" => BacktestModel::Hp {
                config: HpChainConfig {
                    iterations: m.iterations,
                    burnin: m.burnin,
                    thin: m.thin,
                    seed: m.seed,
                    accept_target: m.accept_target,
                    truncation_correction: m.truncation_correction,
                },
            },
            "oracle" => BacktestModel::Oracle {
                epsilon: oracle_epsilon,
            },
            other => {
                return Err(CliError::Validation(format!(
                    "unknown model `{other}` (expected gmrf, hp, or oracle)"
                )))
            }
        };
        let run = run_backtest(&grid, &plan, &model)?;
        write_atomic(
            &cfg.out_dir.join("forecast_rows.csv"),
            &forecast_rows_to_csv(&run.rows),
        )?;
        run.table
    };
    write_atomic(&scores_csv_path, &table.to_csv())?;
    let json = serde_json::to_string_pretty(&table).expect("score table is plain data");
    write_atomic(&scores_json_path, &json)?;
    if !table.excluded.is_empty() {
        eprintln!("warning: {} origin(s) excluded from scoring", table.excluded.len());
        for e in &table.excluded {
            eprintln!("  {} origin {}: {}", e.model, e.origin, e.reason);
        }
    }
    println!(
        "backtest scored {} per-age rows; wrote {} and {}",
        table.rows.len(),
        scores_csv_path.display(),
        scores_json_path.display()
    );
    Ok(())
}

fn cmd_diag(draws: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let file = parse_draws_store(&read(draws)?)?;
    let table = ess_table(&file);
    let mut text = String::from("name,ess\n");
    for (name, v) in &table {
        text.push_str(&format!("{name},{v}\n"));
    }
    match out {
        Some(path) => {
            write_atomic(path, &text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
