//! Rolling-origin forecast evaluation: fixed training windows slide over
//! the years, each fit forecasts ahead, and held-out empirical rates score
//! the intervals by coverage, width, interval score, and RMSE. External
//! forecast files are scored through the identical pipeline.

use crate::forecast::{ForecastDraws, ForecastError};
use crate::gmrf::{self, ChainConfig, GmrfError};
use crate::hpdyn::{self, HpChainConfig, HpDynError};
use crate::lifetable::{LifetableError, MortalityGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid plan: {0}")]
    BadPlan(String),
    #[error("interval bounds inverted: lo {lo} > hi {hi}")]
    InvertedInterval { lo: f64, hi: f64 },
    #[error("interval level {0} must lie in (0, 1)")]
    BadLevel(f64),
    #[error("format error on line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("forecast rows incomplete for the plan:\n{}", report.join("\n"))]
    Incomplete { report: Vec<String> },
    #[error(transparent)]
    Data(#[from] LifetableError),
    #[error(transparent)]
    Gmrf(#[from] GmrfError),
    #[error(transparent)]
    HpDyn(#[from] HpDynError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

/// Rolling-origin evaluation plan. For horizon k the origins run from
/// `origin_first` to `last_observed_year - k`, each fitting on the
/// `window`-year span ending at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestPlan {
    pub window: usize,
    pub horizons: Vec<usize>,
    pub origin_first: i32,
    pub last_observed_year: i32,
    pub age_lo: u32,
    pub age_hi: u32,
    pub level: f64,
}

impl Default for BacktestPlan {
    fn default() -> Self {
        BacktestPlan {
            window: 10,
            horizons: vec![5, 15],
            origin_first: 1989,
            last_observed_year: 2013,
            age_lo: 0,
            age_hi: 89,
            level: 0.95,
        }
    }
}

impl BacktestPlan {
    /// Origins evaluated at the given horizon.
    pub fn origins(&self, horizon: usize) -> Vec<i32> {
        let last = self.last_observed_year - horizon as i32;
        (self.origin_first..=last).collect()
    }

    /// Every origin that appears at any horizon.
    pub fn all_origins(&self) -> Vec<i32> {
        let k_min = self.horizons.iter().copied().min().unwrap_or(1);
        self.origins(k_min)
    }

    /// Largest horizon the data still covers from this origin.
    pub fn max_horizon_at(&self, origin: i32) -> usize {
        self.horizons
            .iter()
            .copied()
            .filter(|&k| origin + (k as i32) <= self.last_observed_year)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self, grid: &MortalityGrid) -> Result<(), BacktestError> {
        if self.window == 0 {
            return Err(BacktestError::BadPlan("window must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(BacktestError::BadPlan(
                "horizons must be nonempty and positive".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(BacktestError::BadLevel(self.level));
        }
        if self.age_lo < grid.age_lo() || self.age_hi > grid.age_hi() || self.age_lo > self.age_hi
        {
            return Err(BacktestError::BadPlan(format!(
                "ages {}..={} outside data {}..={}",
                self.age_lo,
                self.age_hi,
                grid.age_lo(),
                grid.age_hi()
            )));
        }
        for &k in &self.horizons {
            let origins = self.origins(k);
            if origins.is_empty() {
                return Err(BacktestError::BadPlan(format!(
                    "no origins left at horizon {k}"
                )));
            }
            for &t in &origins {
                let train_lo = t - self.window as i32 + 1;
                if train_lo < grid.year_first() || t + k as i32 > grid.year_last() {
                    return Err(BacktestError::BadPlan(format!(
                        "origin {t} horizon {k} needs years {train_lo}..={}, data {}..={}",
                        t + k as i32,
                        grid.year_first(),
                        grid.year_last()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Interval score at the given central-interval level: width plus scaled
/// penalties for exceedance on either side. The closed interval counts as
/// covering, so a boundary observation incurs width only.
pub fn interval_score(lo: f64, hi: f64, obs: f64, level: f64) -> Result<f64, BacktestError> {
    if lo > hi {
        return Err(BacktestError::InvertedInterval { lo, hi });
    }
    let alpha = 1.0 - level;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BacktestError::BadLevel(level));
    }
    let mut score = hi - lo;
    if obs < lo {
        score += 2.0 / alpha * (lo - obs);
    } else if obs > hi {
        score += 2.0 / alpha * (obs - hi);
    }
    Ok(score)
}

/// Closed-interval empirical coverage and mean width over paired cases.
pub fn coverage_and_width(intervals: &[(f64, f64)], obs: &[f64]) -> (f64, f64) {
    assert_eq!(intervals.len(), obs.len());
    if intervals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = intervals.len() as f64;
    let covered = intervals
        .iter()
        .zip(obs)
        .filter(|((lo, hi), o)| **o >= *lo && **o <= *hi)
        .count() as f64;
    let width = intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / n;
    (covered / n, width)
}

/// Root mean squared error of point forecasts.
pub fn rmse(pred: &[f64], obs: &[f64]) -> f64 {
    assert_eq!(pred.len(), obs.len());
    if pred.is_empty() {
        return f64::NAN;
    }
    let n = pred.len() as f64;
    (pred.iter().zip(obs).map(|(p, o)| (p - o) * (p - o)).sum::<f64>() / n).sqrt()
}

/// One forecast: a point and an interval for an (origin, horizon, age)
/// cell, tagged by model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub model: String,
    pub origin: i32,
    pub horizon: usize,
    pub age: u32,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// A fit that could not be scored; its origin is excluded from every
/// aggregate but stays on the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedFit {
    pub model: String,
    pub origin: i32,
    pub reason: String,
}

/// Per-age scores for one model and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub horizon: usize,
    pub age: u32,
    pub rounds: usize,
    pub coverage: f64,
    pub mean_width: f64,
    pub mean_score: f64,
    pub rmse: f64,
}

/// Over-age averages for one model and horizon (arithmetic means of the
/// per-age rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreAverage {
    pub model: String,
    pub horizon: usize,
    pub coverage: f64,
    pub mean_width: f64,
    pub mean_score: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub averages: Vec<ScoreAverage>,
    pub excluded: Vec<ExcludedFit>,
}

impl ScoreTable {
    /// CSV with per-age rows followed by `avg` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,horizon,age,rounds,coverage,mean_width,mean_score,rmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model, r.horizon, r.age, r.rounds, r.coverage, r.mean_width, r.mean_score, r.rmse
            ));
        }
        for a in &self.averages {
            out.push_str(&format!(
                "{},{},avg,,{},{},{},{}\n",
                a.model, a.horizon, a.coverage, a.mean_width, a.mean_score, a.rmse
            ));
        }
        out
    }
}

/// Serialize forecast rows in the external-forecast schema.
pub fn forecast_rows_to_csv(rows: &[ForecastRow]) -> String {
    let mut out = String::from("model,origin,horizon,age,mean,lo,hi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.model, r.origin, r.horizon, r.age, r.mean, r.lo, r.hi
        ));
    }
    out
}

/// Parse the external-forecast schema `model,origin,horizon,age,mean,lo,hi`.
pub fn ingest_external_forecasts(text: &str) -> Result<Vec<ForecastRow>, BacktestError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "model,origin,horizon,age,mean,lo,hi"
        {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(BacktestError::Csv {
                line: line_no,
                reason: format!("expected 7 fields, found {}", parts.len()),
            });
        }
        let bad = |what: &str| BacktestError::Csv {
            line: line_no,
            reason: format!("bad {what} field"),
        };
        let row = ForecastRow {
            model: parts[0].to_string(),
            origin: parts[1].parse().map_err(|_| bad("origin"))?,
            horizon: parts[2].parse().map_err(|_| bad("horizon"))?,
            age: parts[3].parse().map_err(|_| bad("age"))?,
            mean: parts[4].parse().map_err(|_| bad("mean"))?,
            lo: parts[5].parse().map_err(|_| bad("lo"))?,
            hi: parts[6].parse().map_err(|_| bad("hi"))?,
        };
        if row.model.is_empty() {
            return Err(bad("model"));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn observed_rate(grid: &MortalityGrid, age: u32, year: i32) -> f64 {
    let z = (age - grid.age_lo()) as usize;
    let t = (year - grid.year_first()) as usize;
    grid.deaths()[(z, t)] / grid.exposures()[(z, t)]
}

/// Score forecast rows against held-out empirical rates d/n. Every
/// (model, origin, horizon, age) cell the plan demands must be present
/// unless its origin is listed as excluded for that model; anything else
/// missing is reported row by row.
pub fn score_rows(
    grid: &MortalityGrid,
    plan: &BacktestPlan,
    rows: &[ForecastRow],
    excluded: &[ExcludedFit],
) -> Result<ScoreTable, BacktestError> {
    plan.validate(grid)?;
    let mut index: BTreeMap<(&str, i32, usize, u32), &ForecastRow> = BTreeMap::new();
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        index.insert((r.model.as_str(), r.origin, r.horizon, r.age), r);
    }
    for e in excluded {
        if !models.contains(&e.model.as_str()) {
            models.push(&e.model);
        }
    }

    let mut missing = Vec::new();
    let mut table = ScoreTable::default();
    table.excluded = excluded.to_vec();

    for model in &models {
        let skip: Vec<i32> = excluded
            .iter()
            .filter(|e| e.model == *model)
            .map(|e| e.origin)
            .collect();
        for &k in &plan.horizons {
            let origins: Vec<i32> = plan
                .origins(k)
                .into_iter()
                .filter(|t| !skip.contains(t))
                .collect();
            if origins.is_empty() {
                continue;
            }
            let mut age_rows = Vec::new();
            for age in plan.age_lo..=plan.age_hi {
                let mut intervals = Vec::with_capacity(origins.len());
                let mut means = Vec::with_capacity(origins.len());
                let mut obs = Vec::with_capacity(origins.len());
                let mut scores = Vec::with_capacity(origins.len());
                for &t in &origins {
                    let Some(row) = index.get(&(*model, t, k, age)) else {
                        missing.push(format!(
                            "model={model} origin={t} horizon={k} age={age}"
                        ));
                        continue;
                    };
                    let o = observed_rate(grid, age, t + k as i32);
                    scores.push(interval_score(row.lo, row.hi, o, plan.level)?);
                    intervals.push((row.lo, row.hi));
                    means.push(row.mean);
                    obs.push(o);
                }
                if intervals.is_empty() {
                    continue;
                }
                let (coverage, mean_width) = coverage_and_width(&intervals, &obs);
                let mean_score = scores.iter().sum::<f64>() / scores.len() as f64;
                age_rows.push(ScoreRow {
                    model: model.to_string(),
                    horizon: k,
                    age,
                    rounds: intervals.len(),
                    coverage,
                    mean_width,
                    mean_score,
                    rmse: rmse(&means, &obs),
                });
            }
            if !age_rows.is_empty() {
                let n = age_rows.len() as f64;
                table.averages.push(ScoreAverage {
                    model: model.to_string(),
                    horizon: k,
                    coverage: age_rows.iter().map(|r| r.coverage).sum::<f64>() / n,
                    mean_width: age_rows.iter().map(|r| r.mean_width).sum::<f64>() / n,
                    mean_score: age_rows.iter().map(|r| r.mean_score).sum::<f64>() / n,
                    rmse: age_rows.iter().map(|r| r.rmse).sum::<f64>() / n,
                });
                table.rows.extend(age_rows);
            }
        }
    }
    if !missing.is_empty() {
        return Err(BacktestError::Incomplete { report: missing });
    }
    Ok(table)
}

/// Model to refit at every origin.
#[derive(Debug, Clone, PartialEq)]
pub enum BacktestModel {
    Gmrf { config: ChainConfig },
    Hp { config: HpChainConfig },
    /// Scoring sanity instrument: the truth with a symmetric interval.
    Oracle { epsilon: f64 },
}

impl BacktestModel {
    pub fn name(&self) -> &'static str {
        match self {
            BacktestModel::Gmrf { .. } => "gmrf",
            BacktestModel::Hp { .. } => "hp",
            BacktestModel::Oracle { .. } => "oracle",
        }
    }
}

/// Derive a per-origin seed so origins are independent of scheduling.
fn origin_seed(base: u64, origin: i32) -> u64 {
    base.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(origin as u64)
}

fn forecast_at_origin(
    grid: &MortalityGrid,
    plan: &BacktestPlan,
    model: &BacktestModel,
    origin: i32,
) -> Result<Vec<ForecastRow>, BacktestError> {
    let k_max = plan.max_horizon_at(origin);
    let train = grid.window(
        (plan.age_lo, plan.age_hi),
        (origin - plan.window as i32 + 1, origin),
    )?;
    let fs: Option<ForecastDraws> = match model {
        BacktestModel::Gmrf { config } => {
            let cfg = ChainConfig {
                seed: origin_seed(config.seed, origin),
                ..*config
            };
            let draws = gmrf::run_chain_gmrf(&train, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
            Some(gmrf::predict_gmrf(&draws, k_max, &mut rng)?)
        }
        BacktestModel::Hp { config } => {
            let cfg = HpChainConfig {
                seed: origin_seed(config.seed, origin),
                ..*config
            };
            let draws = hpdyn::run_chain_hp(&train, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
            Some(hpdyn::predict_forward(&draws, k_max, &mut rng)?)
        }
        BacktestModel::Oracle { .. } => None,
    };

    let mut rows = Vec::new();
    for &k in &plan.horizons {
        if origin + k as i32 > plan.last_observed_year {
            continue;
        }
        for age in plan.age_lo..=plan.age_hi {
            let (mean, lo, hi) = match (&fs, model) {
                (Some(fs), _) => {
                    let mean = fs.mean_at(age, k)?;
                    let (lo, hi) = fs.predictive_interval(age, k, plan.level)?;
                    (mean, lo, hi)
                }
                (None, BacktestModel::Oracle { epsilon }) => {
                    let o = observed_rate(grid, age, origin + k as i32);
                    (o, o - epsilon, o + epsilon)
                }
                _ => unreachable!("internal models always produce draws"),
            };
            rows.push(ForecastRow {
                model: model.name().to_string(),
                origin,
                horizon: k,
                age,
                mean,
                lo,
                hi,
            });
        }
    }
    Ok(rows)
}

/// A completed backtest: the score table plus every forecast row that fed
/// it (reusable as an external-forecast file).
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRun {
    pub table: ScoreTable,
    pub rows: Vec<ForecastRow>,
}

/// Fit the model at every origin of the plan (origins run concurrently),
/// forecast, and score. A failed fit excludes its origin with a flag and
/// the rest proceed.
pub fn run_backtest(
    grid: &MortalityGrid,
    plan: &BacktestPlan,
    model: &BacktestModel,
) -> Result<BacktestRun, BacktestError> {
    plan.validate(grid)?;
    let origins = plan.all_origins();
    let results: Vec<(i32, Result<Vec<ForecastRow>, BacktestError>)> = origins
        .par_iter()
        .map(|&t| (t, forecast_at_origin(grid, plan, model, t)))
        .collect();

    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (t, res) in results {
        match res {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => excluded.push(ExcludedFit {
                model: model.name().to_string(),
                origin: t,
                reason: e.to_string(),
            }),
        }
    }
    let table = score_rows(grid, plan, &rows, &excluded)?;
    Ok(BacktestRun { table, rows })
}
