//! Posterior-predictive post-processing: quantile intervals, survival
//! probabilities, and life expectancies computed draw-wise from forecast
//! sample sets, plus the draw and summary CSV formats.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("age {age} with span {span} exceeds the forecast age range")]
    AgeRange { age: u32, span: usize },
    #[error("horizon {0} outside 1..={1}")]
    Horizon(usize, usize),
    #[error("interval level {0} must lie in [0, 1)")]
    BadLevel(f64),
    #[error("forecast set invalid: {0}")]
    Invalid(String),
    #[error("format error on line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Joint posterior-predictive samples of death probabilities over an
/// age range and forecast horizons 1..=k.
///
/// `samples[m]` is draw m over the whole block, indexed `z*horizons + (h-1)`
/// for age offset z and horizon h; cross-age dependence within a draw is
/// preserved by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDraws {
    pub model: String,
    pub age_lo: u32,
    pub n_ages: usize,
    pub horizons: usize,
    pub last_observed_year: i32,
    pub samples: Vec<Vec<f64>>,
}

/// Linear-interpolation empirical quantile of an already-sorted slice
/// (the common "type 7" definition: h = (n-1)q).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

impl ForecastDraws {
    /// Check the structural invariants: nonempty, equal block lengths,
    /// every sample inside (0, 1).
    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.samples.is_empty() {
            return Err(ForecastError::Invalid("no draws".into()));
        }
        let want = self.n_ages * self.horizons;
        for (m, s) in self.samples.iter().enumerate() {
            if s.len() != want {
                return Err(ForecastError::Invalid(format!(
                    "draw {m} has {} entries, expected {want}",
                    s.len()
                )));
            }
            for &p in s {
                if !(p > 0.0 && p < 1.0) {
                    return Err(ForecastError::Invalid(format!(
                        "draw {m} contains probability {p} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_draws(&self) -> usize {
        self.samples.len()
    }

    pub fn age_hi(&self) -> u32 {
        self.age_lo + self.n_ages as u32 - 1
    }

    fn offset(&self, age: u32, horizon: usize) -> Result<usize, ForecastError> {
        if age < self.age_lo || age > self.age_hi() {
            return Err(ForecastError::AgeRange { age, span: 1 });
        }
        if horizon == 0 || horizon > self.horizons {
            return Err(ForecastError::Horizon(horizon, self.horizons));
        }
        let z = (age - self.age_lo) as usize;
        Ok(z * self.horizons + horizon - 1)
    }

    /// All draws of p at one (age, horizon) cell.
    pub fn samples_at(&self, age: u32, horizon: usize) -> Result<Vec<f64>, ForecastError> {
        let idx = self.offset(age, horizon)?;
        Ok(self.samples.iter().map(|s| s[idx]).collect())
    }

    pub fn mean_at(&self, age: u32, horizon: usize) -> Result<f64, ForecastError> {
        let v = self.samples_at(age, horizon)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Equal-tailed predictive interval from empirical quantiles. Level 0
    /// degenerates to the median point.
    pub fn predictive_interval(
        &self,
        age: u32,
        horizon: usize,
        level: f64,
    ) -> Result<(f64, f64), ForecastError> {
        if !(0.0..1.0).contains(&level) {
            return Err(ForecastError::BadLevel(level));
        }
        let mut v = self.samples_at(age, horizon)?;
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if level == 0.0 {
            let med = quantile_sorted(&v, 0.5);
            return Ok((med, med));
        }
        let tail = (1.0 - level) / 2.0;
        Ok((quantile_sorted(&v, tail), quantile_sorted(&v, 1.0 - tail)))
    }

    /// Per-draw probability of surviving `s` further years from age `z` in
    /// forecast year T+horizon: the product of (1 - p) over ages z..z+s-1,
    /// paired within each posterior draw.
    pub fn survival_curve(
        &self,
        z: u32,
        s: usize,
        horizon: usize,
    ) -> Result<Vec<f64>, ForecastError> {
        if s == 0 {
            return Err(ForecastError::Invalid("survival span s must be at least 1".into()));
        }
        if z < self.age_lo || z as u64 + s as u64 - 1 > self.age_hi() as u64 {
            return Err(ForecastError::AgeRange { age: z, span: s });
        }
        let idx: Vec<usize> = (0..s)
            .map(|i| self.offset(z + i as u32, horizon))
            .collect::<Result<_, _>>()?;
        Ok(self
            .samples
            .iter()
            .map(|draw| idx.iter().map(|&i| 1.0 - draw[i]).product())
            .collect())
    }

    /// Per-draw curtate life expectancy at age `z` in forecast year
    /// T+horizon: the sum of the survival probabilities over spans
    /// 1..=(age_hi - z). The table closes at the top age; survival beyond
    /// it contributes zero.
    pub fn life_expectancy(&self, z: u32, horizon: usize) -> Result<Vec<f64>, ForecastError> {
        if z < self.age_lo || z > self.age_hi() {
            return Err(ForecastError::AgeRange { age: z, span: 0 });
        }
        let max_s = (self.age_hi() - z) as usize;
        let mut out = vec![0.0; self.n_draws()];
        if max_s == 0 {
            return Ok(out);
        }
        // running product per draw avoids re-multiplying for every span
        let mut running = vec![1.0; self.n_draws()];
        for s in 1..=max_s {
            let idx = self.offset(z + s as u32 - 1, horizon)?;
            for (m, draw) in self.samples.iter().enumerate() {
                running[m] *= 1.0 - draw[idx];
                out[m] += running[m];
            }
        }
        Ok(out)
    }

    /// Long-format draw export: `age,horizon,draw,p` with metadata comment
    /// lines. Shortest round-trip float formatting.
    pub fn to_draws_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# model={}\n", self.model));
        out.push_str(&format!("# last_observed_year={}\n", self.last_observed_year));
        out.push_str("age,horizon,draw,p\n");
        for (m, draw) in self.samples.iter().enumerate() {
            for z in 0..self.n_ages {
                for h in 1..=self.horizons {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        self.age_lo + z as u32,
                        h,
                        m,
                        draw[z * self.horizons + h - 1]
                    ));
                }
            }
        }
        out
    }

    /// Parse the format written by [`to_draws_csv`].
    pub fn from_draws_csv(text: &str) -> Result<Self, ForecastError> {
        let mut model = String::from("unknown");
        let mut last_year: i32 = 0;
        let mut rows: Vec<(u32, usize, usize, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("model=") {
                    model = v.to_string();
                } else if let Some(v) = rest.strip_prefix("last_observed_year=") {
                    last_year = v.parse().map_err(|_| ForecastError::Csv {
                        line: line_no,
                        reason: "bad last_observed_year".into(),
                    })?;
                }
                continue;
            }
            if line == "age,horizon,draw,p" {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(ForecastError::Csv {
                    line: line_no,
                    reason: format!("expected 4 fields, found {}", parts.len()),
                });
            }
            let bad = |what: &str| ForecastError::Csv {
                line: line_no,
                reason: format!("bad {what} field"),
            };
            rows.push((
                parts[0].parse().map_err(|_| bad("age"))?,
                parts[1].parse().map_err(|_| bad("horizon"))?,
                parts[2].parse().map_err(|_| bad("draw"))?,
                parts[3].parse().map_err(|_| bad("p"))?,
            ));
        }
        if rows.is_empty() {
            return Err(ForecastError::Csv {
                line: 0,
                reason: "no data rows".into(),
            });
        }
        let age_lo = rows.iter().map(|r| r.0).min().unwrap();
        let age_hi = rows.iter().map(|r| r.0).max().unwrap();
        let horizons = rows.iter().map(|r| r.1).max().unwrap();
        let n_draws = rows.iter().map(|r| r.2).max().unwrap() + 1;
        let n_ages = (age_hi - age_lo + 1) as usize;
        let want = rows.len();
        if want != n_draws * n_ages * horizons {
            return Err(ForecastError::Csv {
                line: 0,
                reason: format!(
                    "expected {} rows for {} draws x {} ages x {} horizons, found {want}",
                    n_draws * n_ages * horizons,
                    n_draws,
                    n_ages,
                    horizons
                ),
            });
        }
        let mut samples = vec![vec![f64::NAN; n_ages * horizons]; n_draws];
        for (age, h, m, p) in rows {
            if h == 0 {
                return Err(ForecastError::Csv {
                    line: 0,
                    reason: "horizon index 0".into(),
                });
            }
            let z = (age - age_lo) as usize;
            samples[m][z * horizons + h - 1] = p;
        }
        let fs = ForecastDraws {
            model,
            age_lo,
            n_ages,
            horizons,
            last_observed_year: last_year,
            samples,
        };
        if fs.samples.iter().flatten().any(|p| p.is_nan()) {
            return Err(ForecastError::Csv {
                line: 0,
                reason: "incomplete draw block".into(),
            });
        }
        Ok(fs)
    }

    /// Summary export: `age,horizon,mean,lo95,hi95` with equal-tailed 95%
    /// intervals.
    pub fn to_summary_csv(&self) -> Result<String, ForecastError> {
        let mut out = String::from("age,horizon,mean,lo95,hi95\n");
        for z in 0..self.n_ages {
            let age = self.age_lo + z as u32;
            for h in 1..=self.horizons {
                let mean = self.mean_at(age, h)?;
                let (lo, hi) = self.predictive_interval(age, h, 0.95)?;
                out.push_str(&format!("{age},{h},{mean},{lo},{hi}\n"));
            }
        }
        Ok(out)
    }
}
