//! Mortality data ingestion: period death and exposure tables, the
//! initial-exposure transformation, and windowed views for model fitting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LifetableError {
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("year {year} lists a different age set than the first year")]
    RaggedYears { year: i32 },
    #[error("years in table are not contiguous near {year}")]
    NonContiguousYears { year: i32 },
    #[error("missing value at age {age}, year {year}")]
    MissingValue { age: u32, year: i32 },
    #[error("invalid cell at age {age}, year {year}: {reason}")]
    InvalidCell { age: u32, year: i32, reason: String },
    #[error("table shapes or alignment do not match")]
    ShapeMismatch,
    #[error("requested window [{lo}, {hi}] exceeds grid range [{have_lo}, {have_hi}]")]
    WindowOutOfBounds {
        lo: i64,
        hi: i64,
        have_lo: i64,
        have_hi: i64,
    },
    #[error("store format error on line {line}: {reason}")]
    Store { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    Total,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sex::Female => write!(f, "female"),
            Sex::Male => write!(f, "male"),
            Sex::Total => write!(f, "total"),
        }
    }
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            "total" | "t" => Ok(Sex::Total),
            other => Err(format!("unknown sex {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Deaths,
    Exposures,
}

/// Rectangular table of raw per-cell values as parsed from a period file.
/// Missing cells (encoded "." in the source) are stored as NaN and rejected
/// later if a model window touches them.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub age_lo: u32,
    pub year_first: i32,
    /// rows = ages (ascending), cols = years (ascending)
    pub values: DMatrix<f64>,
}

impl RawTable {
    pub fn age_hi(&self) -> u32 {
        self.age_lo + self.values.nrows() as u32 - 1
    }

    pub fn year_last(&self) -> i32 {
        self.year_first + self.values.ncols() as i32 - 1
    }

    /// Sub-table copy over the inclusive age and year ranges.
    pub fn window(
        &self,
        ages: (u32, u32),
        years: (i32, i32),
    ) -> Result<RawTable, LifetableError> {
        let (z_lo, z_hi) = ages;
        let (t_lo, t_hi) = years;
        if z_lo < self.age_lo || z_hi > self.age_hi() || z_lo > z_hi {
            return Err(LifetableError::WindowOutOfBounds {
                lo: z_lo as i64,
                hi: z_hi as i64,
                have_lo: self.age_lo as i64,
                have_hi: self.age_hi() as i64,
            });
        }
        if t_lo < self.year_first || t_hi > self.year_last() || t_lo > t_hi {
            return Err(LifetableError::WindowOutOfBounds {
                lo: t_lo as i64,
                hi: t_hi as i64,
                have_lo: self.year_first as i64,
                have_hi: self.year_last() as i64,
            });
        }
        let r0 = (z_lo - self.age_lo) as usize;
        let c0 = (t_lo - self.year_first) as usize;
        let nr = (z_hi - z_lo + 1) as usize;
        let nc = (t_hi - t_lo + 1) as usize;
        Ok(RawTable {
            age_lo: z_lo,
            year_first: t_lo,
            values: self.values.view((r0, c0), (nr, nc)).into_owned(),
        })
    }
}

/// Parse a whitespace-separated period table with columns
/// `Year Age Female Male Total`, selecting the column for `sex`.
///
/// Header and title lines are skipped; the age token `110+` maps to age 110;
/// missing values `.` become NaN. All years must list the same contiguous
/// age set.
pub fn parse_hmd_table(
    text: &str,
    kind: TableKind,
    sex: Sex,
) -> Result<RawTable, LifetableError> {
    let col = match sex {
        Sex::Female => 2,
        Sex::Male => 3,
        Sex::Total => 4,
    };
    let mut rows: Vec<(i32, u32, f64)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let year: i32 = match tokens[0].parse() {
            Ok(y) => y,
            Err(_) => continue, // title or header line
        };
        if tokens.len() < 5 {
            return Err(LifetableError::Parse {
                line: line_no,
                reason: format!("expected 5 columns, found {}", tokens.len()),
            });
        }
        let age_tok = tokens[1];
        let age: u32 = if let Some(stripped) = age_tok.strip_suffix('+') {
            stripped.parse().map_err(|_| LifetableError::Parse {
                line: line_no,
                reason: format!("bad age token {age_tok:?}"),
            })?
        } else {
            age_tok.parse().map_err(|_| LifetableError::Parse {
                line: line_no,
                reason: format!("bad age token {age_tok:?}"),
            })?
        };
        let raw = tokens[col];
        let value = if raw == "." {
            f64::NAN
        } else {
            let v: f64 = raw.parse().map_err(|_| LifetableError::Parse {
                line: line_no,
                reason: format!("bad numeric value {raw:?}"),
            })?;
            if v < 0.0 {
                return Err(LifetableError::Parse {
                    line: line_no,
                    reason: format!(
                        "negative {} value {v}",
                        match kind {
                            TableKind::Deaths => "deaths",
                            TableKind::Exposures => "exposure",
                        }
                    ),
                });
            }
            v
        };
        rows.push((year, age, value));
    }
    if rows.is_empty() {
        return Err(LifetableError::Parse {
            line: 0,
            reason: "no data rows found".into(),
        });
    }

    let mut years: Vec<i32> = rows.iter().map(|r| r.0).collect();
    years.sort_unstable();
    years.dedup();
    for w in years.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(LifetableError::NonContiguousYears { year: w[1] });
        }
    }
    let year_first = years[0];
    let n_years = years.len();

    let mut first_ages: Vec<u32> = rows
        .iter()
        .filter(|r| r.0 == year_first)
        .map(|r| r.1)
        .collect();
    first_ages.sort_unstable();
    if first_ages.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(LifetableError::Parse {
            line: 0,
            reason: "age set is not contiguous".into(),
        });
    }
    let age_lo = first_ages[0];
    let n_ages = first_ages.len();

    let mut values = DMatrix::from_element(n_ages, n_years, f64::NAN);
    let mut seen = vec![0usize; n_years];
    for (year, age, value) in rows {
        let t = (year - year_first) as usize;
        if age < age_lo || age > age_lo + n_ages as u32 - 1 {
            return Err(LifetableError::RaggedYears { year });
        }
        let z = (age - age_lo) as usize;
        values[(z, t)] = value;
        seen[t] += 1;
    }
    for (t, &count) in seen.iter().enumerate() {
        if count != n_ages {
            return Err(LifetableError::RaggedYears {
                year: year_first + t as i32,
            });
        }
    }
    Ok(RawTable {
        age_lo,
        year_first,
        values,
    })
}

/// Convert average population at risk to initial exposed-to-risk:
/// `n = N + d/2` element-wise. Exact; no rounding.
pub fn to_initial_exposure(
    avg_exposure: &RawTable,
    deaths: &RawTable,
) -> Result<RawTable, LifetableError> {
    if avg_exposure.age_lo != deaths.age_lo
        || avg_exposure.year_first != deaths.year_first
        || avg_exposure.values.shape() != deaths.values.shape()
    {
        return Err(LifetableError::ShapeMismatch);
    }
    Ok(RawTable {
        age_lo: avg_exposure.age_lo,
        year_first: avg_exposure.year_first,
        values: &avg_exposure.values + &deaths.values * 0.5,
    })
}

/// Validated mortality grid: death counts and initial exposures on an
/// age-by-year lattice. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityGrid {
    sex: Sex,
    age_lo: u32,
    year_first: i32,
    deaths: DMatrix<f64>,
    exposures: DMatrix<f64>,
}

impl MortalityGrid {
    /// Build a grid, enforcing `0 <= d <= n` and `n > 0` cell-wise.
    pub fn new(
        sex: Sex,
        age_lo: u32,
        year_first: i32,
        deaths: DMatrix<f64>,
        exposures: DMatrix<f64>,
    ) -> Result<Self, LifetableError> {
        if deaths.shape() != exposures.shape() || deaths.is_empty() {
            return Err(LifetableError::ShapeMismatch);
        }
        for z in 0..deaths.nrows() {
            for t in 0..deaths.ncols() {
                let age = age_lo + z as u32;
                let year = year_first + t as i32;
                let d = deaths[(z, t)];
                let n = exposures[(z, t)];
                if !d.is_finite() || !n.is_finite() {
                    return Err(LifetableError::MissingValue { age, year });
                }
                if d < 0.0 {
                    return Err(LifetableError::InvalidCell {
                        age,
                        year,
                        reason: format!("negative deaths {d}"),
                    });
                }
                if n <= 0.0 {
                    return Err(LifetableError::InvalidCell {
                        age,
                        year,
                        reason: format!("non-positive exposure {n}"),
                    });
                }
                if d > n {
                    return Err(LifetableError::InvalidCell {
                        age,
                        year,
                        reason: format!("deaths {d} exceed exposure {n}"),
                    });
                }
            }
        }
        Ok(MortalityGrid {
            sex,
            age_lo,
            year_first,
            deaths,
            exposures,
        })
    }

    /// Build from parsed tables (deaths and already-transformed initial
    /// exposures), rejecting missing cells by name.
    pub fn from_tables(
        sex: Sex,
        deaths: &RawTable,
        exposures: &RawTable,
    ) -> Result<Self, LifetableError> {
        if deaths.age_lo != exposures.age_lo
            || deaths.year_first != exposures.year_first
            || deaths.values.shape() != exposures.values.shape()
        {
            return Err(LifetableError::ShapeMismatch);
        }
        Self::new(
            sex,
            deaths.age_lo,
            deaths.year_first,
            deaths.values.clone(),
            exposures.values.clone(),
        )
    }

    pub fn sex(&self) -> Sex {
        self.sex
    }

    pub fn n_ages(&self) -> usize {
        self.deaths.nrows()
    }

    pub fn n_years(&self) -> usize {
        self.deaths.ncols()
    }

    pub fn age_lo(&self) -> u32 {
        self.age_lo
    }

    pub fn age_hi(&self) -> u32 {
        self.age_lo + self.n_ages() as u32 - 1
    }

    pub fn year_first(&self) -> i32 {
        self.year_first
    }

    pub fn year_last(&self) -> i32 {
        self.year_first + self.n_years() as i32 - 1
    }

    pub fn ages(&self) -> impl Iterator<Item = u32> + '_ {
        self.age_lo..=self.age_hi()
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.year_first..=self.year_last()
    }

    /// Deaths matrix, ages down the rows, years across the columns.
    pub fn deaths(&self) -> &DMatrix<f64> {
        &self.deaths
    }

    /// Initial exposed-to-risk, same layout as `deaths`.
    pub fn exposures(&self) -> &DMatrix<f64> {
        &self.exposures
    }

    /// Crude death probabilities d/n.
    pub fn observed_rates(&self) -> DMatrix<f64> {
        self.deaths.component_div(&self.exposures)
    }

    /// Sub-grid copy over inclusive age and year ranges.
    pub fn window(
        &self,
        ages: (u32, u32),
        years: (i32, i32),
    ) -> Result<MortalityGrid, LifetableError> {
        let (z_lo, z_hi) = ages;
        let (t_lo, t_hi) = years;
        if z_lo < self.age_lo || z_hi > self.age_hi() || z_lo > z_hi {
            return Err(LifetableError::WindowOutOfBounds {
                lo: z_lo as i64,
                hi: z_hi as i64,
                have_lo: self.age_lo as i64,
                have_hi: self.age_hi() as i64,
            });
        }
        if t_lo < self.year_first || t_hi > self.year_last() || t_lo > t_hi {
            return Err(LifetableError::WindowOutOfBounds {
                lo: t_lo as i64,
                hi: t_hi as i64,
                have_lo: self.year_first as i64,
                have_hi: self.year_last() as i64,
            });
        }
        let r0 = (z_lo - self.age_lo) as usize;
        let c0 = (t_lo - self.year_first) as usize;
        let nr = (z_hi - z_lo + 1) as usize;
        let nc = (t_hi - t_lo + 1) as usize;
        Ok(MortalityGrid {
            sex: self.sex,
            age_lo: z_lo,
            year_first: t_lo,
            deaths: self.deaths.view((r0, c0), (nr, nc)).into_owned(),
            exposures: self.exposures.view((r0, c0), (nr, nc)).into_owned(),
        })
    }

    /// Serialize to the long-format store: a `# sex=` line, a header, then
    /// one row per cell in age-major order. Floats use shortest
    /// round-trip formatting, so re-parsing is bit-exact.
    pub fn to_store_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# sex={}\n", self.sex));
        out.push_str("age,year,deaths,exposure\n");
        for z in 0..self.n_ages() {
            for t in 0..self.n_years() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    self.age_lo + z as u32,
                    self.year_first + t as i32,
                    self.deaths[(z, t)],
                    self.exposures[(z, t)]
                ));
            }
        }
        out
    }

    /// Parse the long-format store written by [`to_store_csv`].
    pub fn from_store_csv(text: &str) -> Result<Self, LifetableError> {
        let mut sex: Option<Sex> = None;
        let mut cells: Vec<(u32, i32, f64, f64)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("sex=") {
                    sex = Some(v.parse().map_err(|e| LifetableError::Store {
                        line: line_no,
                        reason: e,
                    })?);
                }
                continue;
            }
            if line == "age,year,deaths,exposure" {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(LifetableError::Store {
                    line: line_no,
                    reason: format!("expected 4 fields, found {}", parts.len()),
                });
            }
            let parse_err = |what: &str| LifetableError::Store {
                line: line_no,
                reason: format!("bad {what} field"),
            };
            let age: u32 = parts[0].parse().map_err(|_| parse_err("age"))?;
            let year: i32 = parts[1].parse().map_err(|_| parse_err("year"))?;
            let d: f64 = parts[2].parse().map_err(|_| parse_err("deaths"))?;
            let n: f64 = parts[3].parse().map_err(|_| parse_err("exposure"))?;
            cells.push((age, year, d, n));
        }
        let sex = sex.ok_or(LifetableError::Store {
            line: 0,
            reason: "missing # sex= line".into(),
        })?;
        if cells.is_empty() {
            return Err(LifetableError::Store {
                line: 0,
                reason: "no data rows".into(),
            });
        }
        let age_lo = cells.iter().map(|c| c.0).min().unwrap();
        let age_hi = cells.iter().map(|c| c.0).max().unwrap();
        let year_first = cells.iter().map(|c| c.1).min().unwrap();
        let year_last = cells.iter().map(|c| c.1).max().unwrap();
        let nr = (age_hi - age_lo + 1) as usize;
        let nc = (year_last - year_first + 1) as usize;
        if cells.len() != nr * nc {
            return Err(LifetableError::Store {
                line: 0,
                reason: format!(
                    "expected {} cells for a {}x{} grid, found {}",
                    nr * nc,
                    nr,
                    nc,
                    cells.len()
                ),
            });
        }
        let mut deaths = DMatrix::from_element(nr, nc, f64::NAN);
        let mut exposures = DMatrix::from_element(nr, nc, f64::NAN);
        for (age, year, d, n) in cells {
            let z = (age - age_lo) as usize;
            let t = (year - year_first) as usize;
            deaths[(z, t)] = d;
            exposures[(z, t)] = n;
        }
        Self::new(sex, age_lo, year_first, deaths, exposures)
    }
}
