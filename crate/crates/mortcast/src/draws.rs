//! On-disk persistence for fitted chains. The draw store is a long CSV
//! (`iter,block,index,value`) with header comments carrying the grid
//! metadata, tuning state, and chain diagnostics, so a parsed store
//! reconstructs the fit exactly. The fit report is a small JSON document.

use crate::gmrf::{GmrfDraw, GmrfDraws};
use crate::hpcurve::{Psi, PsiMatrix, TruncationBox, PSI_DIM};
use crate::hpdyn::{HpDraw, HpDraws};
use crate::samplers::{ess, ChainDiagnostics};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DrawsError {
    #[error("format error on line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("draw store incomplete: {0}")]
    Incomplete(String),
    #[error("report error: {0}")]
    Report(String),
}

/// A parsed draw store, either model family.
#[derive(Debug, Clone)]
pub enum DrawsFile {
    Gmrf(GmrfDraws),
    Hp(HpDraws),
}

impl DrawsFile {
    pub fn model(&self) -> &'static str {
        match self {
            DrawsFile::Gmrf(_) => "gmrf",
            DrawsFile::Hp(_) => "hp",
        }
    }

    pub fn n_draws(&self) -> usize {
        match self {
            DrawsFile::Gmrf(d) => d.draws.len(),
            DrawsFile::Hp(d) => d.draws.len(),
        }
    }
}

fn join_floats(xs: impl IntoIterator<Item = f64>) -> String {
    xs.into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn diagnostics_header(diag: &ChainDiagnostics) -> String {
    // serde_json emits no raw newlines inside a compact document, so the
    // whole map fits on one comment line.
    serde_json::to_string(diag).expect("diagnostics are plain maps")
}

/// Serialize a GMRF fit to the draw-store format.
pub fn gmrf_draws_to_store(d: &GmrfDraws) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# model=gmrf");
    let _ = writeln!(out, "# age_lo={}", d.age_lo);
    let _ = writeln!(out, "# year_first={}", d.year_first);
    let _ = writeln!(out, "# n_ages={}", d.n_ages);
    let _ = writeln!(out, "# n_years={}", d.n_years);
    let _ = writeln!(out, "# delta={}", d.delta);
    let _ = writeln!(out, "# diagnostics={}", diagnostics_header(&d.diagnostics));
    out.push_str("iter,block,index,value\n");
    for (i, draw) in d.draws.iter().enumerate() {
        for (j, v) in draw.x.iter().enumerate() {
            let _ = writeln!(out, "{i},x,{j},{v}");
        }
        let _ = writeln!(out, "{i},tau,0,{}", draw.tau);
        let _ = writeln!(out, "{i},rho_age,0,{}", draw.rho_age);
        let _ = writeln!(out, "{i},b,0,{}", draw.b);
    }
    out
}

/// Serialize a dynamic-curve fit to the draw-store format. State vectors
/// are flattened year-major (`index = year_offset * 8 + coordinate`) and
/// the walk covariance row-major.
pub fn hp_draws_to_store(d: &HpDraws) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# model=hp");
    let _ = writeln!(
        out,
        "# ages={}",
        d.ages.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(out, "# year_first={}", d.year_first);
    let _ = writeln!(out, "# n_years={}", d.n_years);
    let _ = writeln!(out, "# eta={}", join_floats(d.bounds.eta.iter().copied()));
    let _ = writeln!(out, "# xi={}", join_floats(d.bounds.xi.iter().copied()));
    let _ = writeln!(out, "# scales={}", join_floats(d.scales.iter().copied()));
    let _ = writeln!(out, "# diagnostics={}", diagnostics_header(&d.diagnostics));
    out.push_str("iter,block,index,value\n");
    for (i, draw) in d.draws.iter().enumerate() {
        for (t, psi) in draw.path.iter().enumerate() {
            for j in 0..PSI_DIM {
                let _ = writeln!(out, "{i},psi,{},{}", t * PSI_DIM + j, psi[j]);
            }
        }
        for j in 0..PSI_DIM {
            let _ = writeln!(out, "{i},mu,{j},{}", draw.mu[j]);
        }
        for r in 0..PSI_DIM {
            for c in 0..PSI_DIM {
                let _ = writeln!(out, "{i},sigma,{},{}", r * PSI_DIM + c, draw.sigma[(r, c)]);
            }
        }
        for j in 0..PSI_DIM {
            let _ = writeln!(out, "{i},alpha,{j},{}", draw.alpha[j]);
        }
    }
    out
}

pub fn draws_to_store(file: &DrawsFile) -> String {
    match file {
        DrawsFile::Gmrf(d) => gmrf_draws_to_store(d),
        DrawsFile::Hp(d) => hp_draws_to_store(d),
    }
}

struct Header {
    fields: BTreeMap<String, String>,
    body_start: usize,
}

fn parse_header(text: &str) -> Result<Header, DrawsError> {
    let mut fields = BTreeMap::new();
    let mut body_start = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim_start();
            let Some((key, value)) = rest.split_once('=') else {
                return Err(DrawsError::Format {
                    line: line_no,
                    reason: "header comment is not key=value".into(),
                });
            };
            fields.insert(key.trim().to_string(), value.to_string());
        } else if line.trim() == "iter,block,index,value" {
            body_start = line_no;
            break;
        } else {
            return Err(DrawsError::Format {
                line: line_no,
                reason: "expected header comment or column line".into(),
            });
        }
    }
    if body_start == 0 {
        return Err(DrawsError::Format {
            line: text.lines().count(),
            reason: "missing column line `iter,block,index,value`".into(),
        });
    }
    Ok(Header { fields, body_start })
}

impl Header {
    fn get(&self, key: &str) -> Result<&str, DrawsError> {
        self.fields.get(key).map(|s| s.as_str()).ok_or_else(|| DrawsError::Format {
            line: 1,
            reason: format!("missing header field `{key}`"),
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, DrawsError> {
        self.get(key)?.trim().parse().map_err(|_| DrawsError::Format {
            line: 1,
            reason: format!("bad header field `{key}`"),
        })
    }

    fn float_list(&self, key: &str, want: Option<usize>) -> Result<Vec<f64>, DrawsError> {
        let vals: Result<Vec<f64>, _> = self
            .get(key)?
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect();
        let vals = vals.map_err(|_| DrawsError::Format {
            line: 1,
            reason: format!("bad float in header field `{key}`"),
        })?;
        if let Some(n) = want {
            if vals.len() != n {
                return Err(DrawsError::Format {
                    line: 1,
                    reason: format!("header field `{key}` needs {n} values, found {}", vals.len()),
                });
            }
        }
        Ok(vals)
    }

    fn diagnostics(&self) -> Result<ChainDiagnostics, DrawsError> {
        serde_json::from_str(self.get("diagnostics")?).map_err(|e| DrawsError::Format {
            line: 1,
            reason: format!("bad diagnostics header: {e}"),
        })
    }
}

struct Row {
    iter: usize,
    block: String,
    index: usize,
    value: f64,
}

fn parse_rows(text: &str, body_start: usize) -> Result<Vec<Row>, DrawsError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(body_start) {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(DrawsError::Format {
                line: line_no,
                reason: format!("expected 4 fields, found {}", parts.len()),
            });
        }
        let bad = |what: &str| DrawsError::Format {
            line: line_no,
            reason: format!("bad {what} field"),
        };
        rows.push(Row {
            iter: parts[0].parse().map_err(|_| bad("iter"))?,
            block: parts[1].to_string(),
            index: parts[2].parse().map_err(|_| bad("index"))?,
            value: parts[3].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}

/// Group rows by iteration, checking the iterations form 0..n with every
/// expected (block, index) cell present exactly once.
fn collect_draws(
    rows: &[Row],
    expected: &[(&str, usize)],
) -> Result<Vec<BTreeMap<(String, usize), f64>>, DrawsError> {
    let n_iters = match rows.iter().map(|r| r.iter).max() {
        Some(m) => m + 1,
        None => return Err(DrawsError::Incomplete("no draw rows".into())),
    };
    let mut draws: Vec<BTreeMap<(String, usize), f64>> = vec![BTreeMap::new(); n_iters];
    for r in rows {
        let ok = expected
            .iter()
            .any(|(b, n)| *b == r.block && r.index < *n);
        if !ok {
            return Err(DrawsError::Incomplete(format!(
                "unexpected cell block={} index={}",
                r.block, r.index
            )));
        }
        if draws[r.iter]
            .insert((r.block.clone(), r.index), r.value)
            .is_some()
        {
            return Err(DrawsError::Incomplete(format!(
                "duplicate cell iter={} block={} index={}",
                r.iter, r.block, r.index
            )));
        }
    }
    let per_draw: usize = expected.iter().map(|(_, n)| n).sum();
    for (i, d) in draws.iter().enumerate() {
        if d.len() != per_draw {
            return Err(DrawsError::Incomplete(format!(
                "draw {i} has {} of {per_draw} cells",
                d.len()
            )));
        }
    }
    Ok(draws)
}

/// Parse a draw store written by either serializer.
pub fn parse_draws_store(text: &str) -> Result<DrawsFile, DrawsError> {
    let header = parse_header(text)?;
    let rows = parse_rows(text, header.body_start)?;
    match header.get("model")? {
        "gmrf" => {
            let n_ages: usize = header.parse("n_ages")?;
            let n_years: usize = header.parse("n_years")?;
            let cells = n_ages * n_years;
            let expected = [("x", cells), ("tau", 1), ("rho_age", 1), ("b", 1)];
            let grouped = collect_draws(&rows, &expected)?;
            let draws = grouped
                .into_iter()
                .map(|m| GmrfDraw {
                    x: (0..cells).map(|j| m[&("x".to_string(), j)]).collect(),
                    tau: m[&("tau".to_string(), 0)],
                    rho_age: m[&("rho_age".to_string(), 0)],
                    b: m[&("b".to_string(), 0)],
                })
                .collect();
            Ok(DrawsFile::Gmrf(GmrfDraws {
                n_ages,
                n_years,
                age_lo: header.parse("age_lo")?,
                year_first: header.parse("year_first")?,
                draws,
                diagnostics: header.diagnostics()?,
                delta: header.parse("delta")?,
            }))
        }
        "hp" => {
            let ages: Result<Vec<u32>, _> = header
                .get("ages")?
                .split(',')
                .map(|s| s.trim().parse::<u32>())
                .collect();
            let ages = ages.map_err(|_| DrawsError::Format {
                line: 1,
                reason: "bad header field `ages`".into(),
            })?;
            let n_years: usize = header.parse("n_years")?;
            let eta = header.float_list("eta", Some(PSI_DIM))?;
            let xi = header.float_list("xi", Some(PSI_DIM))?;
            let bounds = TruncationBox::new(
                Psi::from_iterator(eta.iter().copied()),
                Psi::from_iterator(xi.iter().copied()),
            )
            .map_err(|e| DrawsError::Format {
                line: 1,
                reason: format!("bad truncation box: {e}"),
            })?;
            let scales = header.float_list("scales", Some(n_years))?;
            let expected = [
                ("psi", n_years * PSI_DIM),
                ("mu", PSI_DIM),
                ("sigma", PSI_DIM * PSI_DIM),
                ("alpha", PSI_DIM),
            ];
            let grouped = collect_draws(&rows, &expected)?;
            let draws = grouped
                .into_iter()
                .map(|m| {
                    let path = (0..n_years)
                        .map(|t| {
                            Psi::from_iterator(
                                (0..PSI_DIM).map(|j| m[&("psi".to_string(), t * PSI_DIM + j)]),
                            )
                        })
                        .collect();
                    let mut sigma = PsiMatrix::zeros();
                    for r in 0..PSI_DIM {
                        for c in 0..PSI_DIM {
                            sigma[(r, c)] = m[&("sigma".to_string(), r * PSI_DIM + c)];
                        }
                    }
                    let mut alpha = [0.0; PSI_DIM];
                    for (j, a) in alpha.iter_mut().enumerate() {
                        *a = m[&("alpha".to_string(), j)];
                    }
                    HpDraw {
                        path,
                        mu: Psi::from_iterator((0..PSI_DIM).map(|j| m[&("mu".to_string(), j)])),
                        sigma,
                        alpha,
                    }
                })
                .collect();
            Ok(DrawsFile::Hp(HpDraws {
                ages,
                year_first: header.parse("year_first")?,
                n_years,
                bounds,
                draws,
                diagnostics: header.diagnostics()?,
                scales,
            }))
        }
        other => Err(DrawsError::Format {
            line: 1,
            reason: format!("unknown model `{other}`"),
        }),
    }
}

/// Recompute effective sample sizes from the retained traces of a parsed
/// store: the hyperparameter scalars plus a fixed set of state cells.
pub fn ess_table(file: &DrawsFile) -> BTreeMap<String, f64> {
    let mut table = BTreeMap::new();
    let mut put = |name: String, trace: Vec<f64>| {
        // traces too short for the autocovariance estimator report NaN
        let value = ess(&trace).map(|e| e.value).unwrap_or(f64::NAN);
        table.insert(name, value);
    };
    match file {
        DrawsFile::Gmrf(d) => {
            put("tau".into(), d.draws.iter().map(|w| w.tau).collect());
            put("rho_age".into(), d.draws.iter().map(|w| w.rho_age).collect());
            put("b".into(), d.draws.iter().map(|w| w.b).collect());
            let cells = d.n_ages * d.n_years;
            for (label, j) in [("first", 0), ("mid", cells / 2), ("last", cells - 1)] {
                put(
                    format!("x_{label}"),
                    d.draws.iter().map(|w| w.x[j]).collect(),
                );
            }
        }
        DrawsFile::Hp(d) => {
            let t_last = d.n_years - 1;
            for j in 0..PSI_DIM {
                put(format!("mu{j}"), d.draws.iter().map(|w| w.mu[j]).collect());
                put(
                    format!("psi{j}_t{}", t_last + 1),
                    d.draws.iter().map(|w| w.path[t_last][j]).collect(),
                );
            }
        }
    }
    table
}

/// Fit-run report written alongside the draw store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: String,
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub draws_retained: usize,
    /// Wall-clock seconds; the one field that legitimately differs between
    /// reruns of the same configuration.
    pub wall_time_seconds: f64,
    pub diagnostics: ChainDiagnostics,
}

impl FitReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, DrawsError> {
        serde_json::from_str(text).map_err(|e| DrawsError::Report(e.to_string()))
    }
}
