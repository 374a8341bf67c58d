//! Shared stochastic kernels and chain diagnostics.
//!
//! Every sampler takes the generator explicitly; there is no global RNG
//! state, so concurrent chains with independent generators are reproducible.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid truncation bounds: lo={lo}, hi={hi}")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("covariance or scale matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("series too short for ESS: length {0}, need at least 10")]
    SeriesTooShort(usize),
}

/// Standardized bound beyond which inverse-CDF sampling loses precision and
/// the tail rejection samplers take over.
const TAIL_SWITCH: f64 = 5.0;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Draw from a univariate truncated normal on `[lo, hi]`.
///
/// Inverse-CDF in the bulk; Robert-style exponential or uniform rejection in
/// the tails, stable out to standardized bounds around 40.
pub fn rtruncnorm<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64, SamplerError> {
    if !(lo < hi) {
        return Err(SamplerError::InvalidBounds { lo, hi });
    }
    if !(sd > 0.0) {
        return Err(SamplerError::InvalidParameter(format!(
            "sd must be positive, got {sd}"
        )));
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let z = std_truncnorm(a, b, rng);
    Ok((mean + sd * z).clamp(lo, hi))
}

/// Standardized truncated normal draw on `[a, b]`.
fn std_truncnorm<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return rng.sample(StandardNormal);
    }
    // reduce to the case where the upper half-line carries the mass
    if b <= 0.0 {
        return -std_truncnorm(-b, -a, rng);
    }
    if a >= TAIL_SWITCH {
        return upper_tail_truncnorm(a, b, rng);
    }
    let n = std_normal();
    let pa = if a == f64::NEG_INFINITY { 0.0 } else { n.cdf(a) };
    let pb = if b == f64::INFINITY { 1.0 } else { n.cdf(b) };
    let u: f64 = pa + (pb - pa) * rng.random::<f64>();
    let x = n.inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - 1e-16));
    x.clamp(a, b)
}

/// Rejection sampling on `[a, b]` with `a >= TAIL_SWITCH`.
fn upper_tail_truncnorm<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    if b.is_finite() && (b - a) * lambda < 0.5 {
        // narrow far-tail interval: uniform proposal, acceptance near 1
        loop {
            let x = a + (b - a) * rng.random::<f64>();
            let log_acc = 0.5 * (a * a - x * x);
            if rng.random::<f64>().ln() < log_acc {
                return x;
            }
        }
    }
    loop {
        let e: f64 = rng.sample(Exp1);
        let x = a + e / lambda;
        if x > b {
            continue;
        }
        let d = x - lambda;
        if rng.random::<f64>().ln() < -0.5 * d * d {
            return x;
        }
    }
}

/// Gibbs draw from a box-truncated multivariate normal.
///
/// Runs `sweeps` full coordinate passes of exact univariate conditional
/// draws, starting from the box-clamped mean, and returns the final state.
pub fn rtmvnorm_gibbs<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    sweeps: usize,
    rng: &mut R,
) -> Result<DVector<f64>, SamplerError> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d || lo.len() != d || hi.len() != d {
        return Err(SamplerError::InvalidParameter(
            "dimension mismatch in rtmvnorm_gibbs".into(),
        ));
    }
    for i in 0..d {
        if !(lo[i] < hi[i]) {
            return Err(SamplerError::InvalidBounds { lo: lo[i], hi: hi[i] });
        }
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(SamplerError::NotPositiveDefinite)?;
    let prec = chol.inverse();
    let mut x = DVector::from_fn(d, |i, _| mean[i].clamp(lo[i], hi[i]));
    for _ in 0..sweeps {
        for i in 0..d {
            let pii = prec[(i, i)];
            let mut shift = 0.0;
            for j in 0..d {
                if j != i {
                    shift += prec[(i, j)] * (x[j] - mean[j]);
                }
            }
            let cond_mean = mean[i] - shift / pii;
            let cond_sd = (1.0 / pii).sqrt();
            x[i] = rtruncnorm(cond_mean, cond_sd, lo[i], hi[i], rng)?;
        }
    }
    Ok(x)
}

/// GHK estimate of the probability that `N(mean, cov)` lands in the box.
///
/// Sequential conditioning through the Cholesky factor: each coordinate
/// contributes its univariate band probability and is then drawn truncated,
/// giving an unbiased estimator of the box mass.
pub fn tmvn_box_prob<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64, SamplerError> {
    let d = mean.len();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(SamplerError::NotPositiveDefinite)?;
    let l = chol.l();
    let n = std_normal();
    let mut total = 0.0;
    let mut e = vec![0.0; d];
    for _ in 0..n_samples {
        let mut w = 1.0;
        for i in 0..d {
            let mut center = mean[i];
            for j in 0..i {
                center += l[(i, j)] * e[j];
            }
            let sd = l[(i, i)];
            let a = (lo[i] - center) / sd;
            let b = (hi[i] - center) / sd;
            let pa = if a == f64::NEG_INFINITY { 0.0 } else { n.cdf(a) };
            let pb = if b == f64::INFINITY { 1.0 } else { n.cdf(b) };
            let p = pb - pa;
            if p <= 0.0 {
                w = 0.0;
                break;
            }
            w *= p;
            e[i] = std_truncnorm(a.max(-40.0), b.min(40.0), rng);
        }
        total += w;
    }
    Ok(total / n_samples as f64)
}

/// Inverse-gamma draw with density proportional to `x^(-shape-1) exp(-rate/x)`.
pub fn rinvgamma<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    rng: &mut R,
) -> Result<f64, SamplerError> {
    if !(shape > 0.0 && rate > 0.0) {
        return Err(SamplerError::InvalidParameter(format!(
            "inverse gamma needs positive shape and rate, got ({shape}, {rate})"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| SamplerError::InvalidParameter(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

/// Inverse-Wishart draw with density proportional to
/// `|X|^(-(df+dim+1)/2) exp(-tr(scale X^-1)/2)`.
pub fn rinvwishart<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>, SamplerError> {
    let p = scale.nrows();
    if scale.ncols() != p {
        return Err(SamplerError::InvalidParameter(
            "scale matrix must be square".into(),
        ));
    }
    if df <= (p as f64) - 1.0 {
        return Err(SamplerError::InvalidParameter(format!(
            "inverse Wishart needs df > dim - 1, got df={df}, dim={p}"
        )));
    }
    let scale_chol = scale
        .clone()
        .cholesky()
        .ok_or(SamplerError::NotPositiveDefinite)?;
    let v = scale_chol.inverse();
    let lv = v.cholesky().ok_or(SamplerError::NotPositiveDefinite)?.l();
    // Bartlett factor
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| SamplerError::InvalidParameter(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let c = lv * a; // lower triangular, W = C C'
    let c_inv = c
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or(SamplerError::NotPositiveDefinite)?;
    let x = c_inv.transpose() * c_inv;
    // symmetrize against roundoff
    Ok(0.5 * (&x + x.transpose()))
}

/// Effective sample size of one scalar chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ess {
    pub value: f64,
    /// The series was (numerically) constant; the value reported is the
    /// series length.
    pub degenerate: bool,
}

/// ESS via the initial-positive-sequence estimate of the spectral density at
/// zero: pairs of adjacent autocovariances are summed until the first
/// non-positive pair. The result is clipped to `(0, len]`.
pub fn ess(series: &[f64]) -> Result<Ess, SamplerError> {
    let n = series.len();
    if n < 10 {
        return Err(SamplerError::SeriesTooShort(n));
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let s2 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if s2 <= 0.0 || !s2.is_finite() {
        return Ok(Ess {
            value: nf,
            degenerate: true,
        });
    }
    let gamma = |k: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - k {
            s += (series[i] - mean) * (series[i + k] - mean);
        }
        s / nf
    };
    let g0 = gamma(0);
    let mut spectral = -g0;
    let mut m = 0usize;
    while 2 * m + 1 < n {
        let pair = gamma(2 * m) + gamma(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        spectral += 2.0 * pair;
        m += 1;
    }
    if spectral <= 0.0 {
        // antithetic chain: spectral density at zero vanishes, report the cap
        return Ok(Ess {
            value: nf,
            degenerate: false,
        });
    }
    let raw = s2 * nf / spectral;
    Ok(Ess {
        value: raw.min(nf).max(f64::MIN_POSITIVE),
        degenerate: false,
    })
}

/// One Robbins-Monro step on a log tuning scale.
///
/// `acceptance` is the acceptance indicator or batch rate in `[0, 1]`;
/// the step size decays as `iteration^-0.6`. Callers freeze adaptation by
/// simply not calling this after burn-in.
pub fn robbins_monro_adapt(
    current_log_scale: f64,
    acceptance: f64,
    target: f64,
    iteration: usize,
) -> f64 {
    let it = iteration.max(1) as f64;
    current_log_scale + (acceptance - target) / it.powf(0.6)
}

/// Per-chain diagnostics: acceptance rates per block, adapted tuning
/// constants, and per-scalar ESS.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub acceptance: BTreeMap<String, f64>,
    pub tuning: BTreeMap<String, f64>,
    pub ess: BTreeMap<String, f64>,
}
