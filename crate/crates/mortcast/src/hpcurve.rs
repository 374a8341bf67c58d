//! Static eight-parameter mortality law: natural/working parameter
//! transforms, curve evaluation with analytic gradients, the per-year
//! binomial log-likelihood kernel, and the weighted least squares fitter
//! used to seed MCMC proposals.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

pub const PSI_DIM: usize = 8;

/// Working-scale parameter vector (componentwise transformed).
pub type Psi = SVector<f64, PSI_DIM>;
pub type PsiMatrix = SMatrix<f64, PSI_DIM, PSI_DIM>;

#[derive(Debug, Error)]
pub enum HpError {
    #[error("parameter {name}={value} outside its open interval ({lo}, {hi})")]
    OutOfDomain {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("truncation bounds must satisfy eta < xi componentwise")]
    BadBounds,
    #[error("normal equations singular beyond jitter escalation")]
    SingularNormalEquations,
    #[error("covariance not repairable to positive definite")]
    NotPositiveDefinite,
    #[error("{0}")]
    Invalid(String),
}

/// Natural-scale curve parameters: infant slope A with shape B, C, the
/// accident hump D, E, F, and the senescent slope G, H.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_open(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), HpError> {
    if value > lo && value < hi && value.is_finite() {
        Ok(())
    } else {
        Err(HpError::OutOfDomain {
            name,
            value,
            lo,
            hi,
        })
    }
}

/// Map natural parameters to the working scale: logit for the five
/// probability-like parameters, log for E and H, and a logit scaled to
/// (10, 40) for F.
pub fn transform(p: &HpParams) -> Result<Psi, HpError> {
    check_open("A", p.a, 0.0, 1.0)?;
    check_open("B", p.b, 0.0, 1.0)?;
    check_open("C", p.c, 0.0, 1.0)?;
    check_open("D", p.d, 0.0, 1.0)?;
    check_open("E", p.e, 0.0, f64::INFINITY)?;
    check_open("F", p.f, 10.0, 40.0)?;
    check_open("G", p.g, 0.0, 1.0)?;
    check_open("H", p.h, 0.0, f64::INFINITY)?;
    Ok(Psi::from_column_slice(&[
        logit(p.a),
        logit(p.b),
        logit(p.c),
        logit(p.d),
        p.e.ln(),
        ((p.f - 10.0) / (40.0 - p.f)).ln(),
        logit(p.g),
        p.h.ln(),
    ]))
}

/// Inverse of [`transform`]; any finite working vector maps strictly inside
/// the natural domains.
pub fn inverse_transform(psi: &Psi) -> HpParams {
    HpParams {
        a: sigmoid(psi[0]),
        b: sigmoid(psi[1]),
        c: sigmoid(psi[2]),
        d: sigmoid(psi[3]),
        e: psi[4].exp(),
        f: 10.0 + 30.0 * sigmoid(psi[5]),
        g: sigmoid(psi[6]),
        h: psi[7].exp(),
    }
}

/// Componentwise box constraining the working vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationBox {
    pub eta: Psi,
    pub xi: Psi,
}

impl TruncationBox {
    pub fn new(eta: Psi, xi: Psi) -> Result<Self, HpError> {
        for i in 0..PSI_DIM {
            if !(eta[i] < xi[i]) {
                return Err(HpError::BadBounds);
            }
        }
        Ok(TruncationBox { eta, xi })
    }

    pub fn contains(&self, psi: &Psi) -> bool {
        (0..PSI_DIM).all(|i| psi[i] >= self.eta[i] && psi[i] <= self.xi[i])
    }

    /// Clamp into the box componentwise.
    pub fn project(&self, psi: &Psi) -> Psi {
        Psi::from_fn(|i, _| psi[i].clamp(self.eta[i], self.xi[i]))
    }
}

impl Default for TruncationBox {
    fn default() -> Self {
        TruncationBox {
            eta: Psi::from_column_slice(&[
                -10.61,
                -10.61,
                -5.99,
                -11.29,
                -25.33,
                f64::NEG_INFINITY,
                -17.5,
                -1.39,
            ]),
            xi: Psi::from_column_slice(&[-2.75, -0.2, 2.2, -3.48, 4.09, 2.64, -3.48, 0.18]),
        }
    }
}

/// Odds of death at integer age `z`: a declining infant term, a lognormal
/// accident hump, and a geometric senescent term. At `z = 0` the hump term
/// takes its limit value 0.
pub fn hp_odds(z: u32, psi: &Psi) -> f64 {
    let p = inverse_transform(psi);
    let zf = z as f64;
    let infant = ((zf + p.b).powf(p.c) * p.a.ln()).exp();
    let hump = if z == 0 {
        0.0
    } else {
        let w = zf.ln() - p.f.ln();
        p.d * (-p.e * w * w).exp()
    };
    let senescent = p.g * (zf * p.h.ln()).exp();
    infant + hump + senescent
}

/// Odds together with the gradient of the odds in the working coordinates.
pub fn hp_odds_grad(z: u32, psi: &Psi) -> (f64, Psi) {
    let p = inverse_transform(psi);
    let zf = z as f64;
    let mut grad = Psi::zeros();

    let u = (zf + p.b).powf(p.c);
    let infant = (u * p.a.ln()).exp();
    grad[0] = infant * u * (1.0 - p.a);
    grad[1] = infant * p.a.ln() * p.c * (zf + p.b).powf(p.c - 1.0) * p.b * (1.0 - p.b);
    grad[2] = infant * p.a.ln() * u * (zf + p.b).ln() * p.c * (1.0 - p.c);

    let hump = if z == 0 {
        0.0
    } else {
        let w = zf.ln() - p.f.ln();
        let t2 = p.d * (-p.e * w * w).exp();
        grad[3] = t2 * (1.0 - p.d);
        grad[4] = -w * w * p.e * t2;
        grad[5] = t2 * (2.0 * p.e * w / p.f) * (p.f - 10.0) * (40.0 - p.f) / 30.0;
        t2
    };

    let senescent = p.g * (zf * p.h.ln()).exp();
    grad[6] = senescent * (1.0 - p.g);
    grad[7] = zf * senescent;

    (infant + hump + senescent, grad)
}

/// Death probability K/(1+K).
pub fn hp_prob(z: u32, psi: &Psi) -> f64 {
    let k = hp_odds(z, psi);
    k / (1.0 + k)
}

/// Binomial log-likelihood kernel for one year's column, the combinatorial
/// constant dropped: sum over ages of `d log K - n log(1+K)`.
pub fn year_loglik(psi: &Psi, deaths: &[f64], exposures: &[f64], ages: &[u32]) -> f64 {
    debug_assert_eq!(deaths.len(), exposures.len());
    debug_assert_eq!(deaths.len(), ages.len());
    let mut ll = 0.0;
    for i in 0..ages.len() {
        let k = hp_odds(ages[i], psi);
        ll += deaths[i] * k.ln() - exposures[i] * k.ln_1p();
    }
    ll
}

/// Gradient of [`year_loglik`] in the working coordinates.
pub fn year_loglik_grad(psi: &Psi, deaths: &[f64], exposures: &[f64], ages: &[u32]) -> Psi {
    let mut g = Psi::zeros();
    for i in 0..ages.len() {
        let (k, dk) = hp_odds_grad(ages[i], psi);
        g += dk * (deaths[i] / k - exposures[i] / (1.0 + k));
    }
    g
}

/// Result of the weighted least squares fit for one year.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub psi: Psi,
    /// Gauss-Newton covariance of the estimate, repaired to SPD.
    pub cov: PsiMatrix,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value at the start and after each accepted step.
    pub objective_trace: Vec<f64>,
}

/// Documented default starting point for the fitter, chosen inside the
/// default truncation box.
pub fn default_wls_start() -> Psi {
    transform(&HpParams {
        a: 0.0016,
        b: 0.0011,
        c: 0.11,
        d: 0.0007,
        e: 5.24,
        f: 21.0,
        g: 0.00005,
        h: 1.0997,
    })
    .expect("default start inside domain")
}

const WLS_MAX_ITER: usize = 500;
const WLS_GRAD_TOL: f64 = 1e-8;

struct WlsEval {
    objective: f64,
    jtwj: PsiMatrix,
    jtwr: Psi,
}

fn wls_eval(psi: &Psi, q: &[f64], weights: &[f64], ages: &[u32]) -> WlsEval {
    let mut objective = 0.0;
    let mut jtwj = PsiMatrix::zeros();
    let mut jtwr = Psi::zeros();
    for i in 0..ages.len() {
        let (k, dk) = hp_odds_grad(ages[i], psi);
        let denom = (1.0 + k) * (1.0 + k);
        let jac = dk / denom;
        let r = q[i] - k / (1.0 + k);
        let w = weights[i];
        objective += w * r * r;
        jtwj += jac * jac.transpose() * w;
        jtwr += jac * (w * r);
    }
    WlsEval {
        objective,
        jtwj,
        jtwr,
    }
}

/// Fit the curve to one year of empirical death probabilities by damped
/// Gauss-Newton with weights `1/max(q, 0.5/n)^2`, iterates projected into
/// the truncation box. Returns the best iterate with `converged = false`
/// when the gradient tolerance is not reached within the iteration cap.
pub fn wls_fit(
    q: &[f64],
    exposures: &[f64],
    ages: &[u32],
    start: Option<Psi>,
    bounds: &TruncationBox,
) -> Result<WlsFit, HpError> {
    let n = ages.len();
    if q.len() != n || exposures.len() != n {
        return Err(HpError::Invalid("input length mismatch".into()));
    }
    if n <= PSI_DIM {
        return Err(HpError::Invalid(format!(
            "need more than {PSI_DIM} ages, got {n}"
        )));
    }
    let weights: Vec<f64> = q
        .iter()
        .zip(exposures)
        .map(|(&qi, &ni)| {
            let floor = 0.5 / ni;
            let denom = qi.max(floor);
            1.0 / (denom * denom)
        })
        .collect();

    let mut psi = bounds.project(&start.unwrap_or_else(default_wls_start));
    let mut eval = wls_eval(&psi, q, &weights, ages);
    let mut trace = vec![eval.objective];
    let mut lambda = 1e-3;
    let mut iterations = 0;

    for _ in 0..WLS_MAX_ITER {
        iterations += 1;
        if 2.0 * eval.jtwr.amax() < WLS_GRAD_TOL {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = eval.jtwj;
            for i in 0..PSI_DIM {
                damped[(i, i)] += lambda * eval.jtwj[(i, i)].max(1e-12);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&eval.jtwr);
                let cand = bounds.project(&(psi + delta));
                let cand_eval = wls_eval(&cand, q, &weights, ages);
                if cand_eval.objective.is_finite() && cand_eval.objective < eval.objective {
                    psi = cand;
                    eval = cand_eval;
                    trace.push(eval.objective);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }

    let converged = 2.0 * eval.jtwr.amax() < WLS_GRAD_TOL;

    // Gauss-Newton covariance with jitter escalation to SPD
    let dof = (n - PSI_DIM) as f64;
    let s2 = eval.objective / dof;
    let base = eval.jtwj;
    let mut inv = None;
    let mut jitter = 0.0;
    let scale = base.trace() / PSI_DIM as f64;
    let mut level = 1e-10;
    loop {
        let mut m = base;
        for i in 0..PSI_DIM {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            inv = Some(chol.inverse());
            break;
        }
        if jitter == 0.0 {
            jitter = level * scale;
        } else {
            level *= 2.0;
            jitter = level * scale;
        }
        if level > 1e-4 {
            break;
        }
    }
    let inv = inv.ok_or(HpError::SingularNormalEquations)?;
    let raw = inv * s2;
    let sym = (raw + raw.transpose()) * 0.5;

    let cov = repair_spd(&sym)?;
    Ok(WlsFit {
        psi,
        cov,
        converged,
        iterations,
        objective_trace: trace,
    })
}

/// Symmetrize and jitter a covariance until it factors, starting at
/// 1e-10 of the mean diagonal and doubling up to 1e-4.
pub fn repair_spd(m: &PsiMatrix) -> Result<PsiMatrix, HpError> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.cholesky().is_some() {
        return Ok(sym);
    }
    let scale = sym.trace().abs() / PSI_DIM as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut level = 1e-10;
    while level <= 1e-4 {
        let mut cand = sym;
        for i in 0..PSI_DIM {
            cand[(i, i)] += level * scale;
        }
        if cand.cholesky().is_some() {
            return Ok(cand);
        }
        level *= 2.0;
    }
    Err(HpError::NotPositiveDefinite)
}
