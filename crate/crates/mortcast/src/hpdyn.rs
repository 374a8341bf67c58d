//! Dynamic mortality-curve state-space model: the eight transformed curve
//! parameters follow a box-truncated Gaussian random walk across years,
//! with a hierarchical prior on the innovation covariance. Inference is
//! Metropolis-within-Gibbs with likelihood-informed year-block proposals;
//! prediction simulates the truncated walk forward.

use crate::forecast::ForecastDraws;
use crate::hpcurve::{
    default_wls_start, hp_prob, repair_spd, wls_fit, year_loglik, HpError, Psi, PsiMatrix,
    TruncationBox, PSI_DIM,
};
use crate::lifetable::MortalityGrid;
use crate::samplers::{self, robbins_monro_adapt, ChainDiagnostics, SamplerError};
use nalgebra::{Cholesky, Const, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Diagonal of the Gaussian prior precision on the drift.
pub const DRIFT_PRIOR_PRECISION: f64 = 0.001;
/// Hierarchical covariance prior shape; 2 makes the implied correlation
/// priors uniform on (-1, 1).
pub const HW_NU: f64 = 2.0;
/// Hierarchical covariance prior scale for the standard deviations.
pub const HW_ELL: f64 = 1e5;

const FORWARD_GIBBS_SWEEPS: usize = 10;
const GHK_SAMPLES: usize = 128;

#[derive(Debug, Error)]
pub enum HpDynError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("no year produced a usable proposal seed")]
    AllSeedsFailed,
    #[error(transparent)]
    Curve(#[from] HpError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Latent path: one transformed parameter vector per observed year.
pub type HpPath = Vec<Psi>;

/// Random-walk hyperparameters: drift, innovation covariance, and the
/// auxiliary scales of the hierarchical covariance prior.
#[derive(Debug, Clone, PartialEq)]
pub struct RwHyper {
    pub mu: Psi,
    pub sigma: PsiMatrix,
    pub alpha: [f64; PSI_DIM],
}

impl RwHyper {
    pub fn new(mu: Psi, sigma: PsiMatrix, alpha: [f64; PSI_DIM]) -> Result<Self, HpDynError> {
        if !mu.iter().all(|v| v.is_finite()) {
            return Err(HpDynError::InvalidConfig("drift must be finite".into()));
        }
        if sigma.cholesky().is_none() {
            return Err(HpDynError::NotPositiveDefinite);
        }
        if !alpha.iter().all(|&a| a > 0.0 && a.is_finite()) {
            return Err(HpDynError::InvalidConfig(
                "auxiliary scales must be positive".into(),
            ));
        }
        Ok(RwHyper { mu, sigma, alpha })
    }

    /// Neutral starting point for a chain: zero drift, small isotropic
    /// innovation, unit auxiliaries.
    pub fn default_init() -> Self {
        RwHyper {
            mu: Psi::zeros(),
            sigma: PsiMatrix::identity() * 0.01,
            alpha: [1.0; PSI_DIM],
        }
    }
}

/// Cached Cholesky view of a covariance used in transition densities.
struct SigmaOps {
    chol: Cholesky<f64, Const<PSI_DIM>>,
    ln_det: f64,
}

impl SigmaOps {
    fn new(sigma: &PsiMatrix) -> Result<Self, HpDynError> {
        let chol = sigma.cholesky().ok_or(HpDynError::NotPositiveDefinite)?;
        let l = chol.l_dirty();
        let ln_det = 2.0 * (0..PSI_DIM).map(|i| l[(i, i)].ln()).sum::<f64>();
        Ok(SigmaOps { chol, ln_det })
    }

    fn quad(&self, dev: &Psi) -> f64 {
        self.chol.solve(dev).dot(dev)
    }

    fn inverse(&self) -> PsiMatrix {
        self.chol.inverse()
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Log density of an 8-variate Gaussian with the given covariance ops.
fn ln_mvn(dev: &Psi, ops: &SigmaOps) -> f64 {
    -0.5 * (PSI_DIM as f64 * LN_2PI + ops.ln_det + ops.quad(dev))
}

fn ln_multivariate_gamma(p: usize, a: f64) -> f64 {
    let mut s = p as f64 * (p as f64 - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=p {
        s += ln_gamma(a + (1.0 - j as f64) / 2.0);
    }
    s
}

/// Log density of the inverse Wishart IW(df, scale) at `sigma`.
fn ln_invwishart(sigma_ops: &SigmaOps, df: f64, scale: &PsiMatrix) -> Result<f64, HpDynError> {
    let p = PSI_DIM as f64;
    let scale_chol = scale.cholesky().ok_or(HpDynError::NotPositiveDefinite)?;
    let ls = scale_chol.l_dirty();
    let ln_det_scale = 2.0 * (0..PSI_DIM).map(|i| ls[(i, i)].ln()).sum::<f64>();
    let sigma_inv = sigma_ops.inverse();
    let trace = (scale * sigma_inv).trace();
    Ok(0.5 * df * ln_det_scale - 0.5 * df * p * 2f64.ln()
        - ln_multivariate_gamma(PSI_DIM, 0.5 * df)
        - 0.5 * (df + p + 1.0) * sigma_ops.ln_det
        - 0.5 * trace)
}

/// Log density of the inverse gamma with the given shape and rate.
fn ln_invgamma(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Joint log posterior of the path and hyperparameters, up to the constant
/// binomial coefficients of the likelihood. Truncation normalizers of the
/// transition densities are treated as constant (the box is wide relative
/// to the innovation scale), so transitions contribute plain Gaussian log
/// densities plus the box indicator.
pub fn log_posterior(
    path: &[Psi],
    hyper: &RwHyper,
    grid: &MortalityGrid,
    bounds: &TruncationBox,
) -> Result<f64, HpDynError> {
    if path.len() != grid.n_years() {
        return Err(HpDynError::InvalidConfig(format!(
            "path has {} years, grid has {}",
            path.len(),
            grid.n_years()
        )));
    }
    if path.iter().any(|psi| !bounds.contains(psi)) {
        return Ok(f64::NEG_INFINITY);
    }
    let ops = SigmaOps::new(&hyper.sigma)?;

    // drift prior N(0, M^-1)
    let mut lp = -0.5
        * (PSI_DIM as f64 * LN_2PI - PSI_DIM as f64 * DRIFT_PRIOR_PRECISION.ln()
            + DRIFT_PRIOR_PRECISION * hyper.mu.dot(&hyper.mu));

    // hierarchical covariance prior
    let mut scale = PsiMatrix::zeros();
    for i in 0..PSI_DIM {
        scale[(i, i)] = 2.0 * HW_NU / hyper.alpha[i];
        lp += ln_invgamma(hyper.alpha[i], 0.5, 1.0 / (HW_ELL * HW_ELL));
    }
    lp += ln_invwishart(&ops, HW_NU + PSI_DIM as f64 - 1.0, &scale)?;

    let ages: Vec<u32> = grid.ages().collect();
    for (t, psi) in path.iter().enumerate() {
        let d: Vec<f64> = grid.deaths().column(t).iter().cloned().collect();
        let n: Vec<f64> = grid.exposures().column(t).iter().cloned().collect();
        lp += year_loglik(psi, &d, &n, &ages);
    }
    for t in 1..path.len() {
        let dev = path[t] - path[t - 1] - hyper.mu;
        lp += ln_mvn(&dev, &ops);
    }
    Ok(lp)
}

/// Per-year proposal ingredients: centers and covariances from weighted
/// least-squares curve fits, plus the adapted scale constants.
#[derive(Debug, Clone)]
pub struct ProposalPlan {
    pub m: Vec<Psi>,
    pub v: Vec<PsiMatrix>,
    l: Vec<PsiMatrix>,
    ln_det_v: Vec<f64>,
    pub c: Vec<f64>,
    /// Years whose own fit failed and were seeded from a neighbor.
    pub fallback: Vec<bool>,
}

impl ProposalPlan {
    pub fn from_parts(m: Vec<Psi>, v: Vec<PsiMatrix>, c: Vec<f64>) -> Result<Self, HpDynError> {
        if m.len() != v.len() || m.len() != c.len() || m.is_empty() {
            return Err(HpDynError::InvalidConfig(
                "proposal plan parts must be nonempty and equal length".into(),
            ));
        }
        if !c.iter().all(|&ci| ci > 0.0) {
            return Err(HpDynError::InvalidConfig(
                "proposal scales must be positive".into(),
            ));
        }
        let n = m.len();
        let mut l = Vec::with_capacity(n);
        let mut ln_det_v = Vec::with_capacity(n);
        for vt in &v {
            let chol = vt.cholesky().ok_or(HpDynError::NotPositiveDefinite)?;
            let lt = chol.l();
            ln_det_v.push(2.0 * (0..PSI_DIM).map(|i| lt[(i, i)].ln()).sum::<f64>());
            l.push(lt);
        }
        let fallback = vec![false; n];
        Ok(ProposalPlan {
            m,
            v,
            l,
            ln_det_v,
            c,
            fallback,
        })
    }

    pub fn n_years(&self) -> usize {
        self.m.len()
    }

    /// Draw from N(center, c_t V_t).
    fn sample(&self, t_idx: usize, center: &Psi, rng: &mut (impl Rng + ?Sized)) -> Psi {
        let z = Psi::from_fn(|_, _| rng.sample(StandardNormal));
        center + self.c[t_idx].sqrt() * (self.l[t_idx] * z)
    }

    /// Log density of N(center, c_t V_t) at x.
    fn ln_density(&self, t_idx: usize, x: &Psi, center: &Psi) -> f64 {
        let dev = x - center;
        let y = self.l[t_idx]
            .solve_lower_triangular(&dev)
            .expect("proposal factor is nonsingular");
        let quad = y.dot(&y) / self.c[t_idx];
        -0.5 * (PSI_DIM as f64 * (LN_2PI + self.c[t_idx].ln()) + self.ln_det_v[t_idx] + quad)
    }
}

/// Pick the nearest successful seed for years whose own fit failed;
/// error only when every year failed.
fn fill_plan_gaps(
    seeds: Vec<Option<(Psi, PsiMatrix)>>,
) -> Result<(Vec<Psi>, Vec<PsiMatrix>, Vec<bool>), HpDynError> {
    let n = seeds.len();
    if seeds.iter().all(|s| s.is_none()) {
        return Err(HpDynError::AllSeedsFailed);
    }
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut fallback = Vec::with_capacity(n);
    for t in 0..n {
        if let Some((mt, vt)) = &seeds[t] {
            m.push(*mt);
            v.push(*vt);
            fallback.push(false);
        } else {
            let src = (0..n)
                .filter(|&j| seeds[j].is_some())
                .min_by_key(|&j| (j as i64 - t as i64).unsigned_abs())
                .expect("at least one seed exists");
            let (mt, vt) = seeds[src].as_ref().unwrap();
            m.push(*mt);
            v.push(*vt);
            fallback.push(true);
        }
    }
    Ok((m, v, fallback))
}

/// Fit the curve to every year of the grid by weighted least squares and
/// assemble the proposal plan; years whose fit fails borrow the nearest
/// successful year's seed.
pub fn build_proposal_plan(
    grid: &MortalityGrid,
    bounds: &TruncationBox,
) -> Result<ProposalPlan, HpDynError> {
    let ages: Vec<u32> = grid.ages().collect();
    let rates = grid.observed_rates();
    let mut seeds: Vec<Option<(Psi, PsiMatrix)>> = Vec::with_capacity(grid.n_years());
    let mut prev_psi: Option<Psi> = None;
    for t in 0..grid.n_years() {
        let q: Vec<f64> = rates.column(t).iter().cloned().collect();
        let n: Vec<f64> = grid.exposures().column(t).iter().cloned().collect();
        let seed = wls_fit(&q, &n, &ages, prev_psi, bounds)
            .ok()
            .and_then(|fit| {
                if fit.psi.iter().all(|x| x.is_finite()) {
                    repair_spd(&fit.cov).ok().map(|cov| (fit.psi, cov))
                } else {
                    None
                }
            });
        if let Some((psi, _)) = &seed {
            prev_psi = Some(*psi);
        }
        seeds.push(seed);
    }
    let (m, v, fallback) = fill_plan_gaps(seeds)?;
    let mut plan = ProposalPlan::from_parts(m, v, vec![1.0; grid.n_years()])?;
    plan.fallback = fallback;
    Ok(plan)
}

/// GHK estimate of the log mass the truncated walk places inside the box.
fn ln_box_mass(
    mean: &Psi,
    sigma: &PsiMatrix,
    bounds: &TruncationBox,
    rng: &mut (impl Rng + ?Sized),
) -> Result<f64, HpDynError> {
    let mean_d = DVector::from_iterator(PSI_DIM, mean.iter().cloned());
    let cov_d = DMatrix::from_fn(PSI_DIM, PSI_DIM, |i, j| sigma[(i, j)]);
    let lo = DVector::from_iterator(PSI_DIM, bounds.eta.iter().cloned());
    let hi = DVector::from_iterator(PSI_DIM, bounds.xi.iter().cloned());
    let p = samplers::tmvn_box_prob(&mean_d, &cov_d, &lo, &hi, GHK_SAMPLES, rng)?;
    Ok(p.max(f64::MIN_POSITIVE).ln())
}

#[allow(clippy::too_many_arguments)]
fn state_target(
    psi: &Psi,
    prev: Option<&Psi>,
    next: Option<&Psi>,
    hyper: &RwHyper,
    ops: &SigmaOps,
    d: &[f64],
    n: &[f64],
    ages: &[u32],
    bounds: &TruncationBox,
    z_correction: bool,
    rng: &mut (impl Rng + ?Sized),
) -> Result<f64, HpDynError> {
    if !bounds.contains(psi) {
        return Ok(f64::NEG_INFINITY);
    }
    let mut lt = year_loglik(psi, d, n, ages);
    if let Some(p) = prev {
        let dev = psi - p - hyper.mu;
        lt -= 0.5 * ops.quad(&dev);
    }
    if let Some(nx) = next {
        let dev = nx - psi - hyper.mu;
        lt -= 0.5 * ops.quad(&dev);
        if z_correction {
            // the normalizer of the transition out of this state depends
            // on the state itself; estimate it by Monte Carlo, making the
            // acceptance ratio approximate
            lt -= ln_box_mass(&(psi + hyper.mu), &hyper.sigma, bounds, rng)?;
        }
    }
    Ok(lt)
}

#[allow(clippy::too_many_arguments)]
fn state_update_cols(
    t: usize,
    path: &mut [Psi],
    hyper: &RwHyper,
    ops: &SigmaOps,
    plan: &ProposalPlan,
    d: &[f64],
    n: &[f64],
    ages: &[u32],
    bounds: &TruncationBox,
    first_sweep: bool,
    z_correction: bool,
    rng: &mut (impl Rng + ?Sized),
) -> Result<bool, HpDynError> {
    let idx = t - 1;
    let cur = path[idx];
    let prev = if idx > 0 { Some(&path[idx - 1]) } else { None };
    let next = path.get(idx + 1);
    let center = if first_sweep { plan.m[idx] } else { cur };
    let prop = plan.sample(idx, &center, rng);

    let target_prop = state_target(
        &prop,
        prev,
        next,
        hyper,
        ops,
        d,
        n,
        ages,
        bounds,
        z_correction,
        rng,
    )?;
    if target_prop == f64::NEG_INFINITY {
        return Ok(false);
    }
    let target_cur = state_target(
        &cur,
        prev,
        next,
        hyper,
        ops,
        d,
        n,
        ages,
        bounds,
        z_correction,
        rng,
    )?;
    let mut log_alpha = target_prop - target_cur;
    if first_sweep {
        // independence proposal: include the proposal-density correction
        log_alpha += plan.ln_density(idx, &cur, &center) - plan.ln_density(idx, &prop, &center);
    }
    if rng.random::<f64>().ln() < log_alpha {
        path[idx] = prop;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// One MH step on the year-`t` state block (`t` is 1-based). On the first
/// sweep the proposal is an independence draw centered at the plan's fit;
/// on later sweeps a random walk centered at the current state. Returns
/// whether the move was accepted.
#[allow(clippy::too_many_arguments)]
pub fn update_state_block<R: Rng + ?Sized>(
    t: usize,
    path: &mut [Psi],
    hyper: &RwHyper,
    plan: &ProposalPlan,
    grid: &MortalityGrid,
    bounds: &TruncationBox,
    first_sweep: bool,
    z_correction: bool,
    rng: &mut R,
) -> Result<bool, HpDynError> {
    if t == 0 || t > path.len() || path.len() != grid.n_years() {
        return Err(HpDynError::InvalidConfig(format!(
            "year index {t} outside 1..={}",
            path.len()
        )));
    }
    let ops = SigmaOps::new(&hyper.sigma)?;
    let ages: Vec<u32> = grid.ages().collect();
    let d: Vec<f64> = grid.deaths().column(t - 1).iter().cloned().collect();
    let n: Vec<f64> = grid.exposures().column(t - 1).iter().cloned().collect();
    state_update_cols(
        t,
        path,
        hyper,
        &ops,
        plan,
        &d,
        &n,
        &ages,
        bounds,
        first_sweep,
        z_correction,
        rng,
    )
}

/// Gaussian full-conditional parameters of the drift given the path and
/// innovation covariance: precision M + (T-1)Σ⁻¹.
pub fn mu_conditional_params(
    path: &[Psi],
    sigma: &PsiMatrix,
) -> Result<(Psi, PsiMatrix), HpDynError> {
    let ops = SigmaOps::new(sigma)?;
    let sigma_inv = ops.inverse();
    let n_inc = path.len().saturating_sub(1) as f64;
    let precision = PsiMatrix::identity() * DRIFT_PRIOR_PRECISION + sigma_inv * n_inc;
    let mut sum_inc = Psi::zeros();
    for t in 1..path.len() {
        sum_inc += path[t] - path[t - 1];
    }
    let rhs = sigma_inv * sum_inc;
    let chol = precision
        .cholesky()
        .ok_or(HpDynError::NotPositiveDefinite)?;
    Ok((chol.solve(&rhs), precision))
}

/// Gibbs draw of the drift.
pub fn draw_mu<R: Rng + ?Sized>(
    path: &[Psi],
    sigma: &PsiMatrix,
    rng: &mut R,
) -> Result<Psi, HpDynError> {
    let (mean, precision) = mu_conditional_params(path, sigma)?;
    let chol = precision
        .cholesky()
        .ok_or(HpDynError::NotPositiveDefinite)?;
    let z = Psi::from_fn(|_, _| rng.sample(StandardNormal));
    // solve L' y = z so y has covariance (L L')^{-1}
    let y = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(HpDynError::NotPositiveDefinite)?;
    Ok(mean + y)
}

/// Inverse-Wishart full-conditional parameters of the innovation
/// covariance given the path, drift, and auxiliary scales.
pub fn sigma_conditional_params(
    path: &[Psi],
    mu: &Psi,
    alpha: &[f64; PSI_DIM],
) -> (f64, PsiMatrix) {
    let n_inc = path.len().saturating_sub(1) as f64;
    let df = HW_NU + PSI_DIM as f64 - 1.0 + n_inc;
    let mut scale = PsiMatrix::zeros();
    for i in 0..PSI_DIM {
        scale[(i, i)] = 2.0 * HW_NU / alpha[i];
    }
    for t in 1..path.len() {
        let dev = path[t] - path[t - 1] - mu;
        scale += dev * dev.transpose();
    }
    (df, scale)
}

/// Gibbs draw of the innovation covariance; a numerically non-SPD draw is
/// resampled once and then diagonally jittered.
pub fn draw_sigma<R: Rng + ?Sized>(
    path: &[Psi],
    mu: &Psi,
    alpha: &[f64; PSI_DIM],
    rng: &mut R,
) -> Result<PsiMatrix, HpDynError> {
    let (df, scale) = sigma_conditional_params(path, mu, alpha);
    let scale_d = DMatrix::from_fn(PSI_DIM, PSI_DIM, |i, j| scale[(i, j)]);
    for attempt in 0..2 {
        let draw = samplers::rinvwishart(df, &scale_d, rng)?;
        let mut sigma = PsiMatrix::from_fn(|i, j| draw[(i, j)]);
        if sigma.cholesky().is_some() {
            return Ok(sigma);
        }
        if attempt == 1 {
            let jitter = sigma.trace() / PSI_DIM as f64 * 1e-10;
            for _ in 0..30 {
                for i in 0..PSI_DIM {
                    sigma[(i, i)] += jitter;
                }
                if sigma.cholesky().is_some() {
                    return Ok(sigma);
                }
            }
        }
    }
    Err(HpDynError::NotPositiveDefinite)
}

/// Gibbs draw of the auxiliary scales given the innovation covariance.
pub fn draw_alpha<R: Rng + ?Sized>(
    sigma: &PsiMatrix,
    rng: &mut R,
) -> Result<[f64; PSI_DIM], HpDynError> {
    let ops = SigmaOps::new(sigma)?;
    let sigma_inv = ops.inverse();
    let shape = (HW_NU + PSI_DIM as f64) / 2.0;
    let mut alpha = [0.0; PSI_DIM];
    for i in 0..PSI_DIM {
        let rate = HW_NU * sigma_inv[(i, i)] + 1.0 / (HW_ELL * HW_ELL);
        alpha[i] = samplers::rinvgamma(shape, rate, rng)?;
    }
    Ok(alpha)
}

/// One Gibbs sweep over the hyperparameters, treating the transition
/// truncation normalizers as constant.
pub fn update_hypers<R: Rng + ?Sized>(
    path: &[Psi],
    hyper: &RwHyper,
    rng: &mut R,
) -> Result<RwHyper, HpDynError> {
    if path.len() < 2 {
        return Err(HpDynError::InvalidConfig(
            "hyperparameter updates need at least two years".into(),
        ));
    }
    let mu = draw_mu(path, &hyper.sigma, rng)?;
    let sigma = draw_sigma(path, &mu, &hyper.alpha, rng)?;
    let alpha = draw_alpha(&sigma, rng)?;
    RwHyper::new(mu, sigma, alpha)
}

/// Hyperparameter sweep with a Metropolis correction for the truncation
/// normalizers: the closed-form conditionals act as proposals and the
/// acceptance ratio is the product of estimated box-mass ratios. The mass
/// estimates are Monte Carlo, so the correction is approximate.
pub fn update_hypers_corrected<R: Rng + ?Sized>(
    path: &[Psi],
    hyper: &RwHyper,
    bounds: &TruncationBox,
    rng: &mut R,
) -> Result<RwHyper, HpDynError> {
    if path.len() < 2 {
        return Err(HpDynError::InvalidConfig(
            "hyperparameter updates need at least two years".into(),
        ));
    }
    let ln_mass_sum = |mu: &Psi,
                       sigma: &PsiMatrix,
                       rng: &mut R|
     -> Result<f64, HpDynError> {
        let mut s = 0.0;
        for t in 1..path.len() {
            s += ln_box_mass(&(path[t - 1] + mu), sigma, bounds, rng)?;
        }
        Ok(s)
    };

    let mut mu = hyper.mu;
    let mu_prop = draw_mu(path, &hyper.sigma, rng)?;
    let la = ln_mass_sum(&mu, &hyper.sigma, rng)? - ln_mass_sum(&mu_prop, &hyper.sigma, rng)?;
    if rng.random::<f64>().ln() < la {
        mu = mu_prop;
    }

    let mut sigma = hyper.sigma;
    let sigma_prop = draw_sigma(path, &mu, &hyper.alpha, rng)?;
    let la = ln_mass_sum(&mu, &sigma, rng)? - ln_mass_sum(&mu, &sigma_prop, rng)?;
    if rng.random::<f64>().ln() < la {
        sigma = sigma_prop;
    }

    let alpha = draw_alpha(&sigma, rng)?;
    RwHyper::new(mu, sigma, alpha)
}

/// Chain configuration for the dynamic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpChainConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Robbins-Monro acceptance target for the per-year proposal scales.
    pub accept_target: f64,
    /// Metropolis-correct the hyperparameter updates and state targets for
    /// the truncation normalizers (slower; default approximates them as
    /// constant).
    pub truncation_correction: bool,
}

impl Default for HpChainConfig {
    fn default() -> Self {
        HpChainConfig {
            iterations: 60_000,
            burnin: 20_000,
            thin: 10,
            seed: 0,
            accept_target: 0.25,
            truncation_correction: false,
        }
    }
}

impl HpChainConfig {
    pub fn validate(&self) -> Result<(), HpDynError> {
        if self.iterations == 0 || self.burnin >= self.iterations {
            return Err(HpDynError::InvalidConfig(
                "burn-in must be shorter than the run".into(),
            ));
        }
        if self.thin == 0 {
            return Err(HpDynError::InvalidConfig("thin must be positive".into()));
        }
        if !(self.accept_target > 0.0 && self.accept_target < 1.0) {
            return Err(HpDynError::InvalidConfig(
                "acceptance target must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct HpDraw {
    pub path: Vec<Psi>,
    pub mu: Psi,
    pub sigma: PsiMatrix,
    pub alpha: [f64; PSI_DIM],
}

/// Retained draws plus chain metadata.
#[derive(Debug, Clone)]
pub struct HpDraws {
    pub ages: Vec<u32>,
    pub year_first: i32,
    pub n_years: usize,
    pub bounds: TruncationBox,
    pub draws: Vec<HpDraw>,
    pub diagnostics: ChainDiagnostics,
    /// Final per-year proposal scales.
    pub scales: Vec<f64>,
}

impl HpDraws {
    pub fn last_observed_year(&self) -> i32 {
        self.year_first + self.n_years as i32 - 1
    }

    /// Whether every retained state of every draw lies inside the box.
    pub fn all_in_box(&self) -> bool {
        self.draws
            .iter()
            .all(|d| d.path.iter().all(|psi| self.bounds.contains(psi)))
    }
}

fn run_chain_inner(
    grid: &MortalityGrid,
    config: &HpChainConfig,
    mut plan: ProposalPlan,
    independence_first: bool,
) -> Result<HpDraws, HpDynError> {
    config.validate()?;
    let t_total = grid.n_years();
    if plan.n_years() != t_total {
        return Err(HpDynError::InvalidConfig(
            "proposal plan does not match the grid".into(),
        ));
    }
    let ages: Vec<u32> = grid.ages().collect();
    let d_cols: Vec<Vec<f64>> = (0..t_total)
        .map(|t| grid.deaths().column(t).iter().cloned().collect())
        .collect();
    let n_cols: Vec<Vec<f64>> = (0..t_total)
        .map(|t| grid.exposures().column(t).iter().cloned().collect())
        .collect();
    let bounds = TruncationBox::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut path: Vec<Psi> = plan.m.iter().map(|m| bounds.project(m)).collect();
    let mut hyper = RwHyper::default_init();
    let mut log_c: Vec<f64> = plan.c.iter().map(|c| c.ln()).collect();

    let mut draws = Vec::new();
    let mut acc_post = vec![0usize; t_total];
    let mut post_sweeps = 0usize;
    let track_years = {
        let mut ys = vec![0usize];
        if t_total > 2 {
            ys.push(t_total / 2);
        }
        if t_total > 1 {
            ys.push(t_total - 1);
        }
        ys
    };
    let mut trace_psi: Vec<Vec<f64>> = vec![Vec::new(); track_years.len() * PSI_DIM];
    let mut trace_mu: Vec<Vec<f64>> = vec![Vec::new(); PSI_DIM];

    for iter in 0..config.iterations {
        let first = independence_first && iter == 0;
        let ops = SigmaOps::new(&hyper.sigma)?;
        let mut accepted = vec![false; t_total];
        for t in 1..=t_total {
            accepted[t - 1] = state_update_cols(
                t,
                &mut path,
                &hyper,
                &ops,
                &plan,
                &d_cols[t - 1],
                &n_cols[t - 1],
                &ages,
                &bounds,
                first,
                config.truncation_correction,
                &mut rng,
            )?;
        }
        if t_total >= 2 {
            hyper = if config.truncation_correction {
                update_hypers_corrected(&path, &hyper, &bounds, &mut rng)?
            } else {
                update_hypers(&path, &hyper, &mut rng)?
            };
        }

        if iter > 0 && iter < config.burnin {
            for t in 0..t_total {
                let a = if accepted[t] { 1.0 } else { 0.0 };
                log_c[t] = robbins_monro_adapt(log_c[t], a, config.accept_target, iter);
                plan.c[t] = log_c[t].exp();
            }
        }
        if iter >= config.burnin {
            post_sweeps += 1;
            for t in 0..t_total {
                if accepted[t] {
                    acc_post[t] += 1;
                }
            }
            if (iter - config.burnin) % config.thin == 0 {
                for (yi, &ty) in track_years.iter().enumerate() {
                    for i in 0..PSI_DIM {
                        trace_psi[yi * PSI_DIM + i].push(path[ty][i]);
                    }
                }
                for i in 0..PSI_DIM {
                    trace_mu[i].push(hyper.mu[i]);
                }
                draws.push(HpDraw {
                    path: path.clone(),
                    mu: hyper.mu,
                    sigma: hyper.sigma,
                    alpha: hyper.alpha,
                });
            }
        }
    }

    let mut diagnostics = ChainDiagnostics::default();
    for t in 0..t_total {
        diagnostics.acceptance.insert(
            format!("psi_t{}", t + 1),
            acc_post[t] as f64 / post_sweeps.max(1) as f64,
        );
        diagnostics.tuning.insert(format!("c_t{}", t + 1), plan.c[t]);
    }
    for (yi, &ty) in track_years.iter().enumerate() {
        for i in 0..PSI_DIM {
            if let Ok(e) = samplers::ess(&trace_psi[yi * PSI_DIM + i]) {
                diagnostics
                    .ess
                    .insert(format!("psi{}_t{}", i, ty + 1), e.value);
            }
        }
    }
    for i in 0..PSI_DIM {
        if let Ok(e) = samplers::ess(&trace_mu[i]) {
            diagnostics.ess.insert(format!("mu{i}"), e.value);
        }
    }

    Ok(HpDraws {
        ages,
        year_first: grid.year_first(),
        n_years: t_total,
        bounds,
        draws,
        diagnostics,
        scales: plan.c,
    })
}

/// Run the Metropolis-within-Gibbs chain with likelihood-informed
/// proposals. With a single observed year the hyperparameters stay at
/// their initial values (there are no increments to learn from).
pub fn run_chain_hp(grid: &MortalityGrid, config: &HpChainConfig) -> Result<HpDraws, HpDynError> {
    let bounds = TruncationBox::default();
    let plan = build_proposal_plan(grid, &bounds)?;
    run_chain_inner(grid, config, plan, true)
}

/// Baseline chain for efficiency comparisons: identity proposal covariance
/// (plain random walk), same adaptation, no informed first sweep.
pub fn run_chain_hp_rw_baseline(
    grid: &MortalityGrid,
    config: &HpChainConfig,
) -> Result<HpDraws, HpDynError> {
    let bounds = TruncationBox::default();
    let t_total = grid.n_years();
    let start = bounds.project(&default_wls_start());
    let plan = ProposalPlan::from_parts(
        vec![start; t_total],
        vec![PsiMatrix::identity(); t_total],
        vec![0.01; t_total],
    )?;
    run_chain_inner(grid, config, plan, false)
}

/// Simulate the box-truncated walk forward `k` years from `start`, one
/// coordinate-Gibbs truncated-normal draw per year.
pub fn simulate_forward_states<R: Rng + ?Sized>(
    start: &Psi,
    mu: &Psi,
    sigma: &PsiMatrix,
    bounds: &TruncationBox,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Psi>, HpDynError> {
    let cov = DMatrix::from_fn(PSI_DIM, PSI_DIM, |i, j| sigma[(i, j)]);
    let lo = DVector::from_iterator(PSI_DIM, bounds.eta.iter().cloned());
    let hi = DVector::from_iterator(PSI_DIM, bounds.xi.iter().cloned());
    let mut states = Vec::with_capacity(k);
    let mut prev = *start;
    for _ in 0..k {
        let mean = DVector::from_iterator(PSI_DIM, (prev + mu).iter().cloned());
        let draw = samplers::rtmvnorm_gibbs(&mean, &cov, &lo, &hi, FORWARD_GIBBS_SWEEPS, rng)?;
        let psi = Psi::from_fn(|i, _| draw[i]);
        states.push(psi);
        prev = psi;
    }
    Ok(states)
}

/// Posterior-predictive death probabilities: for each retained draw the
/// walk is simulated `k` years past the data and mapped through the curve.
pub fn predict_forward<R: Rng + ?Sized>(
    draws: &HpDraws,
    k: usize,
    rng: &mut R,
) -> Result<ForecastDraws, HpDynError> {
    if k == 0 {
        return Err(HpDynError::InvalidConfig(
            "forecast horizon must be at least 1".into(),
        ));
    }
    if draws.draws.is_empty() {
        return Err(HpDynError::InvalidConfig("no retained draws".into()));
    }
    let n_ages = draws.ages.len();
    let mut samples = Vec::with_capacity(draws.draws.len());
    for draw in &draws.draws {
        let last = draw.path.last().expect("paths are nonempty");
        let states =
            simulate_forward_states(last, &draw.mu, &draw.sigma, &draws.bounds, k, rng)?;
        let mut p = vec![0.0; n_ages * k];
        for (zi, &age) in draws.ages.iter().enumerate() {
            for (j, psi) in states.iter().enumerate() {
                p[zi * k + j] = hp_prob(age, psi);
            }
        }
        samples.push(p);
    }
    Ok(ForecastDraws {
        model: "hp".into(),
        age_lo: draws.ages[0],
        n_ages,
        horizons: k,
        last_observed_year: draws.last_observed_year(),
        samples,
    })
}
