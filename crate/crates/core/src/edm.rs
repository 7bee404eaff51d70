//! EDM preconditioning, residual targets, curriculum noise levels and a
//! deterministic probability-flow sampler over a pluggable denoiser.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{center_unchecked, procrustes_align, GeometryFactor, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub sigma_data: f64,
    /// Defaults to `0.01·sigma_data`.
    pub sigma_min: Option<f64>,
    /// Defaults to `3·sigma_data`.
    pub sigma_max: Option<f64>,
    pub n_stages: usize,
    pub steps: usize,
    pub strata: usize,
    /// Stage-1 noise cap; defaults to the geometric mean of the range.
    pub early_cap: Option<f64>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { sigma_data: 1.0, sigma_min: None, sigma_max: None, n_stages: 3, steps: 600, strata: 8, early_cap: None }
    }
}

impl DiffusionConfig {
    pub fn with_sigma_data(sigma_data: f64) -> Self {
        Self { sigma_data, ..Self::default() }
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min.unwrap_or(0.01 * self.sigma_data)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max.unwrap_or(3.0 * self.sigma_data)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(invalid_arg("sigma_data must be positive"));
        }
        let (lo, hi) = (self.sigma_min(), self.sigma_max());
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(invalid_arg("need 0 < sigma_min < sigma_max"));
        }
        if self.steps < 1 {
            return Err(invalid_arg("steps must be at least 1"));
        }
        if self.n_stages < 1 {
            return Err(invalid_arg("n_stages must be at least 1"));
        }
        if self.strata < 1 {
            return Err(invalid_arg("strata must be at least 1"));
        }
        if let Some(c) = self.early_cap {
            if !(c > lo && c <= hi) {
                return Err(invalid_arg("early_cap must lie in (sigma_min, sigma_max]"));
            }
        }
        Ok(())
    }

    /// Upper end of the noise range at a curriculum stage (1-based).
    pub fn sigma_cap(&self, stage: usize) -> Result<f64> {
        self.validate()?;
        if stage < 1 || stage > self.n_stages {
            return Err(invalid_arg(format!("stage {stage} outside 1..={}", self.n_stages)));
        }
        let (lo, hi) = (self.sigma_min(), self.sigma_max());
        if stage == self.n_stages {
            return Ok(hi);
        }
        let first = self.early_cap.unwrap_or((lo * hi).sqrt());
        let t = (stage - 1) as f64 / (self.n_stages - 1) as f64;
        Ok((first.ln() + t * (hi.ln() - first.ln())).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmCoefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

fn check_positive(sigma: f64, sigma_data: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) || !(sigma_data > 0.0 && sigma_data.is_finite()) {
        return Err(invalid_arg("sigma and sigma_data must be positive and finite"));
    }
    Ok(())
}

pub fn edm_coefficients(sigma: f64, sigma_data: f64) -> Result<EdmCoefficients> {
    check_positive(sigma, sigma_data)?;
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(EdmCoefficients {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    })
}

pub fn edm_loss_weight(sigma: f64, sigma_data: f64) -> Result<f64> {
    check_positive(sigma, sigma_data)?;
    let sd = sigma * sigma_data;
    Ok((sigma * sigma + sigma_data * sigma_data) / (sd * sd))
}

/// Clean-estimate function `(noisy, σ) → estimate` with any context captured
/// by the implementor.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, noisy: &Mat, sigma: f64) -> Mat;
}

/// Raw network `F(c_in·x, c_noise)` before EDM preconditioning.
pub trait InnerNetwork: Send + Sync {
    fn forward(&self, scaled_input: &Mat, c_noise: f64) -> Mat;
}

/// `c_skip·x + c_out·F(c_in·x, c_noise)`.
pub struct Preconditioned<F> {
    pub inner: F,
    pub sigma_data: f64,
}

impl<F: InnerNetwork> Denoiser for Preconditioned<F> {
    fn denoise(&self, noisy: &Mat, sigma: f64) -> Mat {
        let c = edm_coefficients(sigma, self.sigma_data).expect("positive sigma");
        let f = self.inner.forward(&(noisy * c.c_in), c.c_noise);
        noisy * c.c_skip + f * c.c_out
    }
}

/// Posterior mean for an isotropic Gaussian prior `N(μ, s²I)`.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub mu: Mat,
    pub s: f64,
}

impl GaussianDenoiser {
    pub fn posterior_mean(&self, x: &Mat, sigma: f64) -> Mat {
        let (s2, v2) = (self.s * self.s, sigma * sigma);
        (x * s2 + &self.mu * v2) / (s2 + v2)
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, noisy: &Mat, sigma: f64) -> Mat {
        self.posterior_mean(noisy, sigma)
    }
}

/// Inner network whose preconditioned output is the Gaussian posterior mean.
#[derive(Debug, Clone)]
pub struct GaussianInnerNetwork {
    pub prior: GaussianDenoiser,
    pub sigma_data: f64,
}

impl InnerNetwork for GaussianInnerNetwork {
    fn forward(&self, scaled_input: &Mat, c_noise: f64) -> Mat {
        let sigma = (4.0 * c_noise).exp();
        let c = edm_coefficients(sigma, self.sigma_data).expect("positive sigma");
        let x = scaled_input / c.c_in;
        (self.prior.posterior_mean(&x, sigma) - &x * c.c_skip) / c.c_out
    }
}

pub struct ConstantDenoiser(pub Mat);

impl Denoiser for ConstantDenoiser {
    fn denoise(&self, _noisy: &Mat, _sigma: f64) -> Mat {
        self.0.clone()
    }
}

/// `(V_target aligned onto V_base, V_target_aligned − V_base)`.
pub fn residual_target(v_target: &GeometryFactor, v_base: &GeometryFactor) -> Result<(Mat, Mat)> {
    let fit = procrustes_align(v_target, v_base)?;
    let r = &fit.aligned - center_unchecked(v_base);
    Ok((fit.aligned, r))
}

/// `w(σ)·‖(D(R + σ·ε, σ) − R) ⊙ M‖²_F` with an optional row-validity mask.
pub fn score_loss(
    r_target: &Mat,
    sigma: f64,
    sigma_data: f64,
    noise: &Mat,
    denoiser: &dyn Denoiser,
    mask: Option<&[f64]>,
) -> Result<f64> {
    if noise.shape() != r_target.shape() {
        return Err(invalid_arg("noise shape must match the residual"));
    }
    if let Some(m) = mask {
        if m.len() != r_target.nrows() {
            return Err(invalid_arg("mask needs one entry per row"));
        }
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid_arg("mask entries must be 0 or 1"));
        }
    }
    let w = edm_loss_weight(sigma, sigma_data)?;
    let est = denoiser.denoise(&(r_target + noise * sigma), sigma);
    if est.shape() != r_target.shape() {
        return Err(Error::NumericalFailure("denoiser changed the shape".into()));
    }
    let diff = est - r_target;
    let mut acc = 0.0;
    for i in 0..diff.nrows() {
        let m = mask.map_or(1.0, |m| m[i]);
        if m != 0.0 {
            acc += diff.row(i).norm_squared();
        }
    }
    Ok(w * acc)
}

fn log_uniform(lo: f64, hi: f64, u: f64) -> f64 {
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

/// One log-uniform draw on `[sigma_min, σ_cap(stage)]`.
pub fn sample_sigma<R: Rng + ?Sized>(stage: usize, cfg: &DiffusionConfig, rng: &mut R) -> Result<f64> {
    let cap = cfg.sigma_cap(stage)?;
    Ok(log_uniform(cfg.sigma_min(), cap, rng.random::<f64>()))
}

/// `count` draws stratified in log-space: draw `k` lands in stratum
/// `k mod strata`, so every block of `strata` draws covers each stratum once.
pub fn sample_sigma_batch<R: Rng + ?Sized>(
    stage: usize,
    cfg: &DiffusionConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cap = cfg.sigma_cap(stage)?;
    let k = cfg.strata as f64;
    Ok((0..count)
        .map(|i| {
            let u = ((i % cfg.strata) as f64 + rng.random::<f64>()) / k;
            log_uniform(cfg.sigma_min(), cap, u.min(1.0))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(invalid_arg("schedule must be non-empty"));
        }
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid_arg("schedule levels must be positive"));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid_arg("schedule must be strictly decreasing"));
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// `steps` levels spaced log-linearly from `sigma_max` down to `sigma_min`.
pub fn make_schedule(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let (lo, hi) = (cfg.sigma_min(), cfg.sigma_max());
    let l = cfg.steps;
    if l == 1 {
        return NoiseSchedule::new(vec![hi]);
    }
    let sigmas = (0..l)
        .map(|i| {
            if i == 0 {
                hi
            } else if i == l - 1 {
                lo
            } else {
                let t = i as f64 / (l - 1) as f64;
                (hi.ln() + t * (lo.ln() - hi.ln())).exp()
            }
        })
        .collect();
    NoiseSchedule::new(sigmas)
}

fn checked(m: Mat, sigma: f64) -> Result<Mat> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(Error::NumericalFailure(format!("denoiser returned non-finite values at sigma = {sigma}")))
    }
}

/// Probability-flow Euler integration from a given initial residual.
pub fn integrate_residual(
    v_base: &Mat,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    init: Mat,
) -> Result<Mat> {
    if init.shape() != v_base.shape() {
        return Err(invalid_arg("initial residual must match the proposal shape"));
    }
    let s = schedule.sigmas();
    let mut r = init;
    for w in s.windows(2) {
        let d = checked(denoiser.denoise(&r, w[0]), w[0])?;
        r += (&r - d) * ((w[1] - w[0]) / w[0]);
    }
    let last = s[s.len() - 1];
    let d = checked(denoiser.denoise(&r, last), last)?;
    if d.shape() != v_base.shape() {
        return Err(Error::NumericalFailure("denoiser changed the shape".into()));
    }
    Ok(v_base + d)
}

/// `V_base + R̂₀` with `R` initialized from `N(0, σ₁²I)`.
pub fn sample_residual<R: Rng + ?Sized>(
    v_base: &Mat,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Mat> {
    let s1 = schedule.sigmas()[0];
    let init = Mat::from_fn(v_base.nrows(), v_base.ncols(), |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        s1 * z
    });
    integrate_residual(v_base, denoiser, schedule, init)
}
