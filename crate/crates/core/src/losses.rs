//! Supervision quantities for the embedding and geometry models, written as
//! plain scalar functions of their matrix arguments.
//!
//! Everything geometric here is pose invariant: replacing a factor `V` by
//! `V·Q + 1·tᵀ` with `Q ∈ O(d)` leaves the value unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{center_unchecked, knn_indices, procrustes_align, rows_of, squared_euclidean, GramMatrix, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VicRegConfig {
    pub lambda_inv: f64,
    pub lambda_var: f64,
    pub lambda_cov: f64,
    pub gamma: f64,
}

impl Default for VicRegConfig {
    fn default() -> Self {
        Self { lambda_inv: 25.0, lambda_var: 25.0, lambda_cov: 1.0, gamma: 1.0 }
    }
}

impl VicRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_inv < 0.0 || self.lambda_var < 0.0 || self.lambda_cov < 0.0 {
            return Err(invalid_arg("VICReg weights must be non-negative"));
        }
        if !(self.gamma > 0.0) {
            return Err(invalid_arg("VICReg gamma must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicRegTerms {
    pub inv: f64,
    pub var: f64,
    pub cov: f64,
    pub total: f64,
}

/// Invariance, variance-hinge and covariance terms for two batches of views.
///
/// Batch statistics use the unbiased `B − 1` denominator with no epsilon, so a
/// batch whose per-dimension standard deviation is exactly `gamma` incurs no
/// variance penalty.
pub fn vicreg_loss(z1: &Mat, z2: &Mat, cfg: &VicRegConfig) -> Result<VicRegTerms> {
    cfg.validate()?;
    if z1.shape() != z2.shape() {
        return Err(invalid_arg("VICReg views must have the same shape"));
    }
    let (b, h) = z1.shape();
    if b < 2 {
        return Err(invalid_arg("VICReg needs a batch of at least 2"));
    }
    if h == 0 {
        return Err(invalid_arg("VICReg needs at least one embedding dimension"));
    }
    let inv = (z1 - z2).norm_squared();
    let mut var = 0.0;
    let mut cov = 0.0;
    for z in [z1, z2] {
        let c = batch_covariance(z);
        for j in 0..h {
            var += (cfg.gamma - c[(j, j)].max(0.0).sqrt()).max(0.0);
            for i in 0..h {
                if i != j {
                    cov += c[(i, j)] * c[(i, j)];
                }
            }
        }
    }
    let total = cfg.lambda_inv * inv + cfg.lambda_var * var + cfg.lambda_cov * cov;
    Ok(VicRegTerms { inv, var, cov, total })
}

fn batch_covariance(z: &Mat) -> Mat {
    let zc = center_unchecked(z);
    zc.transpose() * &zc / (z.nrows() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub dropout_rate: f64,
    pub noise_std: f64,
    pub jitter_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { dropout_rate: 0.3, noise_std: 0.015, jitter_range: 0.25 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid_arg("dropout_rate must lie in [0, 1)"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid_arg("noise_std must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.jitter_range) {
            return Err(invalid_arg("jitter_range must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Gene dropout, additive Gaussian noise, then a whole-vector scale jitter.
pub fn augment(x: &[f64], cfg: &AugmentConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("expression vector has non-finite entries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| invalid_arg(e.to_string()))?;
    let mut out: Vec<f64> = x
        .iter()
        .map(|&v| {
            let kept = if cfg.dropout_rate > 0.0 && rng.random::<f64>() < cfg.dropout_rate { 0.0 } else { v };
            if cfg.noise_std > 0.0 {
                kept + noise.sample(&mut rng)
            } else {
                kept
            }
        })
        .collect();
    if cfg.jitter_range > 0.0 {
        let u = rng.random_range(1.0 - cfg.jitter_range..1.0 + cfg.jitter_range);
        out.iter_mut().for_each(|v| *v *= u);
    }
    Ok(out)
}

/// Weights for the auxiliary geometry losses and the noise gate shared by
/// Gram, NCA and overlap terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub k_nca: usize,
    pub tau_nca: f64,
    pub w_gram: f64,
    pub w_gram_scale: f64,
    pub w_nca: f64,
    pub w_overlap: f64,
    pub sigma_gate: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k_nca: 15,
            tau_nca: 0.5,
            w_gram: 1.0,
            w_gram_scale: 0.5,
            w_nca: 1.0,
            w_overlap: 1.0,
            sigma_gate: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_nca < 1 {
            return Err(invalid_arg("k_nca must be at least 1"));
        }
        if !(self.tau_nca > 0.0) {
            return Err(invalid_arg("tau_nca must be positive"));
        }
        Ok(())
    }

    /// Geometry losses only apply at high SNR.
    pub fn gate_open(&self, sigma: f64) -> bool {
        sigma < self.sigma_gate
    }
}

fn trace_gram(v: &Mat) -> f64 {
    v.norm_squared()
}

/// `‖V·Vᵀ − G‖²_F / ‖G‖²_F` with `V` centered first.
pub fn gram_loss(v_pred: &Mat, g_target: &GramMatrix) -> Result<f64> {
    if v_pred.nrows() != g_target.dim() {
        return Err(invalid_arg("gram_loss: row count does not match target"));
    }
    let denom = g_target.values().norm_squared();
    if denom == 0.0 {
        return Err(Error::DegenerateTarget("target Gram matrix has zero norm".into()));
    }
    let vc = center_unchecked(v_pred);
    let g_pred = &vc * vc.transpose();
    Ok((g_pred - g_target.values()).norm_squared() / denom)
}

/// `(log tr G_pred − log tr G_target)²`.
pub fn gram_scale_loss(v_pred: &Mat, g_target: &GramMatrix) -> Result<f64> {
    if v_pred.nrows() != g_target.dim() {
        return Err(invalid_arg("gram_scale_loss: row count does not match target"));
    }
    let tp = trace_gram(&center_unchecked(v_pred));
    let tt = g_target.trace();
    if !(tp > 0.0) || !(tt > 0.0) {
        return Err(Error::DegenerateTarget("Gram trace must be positive".into()));
    }
    let r = tp.ln() - tt.ln();
    Ok(r * r)
}

/// Indices of the `k` nearest rows of each row (self excluded, ties by index).
pub fn knn_sets(v: &Mat, k: usize) -> Vec<Vec<usize>> {
    knn_indices(v, k)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Neighborhood-component loss of predicted geometry against target kNN sets.
pub fn nca_loss(v_pred: &Mat, target_neighbors: &[Vec<usize>], tau: f64) -> Result<f64> {
    let n = v_pred.nrows();
    if n < 3 {
        return Err(invalid_arg("nca_loss needs at least 3 points"));
    }
    if target_neighbors.len() != n {
        return Err(invalid_arg("one neighbor set per row is required"));
    }
    if !(tau > 0.0) {
        return Err(invalid_arg("temperature must be positive"));
    }
    let rows = rows_of(v_pred);
    let mut total = 0.0;
    for (i, nbrs) in target_neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            return Err(invalid_arg(format!("neighbor set of row {i} is empty")));
        }
        if nbrs.iter().any(|&j| j == i || j >= n) {
            return Err(invalid_arg(format!("neighbor set of row {i} is invalid")));
        }
        let logit = |j: usize| -squared_euclidean(&rows[i], &rows[j]) / tau;
        let num = log_sum_exp(nbrs.iter().map(|&j| logit(j)));
        let den = log_sum_exp((0..n).filter(|&j| j != i).map(logit));
        total -= num - den;
    }
    // The ratio never exceeds one; clamp rounding.
    Ok(total.max(0.0))
}

/// Mean squared log-ratio of predicted to target edge lengths.
pub fn edge_log_scale_loss(v_pred: &Mat, v_target: &Mat, edges: &[(usize, usize)]) -> Result<f64> {
    if edges.is_empty() {
        return Err(invalid_arg("edge_log_scale_loss needs at least one edge"));
    }
    if v_pred.nrows() != v_target.nrows() {
        return Err(invalid_arg("edge_log_scale_loss: row count mismatch"));
    }
    let p = rows_of(v_pred);
    let t = rows_of(v_target);
    let mut acc = 0.0;
    for &(i, j) in edges {
        let dt = squared_euclidean(&t[i], &t[j]).sqrt();
        if dt == 0.0 {
            return Err(Error::DegenerateEdge(format!("target edge ({i}, {j}) has zero length")));
        }
        let dp = squared_euclidean(&p[i], &p[j]).sqrt();
        let r = dp.ln() - dt.ln();
        acc += r * r;
    }
    Ok(acc / edges.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLosses {
    pub align: f64,
    pub gram: f64,
}

/// Procrustes-aligned regression and the unnormalized Gram loss of a proposal.
pub fn generator_losses(v_base: &Mat, v_target_aligned: &Mat) -> Result<GeneratorLosses> {
    let fit = procrustes_align(v_base, v_target_aligned)?;
    let align = (&fit.aligned - center_unchecked(v_target_aligned)).norm_squared();
    let b = center_unchecked(v_base);
    let t = center_unchecked(v_target_aligned);
    let gram = (&b * b.transpose() - &t * t.transpose()).norm_squared();
    Ok(GeneratorLosses { align, gram })
}

/// Optional proposal-magnitude term `(log RMS(V_base) − log RMS(V_target))²`.
pub fn log_rms_scale_loss(v_base: &Mat, v_target: &Mat) -> Result<f64> {
    let rms = |m: &Mat| (center_unchecked(m).norm_squared() / m.nrows().max(1) as f64).sqrt();
    let (a, b) = (rms(v_base), rms(v_target));
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::DegenerateTarget("RMS scale must be positive".into()));
    }
    let r = a.ln() - b.ln();
    Ok(r * r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapTerms {
    pub shape: f64,
    pub scale: f64,
}

/// Shape and log-trace scale disagreement of two views of the same shared set.
pub fn overlap_consistency(v1: &Mat, v2: &Mat) -> Result<OverlapTerms> {
    if v1.nrows() != v2.nrows() {
        return Err(invalid_arg("overlap views must cover the same shared set"));
    }
    if v1.nrows() < 2 {
        return Err(invalid_arg("overlap needs at least 2 shared points"));
    }
    let a = center_unchecked(v1);
    let b = center_unchecked(v2);
    let (t1, t2) = (trace_gram(&a), trace_gram(&b));
    if !(t1 > 0.0) || !(t2 > 0.0) {
        return Err(Error::DegenerateOverlap("overlap Gram trace is zero".into()));
    }
    let g1 = &a * a.transpose() / t1;
    let g2 = &b * b.transpose() / t2;
    let s = t1.ln() - t2.ln();
    Ok(OverlapTerms { shape: (g1 - g2).norm_squared(), scale: s * s })
}

/// Symmetric KL between row-softmax distributions of `−D²/τ` on the shared
/// set, averaged over rows.
pub fn overlap_neighborhood_kl(v1: &Mat, v2: &Mat, tau: f64) -> Result<f64> {
    if v1.nrows() != v2.nrows() {
        return Err(invalid_arg("overlap views must cover the same shared set"));
    }
    let n = v1.nrows();
    if n < 3 {
        return Err(invalid_arg("neighborhood KL needs at least 3 shared points"));
    }
    if !(tau > 0.0) {
        return Err(invalid_arg("temperature must be positive"));
    }
    let (r1, r2) = (rows_of(v1), rows_of(v2));
    let log_softmax = |rows: &[Vec<f64>], i: usize| -> Vec<f64> {
        let logits: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| -squared_euclidean(&rows[i], &rows[j]) / tau)
            .collect();
        let lse = log_sum_exp(logits.iter().copied());
        logits.into_iter().map(|l| l - lse).collect()
    };
    let mut total = 0.0;
    for i in 0..n {
        let lp = log_softmax(&r1, i);
        let lq = log_softmax(&r2, i);
        for (a, b) in lp.iter().zip(&lq) {
            total += (a.exp() - b.exp()) * (a - b);
        }
    }
    Ok(total / n as f64)
}
