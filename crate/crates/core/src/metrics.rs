//! Evaluation of reconstructed geometry against ground truth: global
//! distance agreement, local edge and shell recovery, neighborhood rank
//! quality, distributional distances, length-scale calibration and the
//! blockwise distance-distortion map.
//!
//! Every function takes dense distance matrices; pairwise quantities are
//! taken over the strict upper triangle. Undefined values (a constant
//! distance vector, an empty class) come back as `None` and serialize as
//! `null` in [`MetricsReport`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_input, Error, Result};
use crate::geometry::{center_unchecked, ensure_finite, pairwise_distances, Mat};
use crate::io::{atomic_write, fmt_f64, write_json};
use crate::stitching::quantile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShellMode {
    /// Radii `s·R_k` for `s = 1..S`.
    #[default]
    Multiples,
    /// Radii at the `s/S` quantiles of the GT pair distances.
    Quantiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    /// Angles `π·ℓ/L` for `ℓ = 0..L`.
    #[default]
    LowDiscrepancy,
    /// Uniform angles drawn from `seed`.
    Seeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub k: usize,
    pub n_shells: usize,
    pub n_projections: usize,
    pub lrmse_ks: Vec<usize>,
    pub shell_mode: ShellMode,
    pub projection_mode: ProjectionMode,
    /// Rotate/reflect the canonicalized prediction onto the ground truth
    /// before projecting (off: frames are compared as given).
    pub swd_align: bool,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            k: 20,
            n_shells: 5,
            n_projections: 128,
            lrmse_ks: vec![10, 20, 50, 100],
            shell_mode: ShellMode::Multiples,
            projection_mode: ProjectionMode::LowDiscrepancy,
            swd_align: false,
            seed: 0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid_arg("metrics.k must be at least 1"));
        }
        if self.n_shells == 0 {
            return Err(invalid_arg("metrics.n_shells must be at least 1"));
        }
        if self.n_projections == 0 {
            return Err(invalid_arg("metrics.n_projections must be at least 1"));
        }
        if self.lrmse_ks.contains(&0) {
            return Err(invalid_arg("metrics.lrmse_ks entries must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub stress1: Option<f64>,
    pub edge_roc_auc: Option<f64>,
    pub bap: Option<f64>,
    pub shell_f1_macro: Option<f64>,
    pub trust_at_k: Option<f64>,
    pub cont_at_k: Option<f64>,
    pub swd: Option<f64>,
    pub w1_knn: Option<f64>,
    pub cal_err: Option<f64>,
    pub lrmse: BTreeMap<usize, Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalMetrics {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub stress1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeMetrics {
    pub roc_auc: Option<f64>,
    pub bap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub trust: f64,
    pub cont: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionMetrics {
    pub swd: f64,
    pub w1_knn: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMetrics {
    pub cal_err: f64,
    pub lrmse: BTreeMap<usize, f64>,
}

fn check_pair(d: &Mat, d_gt: &Mat) -> Result<usize> {
    let n = d_gt.nrows();
    if d_gt.ncols() != n || d.nrows() != n || d.ncols() != n {
        return Err(invalid_input(format!(
            "distance matrices must be square and equal-sized, got {}x{} and {}x{}",
            d.nrows(),
            d.ncols(),
            d_gt.nrows(),
            d_gt.ncols()
        )));
    }
    ensure_finite(d)?;
    ensure_finite(d_gt)?;
    Ok(n)
}

/// Strict upper triangle, row-major.
pub fn upper_triangle(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// 1-based ranks with tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.par_sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && v[idx[e]] == v[idx[s]] {
            e += 1;
        }
        let r = (s + e + 1) as f64 / 2.0;
        for &i in &idx[s..e] {
            ranks[i] = r;
        }
        s = e;
    }
    ranks
}

/// Pearson correlation, `None` when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    // sqrt(x·x) == x exactly, so identical inputs give exactly 1.
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn global_distance_metrics(d: &Mat, d_gt: &Mat) -> Result<GlobalMetrics> {
    let n = check_pair(d, d_gt)?;
    if n < 3 {
        return Err(invalid_input("global metrics need at least 3 points"));
    }
    let a = upper_triangle(d);
    let b = upper_triangle(d_gt);
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        return Err(Error::DegenerateTarget("all ground-truth distances are zero".into()));
    }
    let spearman = pearson(&average_ranks(&a), &average_ranks(&b));
    Ok(GlobalMetrics {
        spearman,
        pearson: pearson(&a, &b),
        stress1: (num / den).sqrt(),
    })
}

/// `argmin_s Σ (s·d − d_gt)²` over the upper triangle.
pub fn optimal_scale(d: &Mat, d_gt: &Mat) -> f64 {
    let a = upper_triangle(d);
    let b = upper_triangle(d_gt);
    let num: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Stress-1 of `s·D` against `D_GT` with `s` from [`optimal_scale`].
pub fn scaled_stress1(d: &Mat, d_gt: &Mat) -> Result<f64> {
    let s = optimal_scale(d, d_gt);
    Ok(global_distance_metrics(&(d * s), d_gt)?.stress1)
}

/// Neighbor order of every row (self excluded), ties broken by index.
fn sorted_neighbors(d: &Mat) -> Vec<Vec<usize>> {
    let n = d.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            idx.sort_by(|&a, &b| d[(i, a)].total_cmp(&d[(i, b)]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Distance to the `k`-th nearest neighbor of each row.
fn kth_radii(d: &Mat, k: usize) -> Vec<f64> {
    let n = d.nrows();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[(i, j)]).collect();
            let (_, kth, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// `R_k`: median over points of the `k`-th smallest GT distance.
pub fn neighborhood_radius(d_gt: &Mat, k: usize) -> Result<f64> {
    let n = d_gt.nrows();
    if k == 0 || k >= n {
        return Err(invalid_arg(format!("neighborhood size k = {k} needs 1 <= k < N = {n}")));
    }
    Ok(median(kth_radii(d_gt, k)))
}

/// ROC-AUC and class-balanced AP for separating pairs with `D_GT ≤ R` from
/// the rest by the score `−D`.
pub fn edge_classification_metrics(d: &Mat, d_gt: &Mat, r: f64) -> Result<EdgeMetrics> {
    check_pair(d, d_gt)?;
    let scores: Vec<f64> = upper_triangle(d).into_iter().map(|x| -x).collect();
    let labels: Vec<bool> = upper_triangle(d_gt).into_iter().map(|x| x <= r).collect();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(EdgeMetrics { roc_auc: None, bap: None });
    }
    let ranks = average_ranks(&scores);
    let pos_rank_sum: f64 = ranks.iter().zip(&labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let auc = (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);

    let (wp, wn) = (1.0 / np, 1.0 / nn);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.par_sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0, 0.0);
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e < idx.len() && scores[idx[e]] == scores[idx[s]] {
            if labels[idx[e]] {
                tp += wp;
            } else {
                fp += wn;
            }
            e += 1;
        }
        let recall = tp;
        if recall > prev_recall {
            ap += (recall - prev_recall) * tp / (tp + fp);
            prev_recall = recall;
        }
        s = e;
    }
    Ok(EdgeMetrics {
        roc_auc: Some(auc),
        bap: Some(ap),
    })
}

/// Shell radii `s·r` for `s = 1..=n_shells`.
pub fn multiple_radii(r: f64, n_shells: usize) -> Vec<f64> {
    (1..=n_shells).map(|s| s as f64 * r).collect()
}

/// Shell radii at the `s/n_shells` quantiles of the GT pair distances.
pub fn quantile_radii(d_gt: &Mat, n_shells: usize) -> Vec<f64> {
    let mut v = upper_triangle(d_gt);
    v.par_sort_by(f64::total_cmp);
    (1..=n_shells)
        .map(|s| quantile_sorted(&v, s as f64 / n_shells as f64))
        .collect()
}

/// Macro F1 over shells `(r_{s−1}, r_s]` with `r_0 = 0` and radii `s·r`.
pub fn shell_f1(d: &Mat, d_gt: &Mat, r: f64, n_shells: usize) -> Result<f64> {
    if n_shells == 0 {
        return Err(invalid_arg("shell count must be at least 1"));
    }
    shell_f1_with_radii(d, d_gt, &multiple_radii(r, n_shells))
}

/// Macro F1 for explicit increasing radii.
pub fn shell_f1_with_radii(d: &Mat, d_gt: &Mat, radii: &[f64]) -> Result<f64> {
    check_pair(d, d_gt)?;
    if radii.is_empty() {
        return Err(invalid_arg("shell radii must be nonempty"));
    }
    let shell_of = |x: f64| -> Option<usize> {
        if x <= 0.0 {
            return None;
        }
        radii.iter().position(|&r| x <= r)
    };
    let s = radii.len();
    let mut tp = vec![0usize; s];
    let mut pred = vec![0usize; s];
    let mut gt = vec![0usize; s];
    for (a, b) in upper_triangle(d).into_iter().zip(upper_triangle(d_gt)) {
        let sp = shell_of(a);
        let sg = shell_of(b);
        if let Some(p) = sp {
            pred[p] += 1;
        }
        if let Some(g) = sg {
            gt[g] += 1;
            if sp == Some(g) {
                tp[g] += 1;
            }
        }
    }
    let total: f64 = (0..s)
        .map(|i| {
            if tp[i] == 0 {
                return 0.0;
            }
            let p = tp[i] as f64 / pred[i] as f64;
            let r = tp[i] as f64 / gt[i] as f64;
            2.0 * p * r / (p + r)
        })
        .sum();
    Ok(total / s as f64)
}

/// Trustworthiness and continuity at `k`.
pub fn rank_metrics(d: &Mat, d_gt: &Mat, k: usize) -> Result<RankMetrics> {
    let n = check_pair(d, d_gt)?;
    if k == 0 || k >= n || 2 * n <= 3 * k + 1 {
        return Err(invalid_arg(format!("rank metrics need 1 <= k < N and 2N - 3k - 1 > 0 (N = {n}, k = {k})")));
    }
    let gt_order = sorted_neighbors(d_gt);
    let pred_order = sorted_neighbors(d);
    let penalties: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rank_of = |order: &[usize]| {
                let mut r = vec![0usize; n];
                for (pos, &j) in order.iter().enumerate() {
                    r[j] = pos + 1;
                }
                r
            };
            let r_gt = rank_of(&gt_order[i]);
            let r_pred = rank_of(&pred_order[i]);
            let mut t = 0.0;
            for &j in &pred_order[i][..k] {
                if r_gt[j] > k {
                    t += (r_gt[j] - k) as f64;
                }
            }
            let mut c = 0.0;
            for &j in &gt_order[i][..k] {
                if r_pred[j] > k {
                    c += (r_pred[j] - k) as f64;
                }
            }
            (t, c)
        })
        .collect();
    let (nf, kf) = (n as f64, k as f64);
    let norm = 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0));
    let t: f64 = penalties.iter().map(|p| p.0).sum();
    let c: f64 = penalties.iter().map(|p| p.1).sum();
    Ok(RankMetrics {
        trust: 1.0 - norm * t,
        cont: 1.0 - norm * c,
    })
}

/// Center and scale to unit root-mean-square radius.
pub fn canonicalize(x: &Mat) -> Mat {
    let c = center_unchecked(x);
    let rms = (c.norm_squared() / c.nrows() as f64).sqrt();
    if rms > 0.0 {
        c / rms
    } else {
        c
    }
}

/// Projection angles for the sliced Wasserstein distance.
pub fn projection_angles(cfg: &MetricsConfig) -> Vec<f64> {
    let l = cfg.n_projections;
    match cfg.projection_mode {
        ProjectionMode::LowDiscrepancy => (0..l).map(|i| std::f64::consts::PI * i as f64 / l as f64).collect(),
        ProjectionMode::Seeded => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..l).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect()
        }
    }
}

/// W₁ between two equal-size empirical distributions.
pub fn wasserstein1_equal(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Sliced W₁ between canonicalized planar point sets.
pub fn sliced_wasserstein(x: &Mat, x_gt: &Mat, angles: &[f64]) -> Result<f64> {
    if x.nrows() != x_gt.nrows() || x.ncols() != 2 || x_gt.ncols() != 2 {
        return Err(invalid_arg(format!(
            "sliced Wasserstein needs two N×2 sets of equal size, got {}x{} and {}x{}",
            x.nrows(),
            x.ncols(),
            x_gt.nrows(),
            x_gt.ncols()
        )));
    }
    if angles.is_empty() {
        return Err(invalid_arg("at least one projection is required"));
    }
    let a = canonicalize(x);
    let b = canonicalize(x_gt);
    let per_angle: Vec<f64> = angles
        .par_iter()
        .map(|&t| {
            let (c, s) = (t.cos(), t.sin());
            let pa: Vec<f64> = (0..a.nrows()).map(|i| c * a[(i, 0)] + s * a[(i, 1)]).collect();
            let pb: Vec<f64> = (0..b.nrows()).map(|i| c * b[(i, 0)] + s * b[(i, 1)]).collect();
            wasserstein1_equal(&pa, &pb)
        })
        .collect();
    Ok(per_angle.iter().sum::<f64>() / angles.len() as f64)
}

fn swd_for(x: &Mat, x_gt: &Mat, cfg: &MetricsConfig) -> Result<f64> {
    let angles = projection_angles(cfg);
    if cfg.swd_align {
        let aligned = crate::geometry::procrustes_align(&canonicalize(x), &canonicalize(x_gt))?.aligned;
        sliced_wasserstein(&aligned, x_gt, &angles)
    } else {
        sliced_wasserstein(x, x_gt, &angles)
    }
}

/// Pooled distances from every point to its `k` nearest neighbors.
fn knn_distance_pool(d: &Mat, k: usize) -> Vec<f64> {
    sorted_neighbors(d)
        .iter()
        .enumerate()
        .flat_map(|(i, order)| order[..k].iter().map(move |&j| (i, j)))
        .map(|(i, j)| d[(i, j)])
        .collect()
}

pub fn distribution_metrics(x: &Mat, x_gt: &Mat, d: &Mat, d_gt: &Mat, cfg: &MetricsConfig) -> Result<DistributionMetrics> {
    let n = check_pair(d, d_gt)?;
    if x.nrows() != n || x_gt.nrows() != n {
        return Err(invalid_arg("coordinate and distance sizes differ"));
    }
    if cfg.k >= n {
        return Err(invalid_arg(format!("k = {} must be below N = {n}", cfg.k)));
    }
    Ok(DistributionMetrics {
        swd: swd_for(x, x_gt, cfg)?,
        w1_knn: knn_w1(d, d_gt, cfg.k),
    })
}

fn knn_w1(d: &Mat, d_gt: &Mat, k: usize) -> f64 {
    wasserstein1_equal(&knn_distance_pool(d, k), &knn_distance_pool(d_gt, k))
}

/// CalErr at `k` and LRMSE for each of `ks`.
pub fn calibration_metrics(d: &Mat, d_gt: &Mat, k: usize, ks: &[usize]) -> Result<CalibrationMetrics> {
    let n = check_pair(d, d_gt)?;
    let kmax = ks.iter().copied().chain(std::iter::once(k)).max().unwrap_or(k);
    if k == 0 || ks.contains(&0) || kmax >= n {
        return Err(invalid_arg(format!("calibration needs 1 <= k < N = {n}, largest k is {kmax}")));
    }
    let order = sorted_neighbors(d_gt);
    let mut cal = 0.0;
    for (i, o) in order.iter().enumerate() {
        let j = o[k - 1];
        let r = d_gt[(i, j)];
        if r == 0.0 {
            return Err(Error::DegenerateTarget(format!("zero ground-truth {k}-NN radius at point {i}")));
        }
        cal += (d[(i, j)] / r - 1.0).abs();
    }
    let mut lrmse = BTreeMap::new();
    for &kk in ks {
        let rk = median(order.iter().enumerate().map(|(i, o)| d_gt[(i, o[kk - 1])]).collect());
        if rk == 0.0 {
            return Err(Error::DegenerateTarget(format!("zero median ground-truth {kk}-NN radius")));
        }
        let mut ss = 0.0;
        for (i, o) in order.iter().enumerate() {
            for &j in &o[..kk] {
                let e = (d[(i, j)] - d_gt[(i, j)]) / rk;
                ss += e * e;
            }
        }
        lrmse.insert(kk, (ss / (n * kk) as f64).sqrt());
    }
    Ok(CalibrationMetrics {
        cal_err: cal / n as f64,
        lrmse,
    })
}

/// Interleave the low `bits` bits of `x` (even positions) and `y` (odd).
pub fn morton_code(x: u32, y: u32, bits: u32) -> u64 {
    let mut code = 0u64;
    for b in 0..bits {
        code |= (((x >> b) & 1) as u64) << (2 * b);
        code |= (((y >> b) & 1) as u64) << (2 * b + 1);
    }
    code
}

/// Point order along the Z-curve of coordinates quantized to `bits` bits
/// per axis over their bounding box.
pub fn morton_order(coords: &Mat, bits: u32) -> Vec<usize> {
    let n = coords.nrows();
    let levels = ((1u64 << bits) - 1) as f64;
    let q = |c: usize| -> Vec<u32> {
        let col = coords.column(c);
        let (lo, hi) = (col.min(), col.max());
        let span = hi - lo;
        col.iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * levels).round() as u32 } else { 0 })
            .collect()
    };
    let (qx, qy) = (q(0), q(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| (morton_code(qx[i], qy[i], bits), i));
    idx
}

pub const MORTON_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionMap {
    pub values: Mat,
    pub block: usize,
    pub epsilon: f64,
    pub scale: f64,
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DistortionSidecar {
    n: usize,
    block: usize,
    epsilon: f64,
    scale: f64,
    morton_bits: u32,
}

impl DistortionMap {
    /// Writes the block matrix as headerless CSV and `<path>.json` alongside.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for i in 0..self.values.nrows() {
            let row: Vec<String> = self.values.row(i).iter().map(|&v| fmt_f64(v)).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        atomic_write(path, s.as_bytes())?;
        let sidecar = DistortionSidecar {
            n: self.order.len(),
            block: self.block,
            epsilon: self.epsilon,
            scale: self.scale,
            morton_bits: MORTON_BITS,
        };
        let mut json_path = path.as_os_str().to_owned();
        json_path.push(".json");
        write_json(Path::new(&json_path), &sidecar)
    }
}

/// Default `ε = 1e-8·median(D_GT)` and block `⌈N/256⌉`.
pub fn default_distortion_params(d_gt: &Mat) -> (usize, f64) {
    let n = d_gt.nrows();
    let med = median(upper_triangle(d_gt));
    (n.div_ceil(256).max(1), 1e-8 * med)
}

pub fn distortion_map(x: &Mat, x_gt: &Mat, block: usize, epsilon: f64) -> Result<DistortionMap> {
    if block == 0 {
        return Err(invalid_arg("block size must be at least 1"));
    }
    if x.nrows() != x_gt.nrows() || x_gt.ncols() != 2 {
        return Err(invalid_arg("prediction and ground truth must have the same number of rows"));
    }
    ensure_finite(x)?;
    ensure_finite(x_gt)?;
    let n = x.nrows();
    let d_hat = pairwise_distances(x);
    let d = pairwise_distances(x_gt);
    let scale = optimal_scale(&d_hat, &d);
    let order = morton_order(x_gt, MORTON_BITS);
    let nb = n.div_ceil(block);
    let rows: Vec<Vec<f64>> = (0..nb)
        .into_par_iter()
        .map(|bi| {
            let ri = &order[bi * block..((bi + 1) * block).min(n)];
            (0..nb)
                .map(|bj| {
                    let rj = &order[bj * block..((bj + 1) * block).min(n)];
                    let mut sum = 0.0;
                    for &i in ri {
                        for &j in rj {
                            sum += ((scale * d_hat[(i, j)] + epsilon) / (d[(i, j)] + epsilon)).ln().abs();
                        }
                    }
                    sum / (ri.len() * rj.len()) as f64
                })
                .collect()
        })
        .collect();
    Ok(DistortionMap {
        values: Mat::from_fn(nb, nb, |i, j| rows[i][j]),
        block,
        epsilon,
        scale,
        order,
    })
}

/// Full report for predicted coordinates `x` (or only distances `d` when
/// coordinates are unavailable, in which case `swd` is `null`).
pub fn evaluate(x: Option<&Mat>, d: &Mat, x_gt: &Mat, cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let d_gt = pairwise_distances(x_gt);
    let n = check_pair(d, &d_gt)?;
    let g = global_distance_metrics(d, &d_gt)?;
    let k_ok = cfg.k < n;
    let r = if k_ok { Some(neighborhood_radius(&d_gt, cfg.k)?) } else { None };
    let edge = match r {
        Some(r) => edge_classification_metrics(d, &d_gt, r)?,
        None => EdgeMetrics { roc_auc: None, bap: None },
    };
    let shell = match (r, cfg.shell_mode) {
        (Some(r), ShellMode::Multiples) => Some(shell_f1(d, &d_gt, r, cfg.n_shells)?),
        (_, ShellMode::Quantiles) => Some(shell_f1_with_radii(d, &d_gt, &quantile_radii(&d_gt, cfg.n_shells))?),
        (None, ShellMode::Multiples) => None,
    };
    let rank = if k_ok && 2 * n > 3 * cfg.k + 1 { Some(rank_metrics(d, &d_gt, cfg.k)?) } else { None };
    let swd = match x {
        Some(x) => Some(swd_for(x, x_gt, cfg)?),
        None => None,
    };
    let w1 = if k_ok { Some(knn_w1(d, &d_gt, cfg.k)) } else { None };
    let valid_ks: Vec<usize> = cfg.lrmse_ks.iter().copied().filter(|&kk| kk < n).collect();
    let cal = if k_ok { Some(calibration_metrics(d, &d_gt, cfg.k, &valid_ks)?) } else { None };
    let lrmse = cfg
        .lrmse_ks
        .iter()
        .map(|&kk| (kk, cal.as_ref().and_then(|c| c.lrmse.get(&kk).copied())))
        .collect();
    Ok(MetricsReport {
        spearman: g.spearman,
        pearson: g.pearson,
        stress1: Some(g.stress1),
        edge_roc_auc: edge.roc_auc,
        bap: edge.bap,
        shell_f1_macro: shell,
        trust_at_k: rank.map(|r| r.trust),
        cont_at_k: rank.map(|r| r.cont),
        swd,
        w1_knn: w1,
        cal_err: cal.map(|c| c.cal_err),
        lrmse,
    })
}
