//! Synthetic slides with position-dependent expression, pseudo-spot
//! aggregation, and oracle local-geometry predictors that stand in for a
//! trained geometry model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::edm::{make_schedule, residual_target, sample_residual, DiffusionConfig, GaussianDenoiser};
use crate::error::{invalid_arg, invalid_input, Result};
use crate::geometry::{center_unchecked, knn_indices, random_orthogonal, select_rows, CoordinateTable, Mat};
use crate::io::{read_coords, read_labeled_matrix, read_labels, write_coords, write_json, write_labeled_matrix, write_labels, LabeledMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_domains: usize,
    pub expression_noise_std: f64,
    /// Bump width is the domain spacing divided by this factor.
    pub domain_sharpness: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n_cells: 2000, n_genes: 60, n_domains: 9, expression_noise_std: 0.05, domain_sharpness: 2.0, seed: 0 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 1 {
            return Err(invalid_arg("synthetic.n_domains must be at least 1"));
        }
        if self.n_cells < self.n_domains {
            return Err(invalid_arg(format!(
                "synthetic.n_cells = {} must be at least n_domains = {}",
                self.n_cells, self.n_domains
            )));
        }
        if self.n_genes < 2 {
            return Err(invalid_arg("synthetic.n_genes must be at least 2"));
        }
        if !(self.expression_noise_std >= 0.0 && self.expression_noise_std.is_finite()) {
            return Err(invalid_arg("synthetic.expression_noise_std must be finite and nonnegative"));
        }
        if !(self.domain_sharpness > 0.0 && self.domain_sharpness.is_finite()) {
            return Err(invalid_arg("synthetic.domain_sharpness must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub coords: CoordinateTable,
    pub expression: Mat,
    pub gene_names: Vec<String>,
    pub domains: Vec<usize>,
}

impl Slide {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `coords.csv`, `expression.csv`, `domains.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_coords(&dir.join("coords.csv"), &self.coords)?;
        write_labeled_matrix(
            &dir.join("expression.csv"),
            &LabeledMatrix { ids: self.coords.ids.clone(), columns: self.gene_names.clone(), values: self.expression.clone() },
        )?;
        write_labels(&dir.join("domains.csv"), &self.coords.ids, &self.domains, "domain")
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let coords = read_coords(&dir.join("coords.csv"))?;
        let expr = read_labeled_matrix(&dir.join("expression.csv"))?;
        if expr.ids != coords.ids {
            return Err(invalid_input("expression.csv ids do not match coords.csv"));
        }
        let domain_path = dir.join("domains.csv");
        let domains = if domain_path.exists() {
            let (ids, labels) = read_labels(&domain_path, "domain")?;
            if ids != coords.ids {
                return Err(invalid_input("domains.csv ids do not match coords.csv"));
            }
            labels
        } else {
            vec![0; coords.len()]
        };
        Ok(Self { coords, expression: expr.values, gene_names: expr.columns, domains })
    }
}

/// Domain centers on a jittered `g×g` grid, `g = ⌈√K⌉`.
fn domain_centers<R: Rng + ?Sized>(k: usize, rng: &mut R) -> (Vec<[f64; 2]>, f64) {
    let g = (k as f64).sqrt().ceil() as usize;
    let spacing = 1.0 / g as f64;
    let mut cells: Vec<usize> = (0..g * g).collect();
    for i in (1..cells.len()).rev() {
        let j = rng.random_range(0..=i);
        cells.swap(i, j);
    }
    let centers = cells[..k]
        .iter()
        .map(|&c| {
            let (cx, cy) = ((c % g) as f64 + 0.5, (c / g) as f64 + 0.5);
            [
                (cx + rng.random_range(-0.25..0.25)) * spacing,
                (cy + rng.random_range(-0.25..0.25)) * spacing,
            ]
        })
        .collect();
    (centers, spacing)
}

/// Noise-free expression as a function of position.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionModel {
    pub centers: Vec<[f64; 2]>,
    /// `amplitudes[group][domain]`.
    pub amplitudes: Vec<Vec<f64>>,
    pub gains: Vec<f64>,
    pub bandwidth: f64,
}

impl ExpressionModel {
    pub fn mean(&self, p: [f64; 2]) -> Vec<f64> {
        let h2 = 2.0 * self.bandwidth * self.bandwidth;
        let bumps: Vec<f64> = self
            .centers
            .iter()
            .map(|c| (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / h2).exp())
            .collect();
        let k = self.centers.len();
        self.gains
            .iter()
            .enumerate()
            .map(|(g, gain)| gain * self.amplitudes[g % k].iter().zip(&bumps).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// MAP mixture component, i.e. the nearest center.
    pub fn domain(&self, p: [f64; 2]) -> usize {
        let d2 = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        (0..self.centers.len()).min_by(|&a, &b| d2(&self.centers[a]).total_cmp(&d2(&self.centers[b]))).unwrap_or(0)
    }
}

/// Cells from an equal-weight mixture of isotropic Gaussians in the unit
/// square; gene `g` belongs to group `g mod K` and responds to a bump at
/// every domain center, strongest at its own.
pub fn generate_slide<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Slide> {
    generate_slide_with_model(cfg, rng).map(|(s, _)| s)
}

pub fn generate_slide_with_model<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<(Slide, ExpressionModel)> {
    cfg.validate()?;
    let k = cfg.n_domains;
    let (centers, spacing) = domain_centers(k, rng);
    let spread = 0.35 * spacing;
    let mut coords = Mat::zeros(cfg.n_cells, 2);
    for i in 0..cfg.n_cells {
        let c = centers[rng.random_range(0..k)];
        loop {
            let x = c[0] + spread * rng.sample::<f64, _>(StandardNormal);
            let y = c[1] + spread * rng.sample::<f64, _>(StandardNormal);
            if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                coords[(i, 0)] = x;
                coords[(i, 1)] = y;
                break;
            }
        }
    }
    let amplitudes: Vec<Vec<f64>> = (0..k)
        .map(|grp| (0..k).map(|dom| if grp == dom { 1.0 } else { 0.3 * rng.random::<f64>() }).collect())
        .collect();
    let gains: Vec<f64> = (0..cfg.n_genes).map(|_| rng.random_range(2.0..6.0)).collect();
    let model = ExpressionModel { centers, amplitudes, gains, bandwidth: spacing / cfg.domain_sharpness };
    let noise = Normal::new(0.0, cfg.expression_noise_std).map_err(|e| invalid_arg(e.to_string()))?;
    let mut expression = Mat::zeros(cfg.n_cells, cfg.n_genes);
    let mut domains = Vec::with_capacity(cfg.n_cells);
    for i in 0..cfg.n_cells {
        let p = [coords[(i, 0)], coords[(i, 1)]];
        for (g, m) in model.mean(p).into_iter().enumerate() {
            let e = if cfg.expression_noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            expression[(i, g)] = (m + e).max(0.0);
        }
        domains.push(model.domain(p));
    }
    let ids = (0..cfg.n_cells).map(|i| format!("cell_{i:05}")).collect();
    let gene_names = (0..cfg.n_genes).map(|g| format!("gene_{g:03}")).collect();
    let slide = Slide { coords: CoordinateTable::new(ids, coords)?, expression, gene_names, domains };
    Ok((slide, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoSpotConfig {
    pub enabled: bool,
    pub pitch: f64,
    pub min_cells: usize,
}

impl Default for PseudoSpotConfig {
    fn default() -> Self {
        Self { enabled: false, pitch: 0.05, min_cells: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotSlide {
    pub coords: CoordinateTable,
    pub expression: Mat,
    pub gene_names: Vec<String>,
    /// Member cell indices per retained spot.
    pub members: Vec<Vec<usize>>,
    /// Cells in spots below the coverage threshold.
    pub discarded: Vec<usize>,
}

impl SpotSlide {
    /// Same layout as [`Slide::write`] plus `members.json`; spot domain is
    /// the majority member domain.
    pub fn write(&self, dir: &Path, cell_ids: &[String], cell_domains: &[usize]) -> Result<()> {
        write_coords(&dir.join("coords.csv"), &self.coords)?;
        write_labeled_matrix(
            &dir.join("expression.csv"),
            &LabeledMatrix { ids: self.coords.ids.clone(), columns: self.gene_names.clone(), values: self.expression.clone() },
        )?;
        let domains: Vec<usize> = self
            .members
            .iter()
            .map(|m| {
                let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
                for &c in m {
                    *counts.entry(cell_domains[c]).or_default() += 1;
                }
                counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(d, _)| d).unwrap_or(0)
            })
            .collect();
        write_labels(&dir.join("domains.csv"), &self.coords.ids, &domains, "domain")?;
        let members: BTreeMap<&str, Vec<&str>> = self
            .coords
            .ids
            .iter()
            .zip(&self.members)
            .map(|(id, m)| (id.as_str(), m.iter().map(|&c| cell_ids[c].as_str()).collect()))
            .collect();
        write_json(&dir.join("members.json"), &members)
    }
}

/// Bins cells into a square grid anchored at the lower-left data corner and
/// sums member expression per retained square.
pub fn pseudo_spot_aggregate(coords: &CoordinateTable, expression: &Mat, gene_names: &[String], pitch: f64, min_cells: usize) -> Result<SpotSlide> {
    if !(pitch > 0.0 && pitch.is_finite()) {
        return Err(invalid_arg("pitch must be positive"));
    }
    if expression.nrows() != coords.len() {
        return Err(invalid_input("expression rows do not match coordinates"));
    }
    let (x0, y0) = (coords.coords.column(0).min(), coords.coords.column(1).min());
    let mut bins: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for i in 0..coords.len() {
        let p = coords.point(i);
        let ix = ((p[0] - x0) / pitch).floor() as u64;
        let iy = ((p[1] - y0) / pitch).floor() as u64;
        bins.entry((iy, ix)).or_default().push(i);
    }
    let mut ids = Vec::new();
    let mut centers = Vec::new();
    let mut members = Vec::new();
    let mut discarded = Vec::new();
    for ((iy, ix), cells) in bins {
        if cells.len() < min_cells.max(1) {
            discarded.extend(cells);
            continue;
        }
        ids.push(format!("spot_{ix}_{iy}"));
        centers.push([x0 + (ix as f64 + 0.5) * pitch, y0 + (iy as f64 + 0.5) * pitch]);
        members.push(cells);
    }
    discarded.sort_unstable();
    let g = expression.ncols();
    let mut expr = Mat::zeros(members.len(), g);
    for (s, m) in members.iter().enumerate() {
        for &c in m {
            for j in 0..g {
                expr[(s, j)] += expression[(c, j)];
            }
        }
    }
    let spot_coords = if ids.is_empty() {
        CoordinateTable { ids, coords: Mat::zeros(0, 2) }
    } else {
        CoordinateTable::new(ids, Mat::from_fn(centers.len(), 2, |i, j| centers[i][j]))?
    };
    Ok(SpotSlide { coords: spot_coords, expression: expr, gene_names: gene_names.to_vec(), members, discarded })
}

/// Produces a pose-free latent geometry (`m×d`) for each patch.
pub trait LocalGeometryPredictor: Send + Sync {
    fn predict(&self, patch: usize, indices: &[usize]) -> Result<Mat>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OraclePredictorConfig {
    /// Target standard deviation of per-pair log-distance errors.
    pub distance_noise: f64,
    pub apply_random_rotation: bool,
    pub dim: usize,
    /// Neighborhood size of the pairs the jitter is calibrated on.
    pub calibration_k: usize,
    pub seed: u64,
}

impl Default for OraclePredictorConfig {
    fn default() -> Self {
        Self { distance_noise: 0.02, apply_random_rotation: true, dim: 32, calibration_k: 20, seed: 0 }
    }
}

impl OraclePredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_noise >= 0.0 && self.distance_noise.is_finite()) {
            return Err(invalid_arg("oracle.distance_noise must be finite and nonnegative"));
        }
        if self.dim < 2 {
            return Err(invalid_arg("oracle.dim must be at least 2"));
        }
        if self.calibration_k < 1 {
            return Err(invalid_arg("oracle.calibration_k must be at least 1"));
        }
        Ok(())
    }
}

/// Ground-truth coordinates with calibrated per-point jitter and a fresh
/// random orthogonal frame per patch.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    coords: Mat,
    cfg: OraclePredictorConfig,
}

fn patch_rng(seed: u64, patch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patch as u64);
    rng
}

/// Unique within-patch kNN pairs with positive distance.
fn calibration_pairs(x: &Mat, k: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = knn_indices(x, k)
        .into_iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.into_iter().map(move |j| (i.min(j), i.max(j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs.retain(|&(i, j)| dist(x, i, j) > 0.0);
    pairs
}

fn dist(x: &Mat, i: usize, j: usize) -> f64 {
    ((x[(i, 0)] - x[(j, 0)]).powi(2) + (x[(i, 1)] - x[(j, 1)]).powi(2)).sqrt()
}

fn log_ratio_std(x: &Mat, z: &Mat, tau: f64, pairs: &[(usize, usize)]) -> f64 {
    let y = x + z * tau;
    let v: Vec<f64> = pairs.iter().map(|&(i, j)| (dist(&y, i, j) / dist(x, i, j)).ln()).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

impl OraclePredictor {
    pub fn new(coords: &Mat, cfg: OraclePredictorConfig) -> Result<Self> {
        cfg.validate()?;
        if coords.ncols() != 2 {
            return Err(invalid_input("oracle needs planar coordinates"));
        }
        Ok(Self { coords: coords.clone(), cfg })
    }

    pub fn config(&self) -> &OraclePredictorConfig {
        &self.cfg
    }

    /// Clean and jittered planar patch geometry plus the frame `Q`.
    fn draw(&self, patch: usize, indices: &[usize]) -> Result<(Mat, Mat, Option<Mat>)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.coords.nrows()) {
            return Err(invalid_arg(format!("patch {patch} references unknown cell index {bad}")));
        }
        let mut rng = patch_rng(self.cfg.seed, patch);
        let clean = center_unchecked(&select_rows(&self.coords, indices));
        let m = indices.len();
        let z = Mat::from_fn(m, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma = self.cfg.distance_noise;
        let mut noisy = clean.clone();
        if sigma > 0.0 && m >= 2 {
            let pairs = calibration_pairs(&clean, self.cfg.calibration_k.min(m - 1));
            if !pairs.is_empty() {
                let mut ds: Vec<f64> = pairs.iter().map(|&(i, j)| dist(&clean, i, j)).collect();
                ds.sort_by(f64::total_cmp);
                let mut tau = sigma * ds[ds.len() / 2] / std::f64::consts::SQRT_2;
                for _ in 0..4 {
                    let s = log_ratio_std(&clean, &z, tau, &pairs);
                    if s <= 0.0 {
                        break;
                    }
                    tau *= sigma / s;
                }
                noisy = center_unchecked(&(&clean + &z * tau));
            }
        }
        let q = self.cfg.apply_random_rotation.then(|| random_orthogonal(self.cfg.dim, &mut rng));
        Ok((clean, noisy, q))
    }

    fn embed(&self, planar: &Mat, q: Option<&Mat>) -> Mat {
        let mut v = Mat::zeros(planar.nrows(), self.cfg.dim);
        v.columns_mut(0, 2).copy_from(planar);
        match q {
            Some(q) => v * q,
            None => v,
        }
    }
}

impl LocalGeometryPredictor for OraclePredictor {
    fn predict(&self, patch: usize, indices: &[usize]) -> Result<Mat> {
        let (_, noisy, q) = self.draw(patch, indices)?;
        Ok(self.embed(&noisy, q.as_ref()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticConfig {
    /// Prior residual std relative to the patch's median kNN distance.
    pub residual_std: f64,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self { residual_std: 1e-3 }
    }
}

/// Oracle proposal refined by residual diffusion under an analytic Gaussian
/// prior centered on the clean residual.
#[derive(Debug, Clone)]
pub struct AnalyticPredictor {
    oracle: OraclePredictor,
    cfg: AnalyticConfig,
    steps: usize,
}

impl AnalyticPredictor {
    pub fn new(coords: &Mat, oracle: OraclePredictorConfig, cfg: AnalyticConfig, steps: usize) -> Result<Self> {
        if !(cfg.residual_std > 0.0 && cfg.residual_std.is_finite()) {
            return Err(invalid_arg("analytic.residual_std must be positive"));
        }
        if steps < 1 {
            return Err(invalid_arg("diffusion steps must be at least 1"));
        }
        Ok(Self { oracle: OraclePredictor::new(coords, oracle)?, cfg, steps })
    }
}

impl LocalGeometryPredictor for AnalyticPredictor {
    fn predict(&self, patch: usize, indices: &[usize]) -> Result<Mat> {
        let (clean, noisy, q) = self.oracle.draw(patch, indices)?;
        let base = self.oracle.embed(&noisy, q.as_ref());
        if indices.len() < 2 {
            return Ok(base);
        }
        let target = self.oracle.embed(&clean, q.as_ref());
        let (_, mu) = residual_target(&target, &base)?;
        let k = self.oracle.cfg.calibration_k.min(indices.len() - 1);
        let mut ds: Vec<f64> = calibration_pairs(&clean, k).iter().map(|&(i, j)| dist(&clean, i, j)).collect();
        if ds.is_empty() {
            return Ok(base);
        }
        ds.sort_by(f64::total_cmp);
        let s = self.cfg.residual_std * ds[ds.len() / 2];
        let sigma_data = (mu.norm_squared() / mu.len() as f64 + s * s).sqrt();
        let schedule = make_schedule(&DiffusionConfig { steps: self.steps, ..DiffusionConfig::with_sigma_data(sigma_data) })?;
        let mut rng = patch_rng(self.oracle.cfg.seed ^ 0x5eed_d1ff, patch);
        sample_residual(&center_unchecked(&base), &GaussianDenoiser { mu, s }, &schedule, &mut rng)
    }
}
