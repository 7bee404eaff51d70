//! Spatially localized minisets and overlapping miniset pairs.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::geometry::{canonical_factor, center, euclidean, gram, CoordinateTable, GeometryFactor};
use crate::io::{write_coords, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinisetConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub tau_spatial: f64,
    pub alpha: f64,
    pub min_overlap: usize,
    pub target_dim: usize,
    /// Training-scale knob only; no epoch loop consumes it here.
    pub pairs_per_epoch: usize,
    pub seed: u64,
}

impl Default for MinisetConfig {
    fn default() -> Self {
        Self {
            n_min: 64,
            n_max: 256,
            tau_spatial: 0.05,
            alpha: 0.5,
            min_overlap: 20,
            target_dim: 32,
            pairs_per_epoch: 4500,
            seed: 0,
        }
    }
}

impl MinisetConfig {
    pub fn validate(&self, slide_size: usize) -> Result<()> {
        if self.n_min < 2 || self.n_min > self.n_max {
            return Err(invalid_arg("need 2 <= n_min <= n_max"));
        }
        if self.n_max > slide_size {
            return Err(invalid_arg(format!("slide has {slide_size} points, fewer than n_max = {}", self.n_max)));
        }
        if !(self.tau_spatial > 0.0) {
            return Err(invalid_arg("tau_spatial must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid_arg("alpha must lie in (0, 1]"));
        }
        if self.min_overlap < 2 {
            return Err(invalid_arg("min_overlap must be at least 2"));
        }
        if self.target_dim < 2 {
            return Err(invalid_arg("target_dim must be at least 2"));
        }
        Ok(())
    }

    /// `max(min_overlap, ⌊α·n⌋)`.
    pub fn shared_size(&self, n: usize) -> usize {
        self.min_overlap.max((self.alpha * n as f64).floor() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Miniset {
    pub indices: Vec<usize>,
    pub coords: CoordinateTable,
    pub target: GeometryFactor,
    pub center: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinisetPair {
    pub a: Miniset,
    pub b: Miniset,
    pub shared: Vec<usize>,
}

/// Sequential weighted draws without replacement with `p ∝ exp(−δ/τ)`.
///
/// Weights are shifted by the smallest remaining distance before
/// exponentiating, which leaves the normalized probabilities unchanged and
/// keeps tiny temperatures from underflowing to an all-zero vector.
fn draw_local<R: Rng + ?Sized>(
    dist: &[f64],
    taken: &mut [bool],
    count: usize,
    tau: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut weights = vec![0.0; dist.len()];
    for _ in 0..count {
        let floor = dist
            .iter()
            .zip(taken.iter())
            .filter(|(_, &t)| !t)
            .map(|(&d, _)| d)
            .fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for (i, w) in weights.iter_mut().enumerate() {
            *w = if taken[i] {
                0.0
            } else if tau.is_infinite() {
                1.0
            } else {
                (-(dist[i] - floor) / tau).exp()
            };
            total += *w;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let i = pick.expect("candidate pool is non-empty");
        taken[i] = true;
        out.push(i);
    }
    out
}

fn build(slide: &CoordinateTable, indices: Vec<usize>, center_idx: usize, d: usize) -> Result<Miniset> {
    let coords = slide.subset(&indices)?;
    // Small minisets cannot carry more than n columns.
    let target = canonical_factor(&gram(&center(&coords.coords)?)?, d.min(indices.len()))?;
    Ok(Miniset { indices, coords, target, center: center_idx })
}

fn distances_from(slide: &CoordinateTable, c: usize) -> Vec<f64> {
    let pc = slide.point(c);
    (0..slide.len()).map(|i| euclidean(&slide.point(i), &pc)).collect()
}

pub fn sample_miniset<R: Rng + ?Sized>(slide: &CoordinateTable, cfg: &MinisetConfig, rng: &mut R) -> Result<Miniset> {
    cfg.validate(slide.len())?;
    let n = rng.random_range(cfg.n_min..=cfg.n_max);
    let c = rng.random_range(0..slide.len());
    let dist = distances_from(slide, c);
    let mut taken = vec![false; slide.len()];
    taken[c] = true;
    let mut indices = vec![c];
    indices.extend(draw_local(&dist, &mut taken, n - 1, cfg.tau_spatial, rng));
    build(slide, indices, c, cfg.target_dim)
}

/// Two views around one center sharing an explicitly controlled index set.
pub fn sample_paired_minisets<R: Rng + ?Sized>(
    slide: &CoordinateTable,
    cfg: &MinisetConfig,
    rng: &mut R,
) -> Result<MinisetPair> {
    cfg.validate(slide.len())?;
    if cfg.shared_size(cfg.n_min) > cfg.n_min {
        return Err(invalid_arg("min_overlap exceeds n_min"));
    }
    let n = rng.random_range(cfg.n_min..=cfg.n_max);
    let m = cfg.shared_size(n);
    let c = rng.random_range(0..slide.len());
    let dist = distances_from(slide, c);
    let mut taken = vec![false; slide.len()];
    taken[c] = true;
    let mut shared = vec![c];
    shared.extend(draw_local(&dist, &mut taken, m - 1, cfg.tau_spatial, rng));

    let view = |rng: &mut R| {
        let mut t = taken.clone();
        let mut idx = shared.clone();
        idx.extend(draw_local(&dist, &mut t, n - m, cfg.tau_spatial, rng));
        idx
    };
    let ia = view(rng);
    let ib = view(rng);
    Ok(MinisetPair {
        a: build(slide, ia, c, cfg.target_dim)?,
        b: build(slide, ib, c, cfg.target_dim)?,
        shared,
    })
}

#[derive(Serialize)]
struct PairRecord<'a> {
    a: &'a [usize],
    b: &'a [usize],
    shared: &'a [usize],
}

#[derive(Serialize)]
struct BatchManifest<'a> {
    config: &'a MinisetConfig,
    seed: u64,
    pairs: Vec<PairRecord<'a>>,
}

/// One `pair_XXXXX_{a,b}.csv` per view plus `minisets.json`.
pub fn write_miniset_batch(dir: &Path, pairs: &[MinisetPair], cfg: &MinisetConfig) -> Result<()> {
    for (k, p) in pairs.iter().enumerate() {
        write_coords(&dir.join(format!("pair_{k:05}_a.csv")), &p.a.coords)?;
        write_coords(&dir.join(format!("pair_{k:05}_b.csv")), &p.b.coords)?;
    }
    let manifest = BatchManifest {
        config: cfg,
        seed: cfg.seed,
        pairs: pairs
            .iter()
            .map(|p| PairRecord { a: &p.a.indices, b: &p.b.indices, shared: &p.shared })
            .collect(),
    };
    write_json(&dir.join("minisets.json"), &manifest)
}
