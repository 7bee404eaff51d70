//! Within-patch distance measurements, patch reliability from overlap
//! disagreement, and robust aggregation into one global distance graph.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_input, Result};
use crate::geometry::{euclidean, knn_indices, rows_of, Mat};
use crate::io::{fmt_f64, parse_f64, parse_usize, read_csv, write_csv};
use crate::patch_graph::PatchCover;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Weighted,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub knn_extract: usize,
    pub min_support: usize,
    pub tau_spread: f64,
    pub min_overlap_cells: usize,
    pub weighting: Weighting,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self { knn_extract: 20, min_support: 2, tau_spread: 0.5, min_overlap_cells: 5, weighting: Weighting::Weighted }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_extract < 1 || self.min_support < 1 || self.min_overlap_cells < 2 {
            return Err(invalid_arg("knn_extract, min_support must be >= 1 and min_overlap_cells >= 2"));
        }
        if !(self.tau_spread > 0.0) {
            return Err(invalid_arg("tau_spread must be positive"));
        }
        Ok(())
    }
}

/// One distance reading of the pair `i < j` taken from patch `patch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub i: usize,
    pub j: usize,
    pub d: f64,
    pub patch: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchEdges {
    pub records: Vec<Measurement>,
    /// Coincident-point pairs that were dropped.
    pub dropped_zero: usize,
}

/// kNN edges of a predicted patch geometry, as global-id measurements.
pub fn extract_patch_edges(v_pred: &Mat, patch_ids: &[usize], k: usize, patch: usize) -> Result<PatchEdges> {
    let n = patch_ids.len();
    if v_pred.nrows() != n {
        return Err(invalid_arg("one geometry row per patch member is required"));
    }
    if k == 0 || k >= n {
        return Err(invalid_arg(format!("need 1 <= k < |patch| = {n}")));
    }
    let knn = knn_indices(v_pred, k);
    let rows = rows_of(v_pred);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n * k);
    for (a, nb) in knn.iter().enumerate() {
        for &b in nb {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut out = PatchEdges::default();
    for (a, b) in pairs {
        let d = euclidean(&rows[a], &rows[b]);
        if !(d > 0.0) || !d.is_finite() {
            out.dropped_zero += 1;
            continue;
        }
        let (gi, gj) = (patch_ids[a], patch_ids[b]);
        if gi == gj {
            return Err(invalid_input(format!("patch {patch} lists cell {gi} twice")));
        }
        out.records.push(Measurement { i: gi.min(gj), j: gi.max(gj), d, patch });
    }
    Ok(out)
}

/// Mean `|log d_p − log d_q|` over all shared pairs, or `None` when fewer than
/// `min_cells` cells are shared. `shared` holds (row in p, row in q).
pub fn overlap_disagreement(vp: &Mat, vq: &Mat, shared: &[(usize, usize)], min_cells: usize) -> Option<f64> {
    if shared.len() < min_cells {
        return None;
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for a in 0..shared.len() {
        for b in (a + 1)..shared.len() {
            let dp = (vp.row(shared[a].0) - vp.row(shared[b].0)).norm();
            let dq = (vq.row(shared[a].1) - vq.row(shared[b].1)).norm();
            if dp > 0.0 && dq > 0.0 {
                acc += (dp.ln() - dq.ln()).abs();
                count += 1;
            }
        }
    }
    (count > 0).then(|| acc / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// `(p, q, disagreement)` for every pair sharing enough cells.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Mean disagreement with partners, `None` for patches without partners.
    pub per_patch: Vec<Option<f64>>,
}

impl OverlapStats {
    pub fn median_pair_disagreement(&self) -> Option<f64> {
        let v: Vec<f64> = self.pairs.iter().map(|p| p.2).collect();
        (!v.is_empty()).then(|| quantile_sorted(&sorted(v), 0.5))
    }
}

pub fn overlap_stats(preds: &[Mat], cover: &PatchCover, min_cells: usize) -> Result<OverlapStats> {
    let m = cover.patches.len();
    if preds.len() != m {
        return Err(invalid_arg("one prediction per patch is required"));
    }
    let positions: Vec<HashMap<usize, usize>> = cover
        .patches
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &g)| (g, r)).collect())
        .collect();
    let candidates: Vec<(usize, usize)> = (0..m).flat_map(|p| ((p + 1)..m).map(move |q| (p, q))).collect();
    let pairs: Vec<(usize, usize, f64)> = candidates
        .par_iter()
        .filter_map(|&(p, q)| {
            let shared: Vec<(usize, usize)> = cover.patches[p]
                .iter()
                .enumerate()
                .filter_map(|(rp, g)| positions[q].get(g).map(|&rq| (rp, rq)))
                .collect();
            overlap_disagreement(&preds[p], &preds[q], &shared, min_cells).map(|d| (p, q, d))
        })
        .collect();
    let mut sum = vec![0.0; m];
    let mut cnt = vec![0usize; m];
    for &(p, q, d) in &pairs {
        for x in [p, q] {
            sum[x] += d;
            cnt[x] += 1;
        }
    }
    let per_patch = (0..m).map(|p| (cnt[p] > 0).then(|| sum[p] / cnt[p] as f64)).collect();
    Ok(OverlapStats { pairs, per_patch })
}

/// `a_p = exp(−m_p / median)`, clamped to `(0, 1]`; partnerless patches get 1.
///
/// When the median disagreement is zero the mean of the positive
/// disagreements is used as the normalizer instead.
pub fn patch_reliabilities(per_patch: &[Option<f64>]) -> Vec<f64> {
    let vals: Vec<f64> = per_patch.iter().flatten().copied().collect();
    if vals.is_empty() {
        return vec![1.0; per_patch.len()];
    }
    let mut norm = quantile_sorted(&sorted(vals.clone()), 0.5);
    if !(norm > 0.0) {
        let pos: Vec<f64> = vals.into_iter().filter(|v| *v > 0.0).collect();
        if pos.is_empty() {
            return vec![1.0; per_patch.len()];
        }
        norm = pos.iter().sum::<f64>() / pos.len() as f64;
    }
    per_patch
        .iter()
        .map(|m| match m {
            Some(m) => (-m / norm).exp().clamp(f64::MIN_POSITIVE, 1.0),
            None => 1.0,
        })
        .collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile of sorted data (position `q·(n−1)`).
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Smallest value whose cumulative weight reaches half the total.
pub fn lower_weighted_median(values: &[f64], weights: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(weights[a].total_cmp(&weights[b])));
    let total: f64 = weights.iter().sum();
    let half = 0.5 * total;
    let tol = 1e-12 * total;
    let mut cum = 0.0;
    for &k in &idx {
        cum += weights[k];
        if cum + tol >= half {
            return values[k];
        }
    }
    values[idx[idx.len() - 1]]
}

/// Robust dispersion `IQR / median` with interpolated quartiles.
pub fn relative_spread(values: &[f64]) -> f64 {
    let s = sorted(values.to_vec());
    let med = quantile_sorted(&s, 0.5);
    (quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)) / med
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchedEdge {
    pub i: usize,
    pub j: usize,
    pub d: f64,
    pub omega: f64,
    pub count: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchedGraph {
    pub n: usize,
    pub edges: Vec<StitchedEdge>,
}

impl StitchedGraph {
    /// Exact-distance graph used by tests and benchmarks.
    pub fn from_distances(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let edges = edges
            .into_iter()
            .map(|(i, j, d)| StitchedEdge { i: i.min(j), j: i.max(j), d, omega: 1.0, count: 1, spread: 0.0 })
            .collect();
        Self { n, edges }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.edges.iter().map(|e| {
            vec![e.i.to_string(), e.j.to_string(), fmt_f64(e.d), fmt_f64(e.omega), e.count.to_string(), fmt_f64(e.spread)]
        });
        write_csv(path, &["i", "j", "d", "omega", "count", "spread"], rows)
    }

    pub fn read_csv(path: &Path, n: usize) -> Result<Self> {
        let t = read_csv(path)?;
        let want = ["i", "j", "d", "omega", "count", "spread"];
        if t.header.iter().map(|h| h.trim()).ne(want.iter().copied()) {
            return Err(crate::Error::Parse { path: path.display().to_string(), line: 1, message: "unexpected header".into() });
        }
        let mut edges = Vec::with_capacity(t.records.len());
        for (line, r) in &t.records {
            let e = StitchedEdge {
                i: parse_usize(path, *line, &r[0])?,
                j: parse_usize(path, *line, &r[1])?,
                d: parse_f64(path, *line, &r[2])?,
                omega: parse_f64(path, *line, &r[3])?,
                count: parse_usize(path, *line, &r[4])?,
                spread: parse_f64(path, *line, &r[5])?,
            };
            if e.i >= n || e.j >= n {
                return Err(crate::Error::Parse { path: path.display().to_string(), line: *line, message: "node index out of range".into() });
            }
            edges.push(e);
        }
        Ok(Self { n, edges })
    }
}

/// Groups measurements by pair and keeps well-supported, consistent pairs.
///
/// The support threshold is `min(min_support, number of patches)` so that a
/// single-patch cover still yields a graph.
pub fn aggregate_edges(n: usize, measurements: &[Measurement], reliability: &[f64], cfg: &StitchConfig) -> Result<StitchedGraph> {
    cfg.validate()?;
    if measurements.is_empty() {
        return Err(invalid_arg("no measurements to aggregate"));
    }
    let mut sorted_m: Vec<Measurement> = measurements.iter().filter(|m| m.d > 0.0 && m.d.is_finite()).copied().collect();
    for m in &sorted_m {
        if m.i >= n || m.j >= n || m.i == m.j {
            return Err(invalid_input(format!("invalid measurement pair ({}, {})", m.i, m.j)));
        }
        if m.patch >= reliability.len() {
            return Err(invalid_input(format!("measurement from unknown patch {}", m.patch)));
        }
    }
    for m in &mut sorted_m {
        if m.i > m.j {
            std::mem::swap(&mut m.i, &mut m.j);
        }
    }
    sorted_m.sort_by(|a, b| (a.i, a.j).cmp(&(b.i, b.j)).then(a.d.total_cmp(&b.d)));
    let min_support = cfg.min_support.min(reliability.len()).max(1);
    let groups: Vec<&[Measurement]> = sorted_m.chunk_by(|a, b| a.i == b.i && a.j == b.j).collect();
    let edges: Vec<StitchedEdge> = groups
        .par_iter()
        .filter_map(|g| {
            let count = g.len();
            if count < min_support {
                return None;
            }
            let values: Vec<f64> = g.iter().map(|m| m.d).collect();
            let weights: Vec<f64> = match cfg.weighting {
                Weighting::Weighted => g.iter().map(|m| reliability[m.patch]).collect(),
                Weighting::Uniform => vec![1.0; count],
            };
            let spread = relative_spread(&values);
            if !(spread <= cfg.tau_spread) {
                return None;
            }
            let d = lower_weighted_median(&values, &weights);
            Some(StitchedEdge { i: g[0].i, j: g[0].j, d, omega: (count as f64).sqrt() / (1.0 + spread), count, spread })
        })
        .collect();
    Ok(StitchedGraph { n, edges })
}

/// Everything the stitching stage produces from per-patch predictions.
#[derive(Debug, Clone)]
pub struct StitchOutcome {
    pub graph: StitchedGraph,
    pub reliability: Vec<f64>,
    pub overlap: OverlapStats,
    pub measurements: usize,
    pub dropped_zero: usize,
}

pub fn stitch(n: usize, preds: &[Mat], cover: &PatchCover, cfg: &StitchConfig) -> Result<StitchOutcome> {
    cfg.validate()?;
    if preds.len() != cover.patches.len() {
        return Err(invalid_arg("one prediction per patch is required"));
    }
    let per_patch: Vec<PatchEdges> = preds
        .par_iter()
        .zip(cover.patches.par_iter())
        .enumerate()
        .map(|(p, (v, ids))| extract_patch_edges(v, ids, cfg.knn_extract.min(ids.len() - 1), p))
        .collect::<Result<_>>()?;
    let overlap = overlap_stats(preds, cover, cfg.min_overlap_cells)?;
    let reliability = match cfg.weighting {
        Weighting::Weighted => patch_reliabilities(&overlap.per_patch),
        Weighting::Uniform => vec![1.0; preds.len()],
    };
    let dropped_zero = per_patch.iter().map(|p| p.dropped_zero).sum();
    let all: Vec<Measurement> = per_patch.into_iter().flat_map(|p| p.records).collect();
    let graph = aggregate_edges(n, &all, &reliability, cfg)?;
    Ok(StitchOutcome { graph, reliability, overlap, measurements: all.len(), dropped_zero })
}

#[cfg(test)]
#[allow(clippy::approx_constant)] // rounded reference values
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(n: usize, d: usize, seed: u64) -> Mat {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, d, |_, _| r.random::<f64>())
    }

    #[test]
    fn three_points_complete() {
        let v = rnd(3, 2, 1);
        let e = extract_patch_edges(&v, &[10, 4, 7], 2, 0).unwrap();
        let mut p: Vec<(usize, usize)> = e.records.iter().map(|m| (m.i, m.j)).collect();
        p.sort();
        assert_eq!(p, vec![(4, 7), (4, 10), (7, 10)]);
        assert!(extract_patch_edges(&v, &[0, 1, 2], 3, 0).is_err());
    }

    #[test]
    fn gt_geometry_gives_gt_distances() {
        let v = rnd(20, 2, 2);
        let ids: Vec<usize> = (0..20).collect();
        for m in extract_patch_edges(&v, &ids, 5, 0).unwrap().records {
            let gt = (v.row(m.i) - v.row(m.j)).norm();
            assert!((m.d - gt).abs() < 1e-12);
        }
    }

    #[test]
    fn edges_match_brute_force_knn() {
        let v = rnd(50, 4, 3);
        let ids: Vec<usize> = (100..150).collect();
        let got = extract_patch_edges(&v, &ids, 10, 0).unwrap();
        let mut want = Vec::new();
        for a in 0..50 {
            let mut o: Vec<usize> = (0..50).filter(|&b| b != a).collect();
            o.sort_by(|&x, &y| {
                (v.row(a) - v.row(x)).norm().partial_cmp(&(v.row(a) - v.row(y)).norm()).unwrap().then(x.cmp(&y))
            });
            for &b in &o[..10] {
                want.push((ids[a.min(b)], ids[a.max(b)]));
            }
        }
        want.sort();
        want.dedup();
        let mut g: Vec<(usize, usize)> = got.records.iter().map(|m| (m.i, m.j)).collect();
        g.sort();
        assert_eq!(g, want);
    }

    #[test]
    fn coincident_points_dropped() {
        let v = Mat::from_row_slice(3, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let e = extract_patch_edges(&v, &[0, 1, 2], 2, 0).unwrap();
        assert_eq!(e.dropped_zero, 1);
        assert_eq!(e.records.len(), 2);
    }

    #[test]
    fn disagreement_examples() {
        let vp = rnd(8, 2, 4);
        let (s, c) = 0.4f64.sin_cos();
        let vq = (&vp * Mat::from_row_slice(2, 2, &[c, -s, s, c])).add_scalar(2.0);
        let shared: Vec<(usize, usize)> = (0..8).map(|i| (i, i)).collect();
        assert!(overlap_disagreement(&vp, &vq, &shared, 5).unwrap() < 1e-10);
        let d = overlap_disagreement(&vp, &(&vp * 2.0), &shared, 5).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-12);
        assert!((d - 0.693147).abs() < 1e-6);
        assert!(overlap_disagreement(&vp, &vq, &shared[..4], 5).is_none());
    }

    #[test]
    fn reliability_examples() {
        assert_eq!(patch_reliabilities(&[Some(0.0), Some(0.0)]), vec![1.0, 1.0]);
        assert_eq!(patch_reliabilities(&[None]), vec![1.0]);
        let m = [Some(0.1), Some(0.1), Some(0.1), Some(0.1), Some(1.0)];
        let a = patch_reliabilities(&m);
        assert!((a[4] - (-10f64).exp()).abs() < 1e-15);
        assert!((a[4] - 4.54e-5).abs() < 1e-7);
        assert!((a[0] - (-1f64).exp()).abs() < 1e-15);
        assert!(a.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    fn meas(values: &[f64]) -> Vec<Measurement> {
        values.iter().enumerate().map(|(p, &d)| Measurement { i: 0, j: 1, d, patch: p }).collect()
    }

    #[test]
    fn weighted_median_examples() {
        assert_eq!(lower_weighted_median(&[1.0, 1.1, 5.0], &[1.0; 3]), 1.1);
        assert_eq!(lower_weighted_median(&[1.0, 1.1, 5.0], &[0.01, 0.01, 1.0]), 5.0);
        assert_eq!(lower_weighted_median(&[2.0, 1.0], &[0.3, 0.3]), 1.0);
        let s = relative_spread(&[1.0, 1.1, 5.0]);
        assert!((s - (3.05 - 1.05) / 1.1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let cfg = StitchConfig { tau_spread: 10.0, ..StitchConfig::default() };
        let g = aggregate_edges(2, &meas(&[1.0, 1.1, 5.0]), &[1.0; 3], &cfg).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].d, 1.1);
        assert_eq!(g.edges[0].count, 3);
        let g = aggregate_edges(2, &meas(&[1.0, 1.1, 5.0]), &[0.01, 0.01, 1.0], &cfg).unwrap();
        assert_eq!(g.edges[0].d, 5.0);
        let g = aggregate_edges(2, &meas(&[1.0]), &[1.0, 1.0], &StitchConfig::default()).unwrap();
        assert!(g.edges.is_empty());
        // Spread filter at the default threshold.
        let g = aggregate_edges(2, &meas(&[1.0, 1.1, 5.0]), &[1.0; 3], &StitchConfig::default()).unwrap();
        assert!(g.edges.is_empty());
        let g = aggregate_edges(2, &meas(&[1.0, 1.1, 1.05]), &[1.0; 3], &StitchConfig::default()).unwrap();
        let e = g.edges[0];
        assert!((e.omega - 3f64.sqrt() / (1.0 + e.spread)).abs() < 1e-15);
    }

    #[test]
    fn aggregate_permutation_and_scale() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut ms = Vec::new();
        for p in 0..6 {
            for (i, j) in [(0, 1), (1, 2), (0, 3), (2, 3)] {
                ms.push(Measurement { i, j, d: 1.0 + 0.1 * r.random::<f64>(), patch: p });
            }
        }
        let rel: Vec<f64> = (0..6).map(|_| r.random::<f64>() + 0.05).collect();
        let cfg = StitchConfig::default();
        let base = aggregate_edges(4, &ms, &rel, &cfg).unwrap();
        let mut shuffled = ms.clone();
        shuffled.reverse();
        shuffled.rotate_left(7);
        assert_eq!(aggregate_edges(4, &shuffled, &rel, &cfg).unwrap(), base);
        // Relabel patches.
        let relabeled: Vec<Measurement> = ms.iter().map(|m| Measurement { patch: 5 - m.patch, ..*m }).collect();
        let rel_rev: Vec<f64> = rel.iter().rev().copied().collect();
        assert_eq!(aggregate_edges(4, &relabeled, &rel_rev, &cfg).unwrap(), base);
        let scaled: Vec<Measurement> = ms.iter().map(|m| Measurement { d: m.d * 3.0, ..*m }).collect();
        let s = aggregate_edges(4, &scaled, &rel, &cfg).unwrap();
        for (a, b) in s.edges.iter().zip(&base.edges) {
            assert!((a.d - 3.0 * b.d).abs() < 1e-12);
            assert!((a.spread - b.spread).abs() < 1e-12);
        }
        let equal = aggregate_edges(4, &ms, &[0.3; 6], &cfg).unwrap();
        for e in &equal.edges {
            let mut v: Vec<f64> = ms.iter().filter(|m| (m.i, m.j) == (e.i, e.j)).map(|m| m.d).collect();
            v.sort_by(f64::total_cmp);
            assert_eq!(e.d, v[(v.len() - 1) / 2]);
        }
        for e in &base.edges {
            assert!(e.d > 0.0 && e.omega > 0.0 && e.count >= 2 && e.spread <= 0.5);
        }
    }

    #[test]
    fn csv_round_trip() {
        let g = StitchedGraph {
            n: 5,
            edges: vec![StitchedEdge { i: 0, j: 3, d: 0.125, omega: 1.5, count: 3, spread: 0.1 }],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        g.write_csv(&p).unwrap();
        assert_eq!(StitchedGraph::read_csv(&p, 5).unwrap(), g);
        assert!(StitchedGraph::read_csv(&p, 2).is_err());
    }
}
