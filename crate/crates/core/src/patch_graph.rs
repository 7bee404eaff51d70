//! Embedding surrogate, mutual-kNN locality graph and random-walk patch cover.

use std::collections::{HashSet, VecDeque};

use nalgebra::SymmetricEigen;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_input, Result};
use crate::geometry::{center_unchecked, ensure_finite, knn_indices, rows_of, squared_euclidean, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub values: Mat,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, values: Mat) -> Result<Self> {
        if ids.len() != values.nrows() {
            return Err(invalid_input("one id per embedding row is required"));
        }
        ensure_finite(&values)?;
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(invalid_input(format!("duplicate id {dup:?}")));
        }
        Ok(Self { ids, values })
    }
}

/// Principal-component projection with the variance it explains.
#[derive(Debug, Clone)]
pub struct Pca {
    pub scores: Mat,
    /// `G×h` unit loadings.
    pub components: Mat,
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 1.0;
        }
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }
}

/// Top-`h` principal components of the column-centered matrix. Each loading
/// vector is signed so its largest-magnitude entry is positive.
pub fn pca(x: &Mat, h: usize) -> Result<Pca> {
    let (n, g) = x.shape();
    if n < 2 {
        return Err(invalid_arg("PCA needs at least 2 rows"));
    }
    if h == 0 || h > n.min(g) {
        return Err(invalid_arg(format!("h = {h} must lie in 1..={}", n.min(g))));
    }
    ensure_finite(x)?;
    let xc = center_unchecked(x);
    let mut cov = xc.transpose() * &xc / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Mat::zeros(g, h);
    let mut explained_variance = Vec::with_capacity(h);
    for (c, &k) in order.iter().take(h).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = (0..g).fold(0, |best, r| if v[r].abs() > v[best].abs() { r } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..g {
            components[(r, c)] = v[r] * sign;
        }
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    let scores = xc * &components;
    Ok(Pca { scores, components, explained_variance, total_variance })
}

pub fn pca_embed(ids: Vec<String>, expression: &Mat, h: usize) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(ids, pca(expression, h)?.scores)
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn jaccard(a: &[usize], b: &[usize]) -> Result<f64> {
    let sa: HashSet<usize> = a.iter().copied().collect();
    let sb: HashSet<usize> = b.iter().copied().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return Err(invalid_arg("Jaccard of two empty sets is undefined"));
    }
    Ok(sa.intersection(&sb).count() as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub k_z: usize,
    pub tau_j: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k_z: 50, tau_j: 0.2 }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_z < 1 {
            return Err(invalid_arg("k_z must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.tau_j) {
            return Err(invalid_arg("tau_j must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Undirected graph stored as sorted neighbor lists with edge scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl LocalityGraph {
    pub fn empty(n: usize) -> Self {
        Self { adjacency: vec![Vec::new(); n] }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(i, j, w) in edges {
            g.add_edge(i, j, w)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search_by(|e| e.0.cmp(&j)).is_ok()
    }

    /// Inserts `(i, j)` in both directions; an existing edge is left alone.
    pub fn add_edge(&mut self, i: usize, j: usize, score: f64) -> Result<()> {
        let n = self.len();
        if i >= n || j >= n || i == j {
            return Err(invalid_arg(format!("invalid edge ({i}, {j})")));
        }
        for (a, b) in [(i, j), (j, i)] {
            if let Err(pos) = self.adjacency[a].binary_search_by(|e| e.0.cmp(&b)) {
                self.adjacency[a].insert(pos, (b, score));
            }
        }
        Ok(())
    }

    /// Edges with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, nb) in self.adjacency.iter().enumerate() {
            out.extend(nb.iter().filter(|e| e.0 > i).map(|&(j, w)| (i, j, w)));
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Component label per node, labels numbered in order of first node.
    pub fn components(&self) -> Vec<usize> {
        connected_components(self.len(), |i| self.adjacency[i].iter().map(|e| e.0).collect())
    }
}

pub(crate) fn connected_components(n: usize, neighbors: impl Fn(usize) -> Vec<usize>) -> Vec<usize> {
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in neighbors(u) {
                if label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    label
}

/// Keeps `(i, j)` iff each is among the other's `k_z` nearest neighbors and
/// their neighbor sets have Jaccard overlap at least `tau_j`.
pub fn mutual_knn_graph(z: &EmbeddingMatrix, cfg: &GraphConfig) -> Result<LocalityGraph> {
    cfg.validate()?;
    let n = z.values.nrows();
    if n <= cfg.k_z {
        return Err(invalid_arg(format!("need more than k_z = {} points, got {n}", cfg.k_z)));
    }
    let knn = knn_indices(&z.values, cfg.k_z);
    let sets: Vec<HashSet<usize>> = knn.iter().map(|v| v.iter().copied().collect()).collect();
    let mut g = LocalityGraph::empty(n);
    for i in 0..n {
        for &j in &knn[i] {
            if j > i && sets[j].contains(&i) {
                let inter = sets[i].intersection(&sets[j]).count();
                let union = sets[i].len() + sets[j].len() - inter;
                let jac = inter as f64 / union as f64;
                if jac >= cfg.tau_j {
                    g.add_edge(i, j, jac)?;
                }
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectReport {
    pub reattached: usize,
    pub bridges: usize,
}

/// Makes the graph connected so walks can reach every cell: isolated nodes are
/// joined to their nearest embedding neighbor, then each remaining component
/// is bridged to the rest by its closest embedding pair.
pub fn connect_graph(graph: &mut LocalityGraph, z: &EmbeddingMatrix) -> Result<ConnectReport> {
    let n = graph.len();
    if z.values.nrows() != n {
        return Err(invalid_arg("embedding and graph sizes differ"));
    }
    let mut report = ConnectReport::default();
    if n < 2 {
        return Ok(report);
    }
    let rows = rows_of(&z.values);
    let isolated: Vec<usize> = (0..n).filter(|&i| graph.degree(i) == 0).collect();
    if !isolated.is_empty() {
        let nn = knn_indices(&z.values, 1);
        for i in isolated {
            graph.add_edge(i, nn[i][0], 0.0)?;
            report.reattached += 1;
        }
    }
    loop {
        let label = graph.components();
        let n_comp = label.iter().max().map_or(0, |m| m + 1);
        if n_comp <= 1 {
            break;
        }
        let mut sizes = vec![0usize; n_comp];
        for &l in &label {
            sizes[l] += 1;
        }
        // Smallest component first, lowest label on ties.
        let target = (0..n_comp).min_by_key(|&c| (sizes[c], c)).expect("non-empty");
        let mut best = (f64::INFINITY, 0, 0);
        for i in (0..n).filter(|&i| label[i] == target) {
            for j in (0..n).filter(|&j| label[j] != target) {
                let d = squared_euclidean(&rows[i], &rows[j]);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        graph.add_edge(best.1, best.2, 0.0)?;
        report.bridges += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub n_patch: usize,
    pub walks_per_cell: usize,
    pub overlap_fraction: f64,
    pub min_shared: usize,
    /// Every cell is covered by at least this many patches (capped by the
    /// patch count when a single patch suffices).
    pub min_coverage: usize,
    pub restart_prob: f64,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            n_patch: 1024,
            walks_per_cell: 10,
            overlap_fraction: 0.7,
            min_shared: 25,
            min_coverage: 4,
            restart_prob: 0.1,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_shared < 1 || self.n_patch < self.min_shared {
            return Err(invalid_arg("need n_patch >= min_shared >= 1"));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(invalid_arg("overlap_fraction must lie in [0, 1)"));
        }
        if self.walks_per_cell < 1 || self.min_coverage < 1 {
            return Err(invalid_arg("walks_per_cell and min_coverage must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.restart_prob) {
            return Err(invalid_arg("restart_prob must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCover {
    pub patches: Vec<Vec<usize>>,
    /// Declared neighbor pairs `(p, q, |S_p ∩ S_q|)`: every pair sharing at
    /// least `min_shared` cells.
    pub neighbors: Vec<(usize, usize, usize)>,
}

impl PatchCover {
    fn from_patches(patches: Vec<Vec<usize>>, min_shared: usize, n: usize) -> Self {
        let members: Vec<Vec<bool>> = patches
            .iter()
            .map(|p| {
                let mut m = vec![false; n];
                p.iter().for_each(|&i| m[i] = true);
                m
            })
            .collect();
        let mut neighbors = Vec::new();
        for p in 0..patches.len() {
            for q in (p + 1)..patches.len() {
                let shared = patches[q].iter().filter(|&&i| members[p][i]).count();
                if shared >= min_shared {
                    neighbors.push((p, q, shared));
                }
            }
        }
        Self { patches, neighbors }
    }

    /// Coverage, declared-overlap and connectivity check.
    pub fn validate(&self, n: usize, min_shared: usize) -> Result<()> {
        let mut covered = vec![false; n];
        for p in &self.patches {
            for &i in p {
                if i >= n {
                    return Err(invalid_input(format!("patch index {i} out of range")));
                }
                covered[i] = true;
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(invalid_input(format!("cell {i} is not covered")));
        }
        for &(p, q, s) in &self.neighbors {
            let a: HashSet<usize> = self.patches[p].iter().copied().collect();
            let real = self.patches[q].iter().filter(|i| a.contains(i)).count();
            if real != s || s < min_shared {
                return Err(invalid_input(format!("patches {p} and {q} share {real} cells")));
            }
        }
        let m = self.patches.len();
        let adj = |p: usize| -> Vec<usize> {
            self.neighbors
                .iter()
                .filter_map(|&(a, b, _)| if a == p { Some(b) } else if b == p { Some(a) } else { None })
                .collect()
        };
        let labels = connected_components(m, adj);
        if labels.iter().any(|&l| l != 0) {
            return Err(invalid_input("patch-overlap graph is disconnected"));
        }
        Ok(())
    }

    pub fn coverage(&self, n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        self.patches.iter().flatten().for_each(|&i| c[i] += 1);
        c
    }
}

/// Distinct nodes in first-visit order: a restart walk of
/// `walks_per_cell·n_patch` steps from the seed, then BFS from the seed until
/// `want` nodes are collected (or the component is exhausted).
fn visit_order<R: Rng + ?Sized>(
    graph: &LocalityGraph,
    seed: usize,
    want: usize,
    cfg: &PatchConfig,
    rng: &mut R,
) -> Vec<usize> {
    let mut seen = HashSet::from([seed]);
    let mut order = vec![seed];
    let mut cur = seed;
    let budget = cfg.walks_per_cell * cfg.n_patch;
    for _ in 0..budget {
        if order.len() >= want {
            break;
        }
        let nb = graph.neighbors(cur);
        if nb.is_empty() || rng.random::<f64>() < cfg.restart_prob {
            cur = seed;
            continue;
        }
        cur = nb[rng.random_range(0..nb.len())].0;
        if seen.insert(cur) {
            order.push(cur);
        }
    }
    let mut queue = VecDeque::from([seed]);
    let mut expanded = HashSet::from([seed]);
    while order.len() < want {
        let Some(u) = queue.pop_front() else { break };
        for &(v, _) in graph.neighbors(u) {
            if expanded.insert(v) {
                queue.push_back(v);
            }
            if seen.insert(v) {
                order.push(v);
            }
        }
    }
    order
}

/// Overlapping patch cover built by restart random walks.
///
/// Each new patch is seeded at a covered cell on the frontier of the cover and
/// filled with at least `max(min_shared, ⌈overlap_fraction·n_patch⌉)`
/// already-covered cells, then with under-covered cells in walk order. This
/// continues until every cell is covered `min_coverage` times.
pub fn sample_patches<R: Rng + ?Sized>(graph: &LocalityGraph, cfg: &PatchConfig, rng: &mut R) -> Result<PatchCover> {
    cfg.validate()?;
    let n = graph.len();
    if n == 0 {
        return Err(invalid_arg("graph has no nodes"));
    }
    if graph.components().iter().any(|&l| l != 0) {
        return Err(invalid_arg("locality graph is disconnected; connect it first"));
    }
    if cfg.n_patch >= n {
        return Ok(PatchCover::from_patches(vec![(0..n).collect()], cfg.min_shared, n));
    }
    let quota = cfg.min_shared.max((cfg.overlap_fraction * cfg.n_patch as f64).ceil() as usize).min(cfg.n_patch);
    let mut cover = vec![0usize; n];
    let mut patches: Vec<Vec<usize>> = Vec::new();
    let mut members: Vec<HashSet<usize>> = Vec::new();
    let max_patches = 64 * (n * cfg.min_coverage).div_ceil(cfg.n_patch - quota.min(cfg.n_patch - 1)) + 16;

    loop {
        let needy = |c: &[usize], i: usize| c[i] < cfg.min_coverage;
        if (0..n).all(|i| !needy(&cover, i)) {
            break;
        }
        if patches.len() >= max_patches {
            return Err(invalid_input("patch cover did not converge"));
        }
        let seed = if patches.is_empty() {
            rng.random_range(0..n)
        } else {
            let uncovered_frontier: Vec<usize> = (0..n)
                .filter(|&i| cover[i] > 0 && graph.neighbors(i).iter().any(|&(j, _)| cover[j] == 0))
                .collect();
            let pool = if uncovered_frontier.is_empty() {
                (0..n)
                    .filter(|&i| cover[i] > 0 && (needy(&cover, i) || graph.neighbors(i).iter().any(|&(j, _)| needy(&cover, j))))
                    .collect()
            } else {
                uncovered_frontier
            };
            pool[rng.random_range(0..pool.len())]
        };
        let order = visit_order(graph, seed, 2 * cfg.n_patch, cfg, rng);

        let mut patch: Vec<usize> = Vec::with_capacity(cfg.n_patch);
        let mut inside = HashSet::new();
        let mut push = |v: usize, patch: &mut Vec<usize>| {
            if patch.len() < cfg.n_patch && inside.insert(v) {
                patch.push(v);
            }
        };
        if !patches.is_empty() {
            for &v in order.iter().filter(|&&v| cover[v] > 0).take(quota) {
                push(v, &mut patch);
            }
        }
        for &v in order.iter().filter(|&&v| needy(&cover, v)) {
            push(v, &mut patch);
        }
        for &v in &order {
            push(v, &mut patch);
        }
        if patch.len() < cfg.n_patch {
            // Walk and BFS cover the whole connected graph, so this only
            // happens when n_patch exceeds the reachable set.
            return Err(invalid_input("could not collect n_patch cells"));
        }

        if !members.is_empty() {
            let overlaps: Vec<usize> = members.iter().map(|m| patch.iter().filter(|v| m.contains(v)).count()).collect();
            let (best_q, &best) = overlaps.iter().enumerate().max_by_key(|&(q, &o)| (o, std::cmp::Reverse(q))).expect("non-empty");
            if best < cfg.min_shared {
                let in_patch: HashSet<usize> = patch.iter().copied().collect();
                let mut extra = patches[best_q].iter().filter(|v| !in_patch.contains(v)).copied();
                let first_needy = patch.iter().position(|&v| needy(&cover, v));
                let mut missing = cfg.min_shared - best;
                let mut pos = patch.len();
                while missing > 0 && pos > 0 {
                    pos -= 1;
                    if members[best_q].contains(&patch[pos]) || Some(pos) == first_needy {
                        continue;
                    }
                    match extra.next() {
                        Some(v) => {
                            patch[pos] = v;
                            missing -= 1;
                        }
                        None => break,
                    }
                }
            }
        }
        for &v in &patch {
            cover[v] += 1;
        }
        members.push(patch.iter().copied().collect());
        patches.push(patch);
    }
    Ok(PatchCover::from_patches(patches, cfg.min_shared, n))
}
