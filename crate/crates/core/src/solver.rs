//! Global 2D distance-geometry solve: Landmark-Isomap initialization and
//! weighted Huber refinement with an anchor term.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{pairwise_distances, Mat};
use crate::patch_graph::connected_components;
use crate::stitching::{quantile_sorted, StitchedEdge, StitchedGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n_landmarks: usize,
    pub iterations: usize,
    pub huber_delta: f64,
    /// Weight on the mean squared displacement from the initialization.
    pub anchor_weight: f64,
    pub step_size: f64,
    /// Learning rate at the last iteration as a fraction of `step_size`
    /// (geometric decay); 1 disables decay.
    pub final_lr_fraction: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_landmarks: 128,
            iterations: 1000,
            huber_delta: 0.1,
            anchor_weight: 0.1,
            step_size: 1e-2,
            final_lr_fraction: 0.01,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_landmarks < 3 {
            return Err(invalid_arg("n_landmarks must be at least 3"));
        }
        if self.iterations < 1 || self.checkpoint_every < 1 {
            return Err(invalid_arg("iterations and checkpoint_every must be at least 1"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(invalid_arg("huber_delta must be positive"));
        }
        if !(self.anchor_weight >= 0.0) {
            return Err(invalid_arg("anchor_weight must be non-negative"));
        }
        if !(self.step_size > 0.0) || !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(invalid_arg("step_size must be positive and final_lr_fraction in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Arc {
    to: usize,
    w: f64,
}

fn adjacency(n: usize, edges: &[StitchedEdge]) -> Vec<Vec<Arc>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.i].push(Arc { to: e.j, w: e.d });
        adj[e.j].push(Arc { to: e.i, w: e.d });
    }
    adj
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adj: &[Vec<Arc>], src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([HeapItem(0.0, src)]);
    while let Some(HeapItem(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for a in &adj[u] {
            let nd = d + a.w;
            if nd < dist[a.to] {
                dist[a.to] = nd;
                heap.push(HeapItem(nd, a.to));
            }
        }
    }
    dist
}

/// Landmark Isomap on a connected graph given as adjacency lists.
fn isomap_connected<R: Rng + ?Sized>(adj: &[Vec<Arc>], n_landmarks: usize, rng: &mut R) -> Result<Mat> {
    let n = adj.len();
    let m = n_landmarks.min(n);
    if m < 3 {
        return Err(Error::InitializationFailure(format!("only {m} landmarks reachable")));
    }
    // Farthest-point sampling on graph distances from a random start.
    let mut landmarks = vec![rng.random_range(0..n)];
    let mut rows: Vec<Vec<f64>> = vec![dijkstra(adj, landmarks[0])];
    let mut mindist = rows[0].clone();
    while landmarks.len() < m {
        let next = (0..n).fold(0, |best, i| if mindist[i] > mindist[best] { i } else { best });
        if mindist[next] == 0.0 {
            break;
        }
        landmarks.push(next);
        let d = dijkstra(adj, next);
        for (md, v) in mindist.iter_mut().zip(&d) {
            *md = md.min(*v);
        }
        rows.push(d);
    }
    let m = landmarks.len();
    if m < 3 {
        return Err(Error::InitializationFailure(format!("only {m} distinct landmarks")));
    }
    if rows.iter().flatten().any(|d| !d.is_finite()) {
        return Err(Error::InitializationFailure("graph is disconnected".into()));
    }

    let delta = Mat::from_fn(m, m, |a, b| rows[a][landmarks[b]].powi(2));
    let delta = (&delta + delta.transpose()) * 0.5;
    let col_mean: Vec<f64> = (0..m).map(|b| delta.column(b).mean()).collect();
    let grand = col_mean.iter().sum::<f64>() / m as f64;
    let b = Mat::from_fn(m, m, |i, j| -0.5 * (delta[(i, j)] - col_mean[i] - col_mean[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let l1 = eig.eigenvalues[order[0]];
    if !(l1 > 0.0) {
        return Err(Error::InitializationFailure("landmark MDS has no positive eigenvalue".into()));
    }
    let l2 = eig.eigenvalues[order[1]];
    let degenerate = !(l2 > 1e-12 * l1);

    // Triangulation x_k = −½ v_k/√λ_k · (δ_x − δ̄).
    let mut x = Mat::zeros(n, 2);
    let pinv: Vec<(Vec<f64>, bool)> = [order[0], order[1]]
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let lam = eig.eigenvalues[e];
            let ok = k == 0 || !degenerate;
            let v: Vec<f64> = (0..m).map(|r| if ok { eig.eigenvectors[(r, e)] / lam.sqrt() } else { 0.0 }).collect();
            (v, ok)
        })
        .collect();
    for i in 0..n {
        for (k, (v, ok)) in pinv.iter().enumerate() {
            if !ok {
                continue;
            }
            let mut acc = 0.0;
            for a in 0..m {
                acc += v[a] * (rows[a][i].powi(2) - col_mean[a]);
            }
            x[(i, k)] = -0.5 * acc;
        }
    }
    if degenerate {
        let scale = 1e-7 * (l1 / m as f64).sqrt();
        for i in 0..n {
            x[(i, 1)] = scale * (rng.random::<f64>() - 0.5);
        }
    }
    Ok(crate::geometry::center_unchecked(&x))
}

#[derive(Debug, Clone)]
pub struct InitResult {
    /// Coordinates for every node; nodes outside the largest component sit
    /// at the origin.
    pub coords: Mat,
    pub orphans: usize,
}

/// Landmark Isomap over the largest connected component of the graph.
pub fn landmark_isomap_init<R: Rng + ?Sized>(graph: &StitchedGraph, cfg: &SolverConfig, rng: &mut R) -> Result<InitResult> {
    cfg.validate()?;
    let (label, sizes) = components(graph);
    let big = (0..sizes.len()).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).ok_or_else(|| invalid_arg("empty graph"))?;
    let members: Vec<usize> = (0..graph.n).filter(|&i| label[i] == big).collect();
    let sub = subgraph(graph, &members, &label, big);
    let local = isomap_connected(&adjacency(members.len(), &sub), cfg.n_landmarks, rng)?;
    let mut coords = Mat::zeros(graph.n, 2);
    for (r, &g) in members.iter().enumerate() {
        coords[(g, 0)] = local[(r, 0)];
        coords[(g, 1)] = local[(r, 1)];
    }
    Ok(InitResult { coords, orphans: graph.n - members.len() })
}

fn components(graph: &StitchedGraph) -> (Vec<usize>, Vec<usize>) {
    let adj = adjacency(graph.n, &graph.edges);
    let label = connected_components(graph.n, |i| adj[i].iter().map(|a| a.to).collect());
    let mut sizes = vec![0; label.iter().max().map_or(0, |m| m + 1)];
    for &l in &label {
        sizes[l] += 1;
    }
    (label, sizes)
}

fn subgraph(graph: &StitchedGraph, members: &[usize], label: &[usize], comp: usize) -> Vec<StitchedEdge> {
    let mut local = vec![usize::MAX; graph.n];
    for (r, &g) in members.iter().enumerate() {
        local[g] = r;
    }
    graph
        .edges
        .iter()
        .filter(|e| label[e.i] == comp)
        .map(|e| StitchedEdge { i: local[e.i], j: local[e.j], ..*e })
        .collect()
}

fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

/// `Σ ω·H_δ(‖x_i − x_j‖ − d) + anchor·‖X − X0‖²_F` and its gradient.
pub fn huber_stress(x: &Mat, edges: &[StitchedEdge], x0: &Mat, anchor_weight: f64, delta: f64) -> Result<(f64, Mat)> {
    if x.shape() != x0.shape() || x.ncols() != 2 {
        return Err(invalid_arg("X and X0 must both be N×2"));
    }
    let n = x.nrows();
    let mut value = 0.0;
    let mut grad = Mat::zeros(n, 2);
    for e in edges {
        if e.i >= n || e.j >= n {
            return Err(invalid_arg("edge endpoint out of range"));
        }
        let dx = x[(e.i, 0)] - x[(e.j, 0)];
        let dy = x[(e.i, 1)] - x[(e.j, 1)];
        let len = (dx * dx + dy * dy).sqrt();
        let (h, psi) = huber(len - e.d, delta);
        value += e.omega * h;
        if len > 0.0 {
            let s = e.omega * psi / len;
            grad[(e.i, 0)] += s * dx;
            grad[(e.i, 1)] += s * dy;
            grad[(e.j, 0)] -= s * dx;
            grad[(e.j, 1)] -= s * dy;
        }
    }
    if anchor_weight > 0.0 {
        let diff = x - x0;
        value += anchor_weight * diff.norm_squared();
        grad += diff * (2.0 * anchor_weight);
    }
    Ok((value, grad))
}

/// Kruskal Stress-1 restricted to graph edges.
pub fn edge_stress1(x: &Mat, edges: &[StitchedEdge]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for e in edges {
        let len = (x.row(e.i) - x.row(e.j)).norm();
        num += (len - e.d).powi(2);
        den += e.d * e.d;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub objective: f64,
    pub edge_stress1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// One trajectory per component, largest component first.
    pub trajectories: Vec<Vec<Checkpoint>>,
    /// Absolute edge residuals in normalized (unit-median) units.
    pub residuals: ResidualStats,
    pub initial_stress1: f64,
    pub final_stress1: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub scale_factor: f64,
    pub components: usize,
    pub component_sizes: Vec<usize>,
    pub aborted: bool,
    /// Iterations where the objective rose above the value 100 iterations
    /// earlier (logged, not fatal).
    pub window_violations: usize,
}

struct ComponentSolve {
    x: Mat,
    trajectory: Vec<Checkpoint>,
    initial_objective: f64,
    final_objective: f64,
    aborted: bool,
    window_violations: usize,
}

fn refine(x0: &Mat, edges: &[StitchedEdge], cfg: &SolverConfig) -> Result<ComponentSolve> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    // The anchor acts on the mean squared displacement so its pull does not
    // grow with the number of cells.
    let anchor = cfg.anchor_weight / x0.nrows() as f64;
    let mut x = x0.clone();
    let mut m = Mat::zeros(x.nrows(), 2);
    let mut v = Mat::zeros(x.nrows(), 2);
    let (f0, mut g) = huber_stress(&x, edges, x0, anchor, cfg.huber_delta)?;
    let mut best = (f0, x.clone());
    let mut trajectory = vec![Checkpoint { iteration: 0, objective: f0, edge_stress1: edge_stress1(&x, edges) }];
    let mut history = vec![f0];
    let mut aborted = false;
    let mut window_violations = 0;
    let decay = cfg.final_lr_fraction.powf(1.0 / cfg.iterations.max(1) as f64);
    let mut lr = cfg.step_size;
    for t in 1..=cfg.iterations {
        m = m * b1 + &g * (1.0 - b1);
        v = v * b2 + g.component_mul(&g) * (1.0 - b2);
        let mc = 1.0 - b1.powi(t as i32);
        let vc = 1.0 - b2.powi(t as i32);
        for k in 0..x.len() {
            x[k] -= lr * (m[k] / mc) / ((v[k] / vc).sqrt() + eps);
        }
        lr *= decay;
        let (f, ng) = huber_stress(&x, edges, x0, anchor, cfg.huber_delta)?;
        if !f.is_finite() || ng.iter().any(|z| !z.is_finite()) {
            log::warn!("non-finite stress at iteration {t}; keeping last finite iterate");
            aborted = true;
            break;
        }
        g = ng;
        if f < best.0 {
            best = (f, x.clone());
        }
        if t >= 100 && f > history[t - 100] {
            window_violations += 1;
        }
        history.push(f);
        if t % cfg.checkpoint_every == 0 || t == cfg.iterations {
            trajectory.push(Checkpoint { iteration: t, objective: f, edge_stress1: edge_stress1(&x, edges) });
        }
    }
    if window_violations > 0 {
        log::debug!("stress rose over a 100-iteration window {window_violations} times");
    }
    Ok(ComponentSolve { x: best.1, trajectory, initial_objective: f0, final_objective: best.0, aborted, window_violations })
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub coords: Mat,
    pub diagnostics: SolveDiagnostics,
}

/// Full solve: normalize edges to unit median, initialize and refine each
/// component, lay components out on a grid and rescale.
pub fn solve<R: Rng + ?Sized>(graph: &StitchedGraph, cfg: &SolverConfig, rng: &mut R) -> Result<SolveResult> {
    cfg.validate()?;
    if graph.edges.is_empty() {
        return Err(invalid_arg("stitched graph has no edges"));
    }
    for e in &graph.edges {
        if !(e.d > 0.0 && e.d.is_finite() && e.omega > 0.0 && e.omega.is_finite()) || e.i == e.j || e.i >= graph.n || e.j >= graph.n {
            return Err(invalid_arg(format!("invalid edge ({}, {})", e.i, e.j)));
        }
    }
    let mut ds: Vec<f64> = graph.edges.iter().map(|e| e.d).collect();
    ds.sort_by(f64::total_cmp);
    let scale = quantile_sorted(&ds, 0.5);
    let norm_edges: Vec<StitchedEdge> = graph.edges.iter().map(|e| StitchedEdge { d: e.d / scale, ..*e }).collect();
    let normalized = StitchedGraph { n: graph.n, edges: norm_edges };

    let (label, sizes) = components(&normalized);
    let mut comps: Vec<usize> = (0..sizes.len()).collect();
    comps.sort_by_key(|&c| (std::cmp::Reverse(sizes[c]), c));
    if comps.len() > 1 {
        log::warn!("stitched graph has {} components; solving each separately", comps.len());
    }

    // Initialization consumes the rng in component order.
    let mut inits = Vec::with_capacity(comps.len());
    for &c in &comps {
        let members: Vec<usize> = (0..graph.n).filter(|&i| label[i] == c).collect();
        let sub = subgraph(&normalized, &members, &label, c);
        let x0 = match members.len() {
            1 => Mat::zeros(1, 2),
            2 => {
                let d = sub[0].d;
                Mat::from_row_slice(2, 2, &[-0.5 * d, 0.0, 0.5 * d, 0.0])
            }
            _ => isomap_connected(&adjacency(members.len(), &sub), cfg.n_landmarks, rng)?,
        };
        inits.push((members, sub, x0));
    }
    let solved: Vec<ComponentSolve> = inits
        .par_iter()
        .map(|(_, sub, x0)| refine(x0, sub, cfg))
        .collect::<Result<_>>()?;

    let mut coords = Mat::zeros(graph.n, 2);
    let cols = (comps.len() as f64).sqrt().ceil() as usize;
    let diam = |x: &Mat| -> f64 {
        if x.nrows() < 2 {
            return 0.0;
        }
        let w = x.column(0).max() - x.column(0).min();
        let h = x.column(1).max() - x.column(1).min();
        (w * w + h * h).sqrt()
    };
    let cell = 3.0 * solved.iter().map(|s| diam(&s.x)).fold(1.0f64, f64::max);
    for (k, ((members, _, _), s)) in inits.iter().zip(&solved).enumerate() {
        let xc = crate::geometry::center_unchecked(&s.x);
        let offset = if k == 0 { (0.0, 0.0) } else { ((k % cols) as f64 * cell, (k / cols) as f64 * cell) };
        for (r, &g) in members.iter().enumerate() {
            coords[(g, 0)] = (xc[(r, 0)] + offset.0) * scale;
            coords[(g, 1)] = (xc[(r, 1)] + offset.1) * scale;
        }
    }

    let mut residuals: Vec<f64> = normalized
        .edges
        .iter()
        .map(|e| ((coords.row(e.i) - coords.row(e.j)).norm() / scale - e.d).abs())
        .collect();
    residuals.sort_by(f64::total_cmp);
    let rstats = ResidualStats {
        mean: residuals.iter().sum::<f64>() / residuals.len() as f64,
        median: quantile_sorted(&residuals, 0.5),
        max: *residuals.last().expect("non-empty"),
    };
    let mut x_init = Mat::zeros(graph.n, 2);
    for (members, _, x0) in &inits {
        for (r, &g) in members.iter().enumerate() {
            x_init[(g, 0)] = x0[(r, 0)];
            x_init[(g, 1)] = x0[(r, 1)];
        }
    }
    let diagnostics = SolveDiagnostics {
        trajectories: solved.iter().map(|s| s.trajectory.clone()).collect(),
        residuals: rstats,
        initial_stress1: edge_stress1(&x_init, &normalized.edges),
        final_stress1: edge_stress1(&(&coords / scale), &normalized.edges),
        initial_objective: solved.iter().map(|s| s.initial_objective).sum(),
        final_objective: solved.iter().map(|s| s.final_objective).sum(),
        scale_factor: scale,
        components: comps.len(),
        component_sizes: comps.iter().map(|&c| sizes[c]).collect(),
        aborted: solved.iter().any(|s| s.aborted),
        window_violations: solved.iter().map(|s| s.window_violations).sum(),
    };
    Ok(SolveResult { coords, diagnostics })
}

pub fn dense_distances(x: &Mat) -> Mat {
    pairwise_distances(x)
}
