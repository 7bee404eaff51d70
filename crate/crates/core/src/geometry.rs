//! Geometric primitives: centering, Gram matrices, the canonical Gram
//! factorization, orthogonal Procrustes alignment and pairwise distances.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid_arg, invalid_input, Result};

pub type Mat = DMatrix<f64>;

/// Latent geometry `V` (n×d). `V·Vᵀ` is the pose-invariant shape.
pub type GeometryFactor = Mat;

/// Eigenvalues below this fraction of the trace are treated as exact zeros.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// 2D positions keyed by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateTable {
    pub ids: Vec<String>,
    pub coords: Mat,
}

impl CoordinateTable {
    pub fn new(ids: Vec<String>, coords: Mat) -> Result<Self> {
        if ids.is_empty() {
            return Err(invalid_input("coordinate table must have at least one row"));
        }
        if coords.nrows() != ids.len() || coords.ncols() != 2 {
            return Err(invalid_input(format!(
                "coordinate table shape {}x{} does not match {} ids",
                coords.nrows(),
                coords.ncols(),
                ids.len()
            )));
        }
        ensure_finite(&coords)?;
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(invalid_input(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { ids, coords })
    }

    /// Table with ids `0..n` as strings.
    pub fn with_index_ids(coords: Mat) -> Result<Self> {
        let ids = (0..coords.nrows()).map(|i| i.to_string()).collect();
        Self::new(ids, coords)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.coords[(i, 0)], self.coords[(i, 1)]]
    }

    /// Rows restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        Self::new(ids, select_rows(&self.coords, indices))
    }
}

/// Symmetric positive semidefinite `Y·Yᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Mat);

impl GramMatrix {
    /// Wraps a matrix after checking symmetry.
    pub fn new(values: Mat) -> Result<Self> {
        if !values.is_square() {
            return Err(invalid_input("Gram matrix must be square"));
        }
        ensure_finite(&values)?;
        let scale = values.amax().max(1.0);
        let n = values.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-9 * scale {
                    return Err(invalid_input(format!(
                        "Gram matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

pub(crate) fn ensure_finite(m: &Mat) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid_input("matrix contains non-finite entries"))
    }
}

pub fn select_rows(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Subtracts column means.
pub fn center(coords: &Mat) -> Result<Mat> {
    if coords.nrows() == 0 {
        return Err(invalid_input("cannot center an empty matrix"));
    }
    ensure_finite(coords)?;
    Ok(center_unchecked(coords))
}

pub(crate) fn center_unchecked(coords: &Mat) -> Mat {
    let n = coords.nrows() as f64;
    let mut out = coords.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

pub fn gram(y: &Mat) -> Result<GramMatrix> {
    ensure_finite(y)?;
    let g = y * y.transpose();
    // Symmetrize away rounding asymmetry from the product.
    let g = (&g + g.transpose()) * 0.5;
    Ok(GramMatrix(g))
}

/// `V = U[:, :d]·Λ^{1/2}` with columns in non-increasing eigenvalue order.
///
/// Negative eigenvalues and those below [`RANK_TOLERANCE`]·trace are clamped to
/// zero, so a rank-r Gram matrix yields exactly r nonzero columns. Each
/// eigenvector is signed so that its first nonzero component is positive.
pub fn canonical_factor(g: &GramMatrix, d: usize) -> Result<GeometryFactor> {
    let n = g.dim();
    if d == 0 {
        return Err(invalid_arg("latent dimension d must be positive"));
    }
    if d > n {
        return Err(invalid_arg(format!("latent dimension d={d} exceeds n={n}")));
    }
    let eig = SymmetricEigen::new(g.values().clone());
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps original index order on ties.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let cutoff = RANK_TOLERANCE * g.trace().abs();
    let mut v = Mat::zeros(n, d);
    for (col, &k) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= cutoff || lambda <= 0.0 {
            continue;
        }
        let vec = eig.eigenvectors.column(k);
        let pivot_tol = 1e-12 * vec.amax();
        let sign = vec
            .iter()
            .find(|x| x.abs() > pivot_tol)
            .map_or(1.0, |x| x.signum());
        let s = lambda.sqrt() * sign;
        for r in 0..n {
            v[(r, col)] = vec[r] * s;
        }
    }
    Ok(v)
}

/// Result of an orthogonal Procrustes fit.
#[derive(Debug, Clone)]
pub struct Procrustes {
    /// Orthogonal `d×d` map (rotation or reflection).
    pub rotation: Mat,
    /// `center(A)·Q`.
    pub aligned: Mat,
}

impl Procrustes {
    /// Frobenius distance between the aligned source and the centered target.
    pub fn residual(&self, target: &Mat) -> f64 {
        (&self.aligned - center_unchecked(target)).norm()
    }
}

/// Finds `Q ∈ O(d)` minimizing `‖A·Q − B‖_F` after centering both inputs.
///
/// When `AᵀB` vanishes every `Q` is optimal and the identity is returned.
pub fn procrustes_align(a: &Mat, b: &Mat) -> Result<Procrustes> {
    if a.shape() != b.shape() {
        return Err(invalid_arg(format!(
            "Procrustes shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.nrows() == 0 {
        return Err(invalid_arg("Procrustes needs at least one row"));
    }
    ensure_finite(a)?;
    ensure_finite(b)?;
    let ac = center_unchecked(a);
    let bc = center_unchecked(b);
    let m = ac.transpose() * &bc;
    let d = a.ncols();
    let scale = ac.norm() * bc.norm();
    let rotation = if m.norm() <= 1e-14 * scale || scale == 0.0 {
        Mat::identity(d, d)
    } else {
        let svd = m.svd(true, true);
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested Vᵀ");
        u * vt
    };
    let aligned = &ac * &rotation;
    Ok(Procrustes { rotation, aligned })
}

/// All-pairs Euclidean distances between rows.
pub fn pairwise_distances(v: &Mat) -> Mat {
    let n = v.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| v.row(i).iter().copied().collect()).collect();
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = euclidean(&rows[i], &rows[j]);
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    d
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rows of `m` as owned vectors, for tight loops.
pub fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Indices of the `k` nearest rows of every row, self excluded, nearest
/// first, ties broken by index.
pub fn knn_indices(m: &Mat, k: usize) -> Vec<Vec<usize>> {
    use rayon::prelude::*;
    let rows = rows_of(m);
    let n = rows.len();
    let k = k.min(n.saturating_sub(1));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_euclidean(&rows[i], &rows[j]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() && k > 0 {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            cand.truncate(k);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Haar-distributed element of O(d) (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Mat {
    let g = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}
