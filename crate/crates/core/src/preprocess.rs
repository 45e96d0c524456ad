//! Count normalization, PCA and exact (batch-balanced) kNN graphs.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, Graph};
use crate::tensor::Tensor;

/// Scales every row to the median row sum, then takes element-wise square
/// roots. Applying it twice is not the same as applying it once.
pub fn normalize_counts(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "count matrix entries must be finite and non-negative".into(),
        ));
    }
    let sums: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
    let zero: Vec<usize> = sums
        .iter()
        .enumerate()
        .filter_map(|(i, s)| (*s == 0.0).then_some(i))
        .collect();
    if !zero.is_empty() {
        return Err(Error::ZeroRows(zero));
    }
    let target = median(&sums);
    let mut out = x.clone();
    for (r, s) in sums.iter().enumerate() {
        let scale = target / s;
        out.row_mut(r).iter_mut().for_each(|v| *v = (*v * scale).sqrt());
    }
    Ok(out)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Principal components of a centered feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// `[F × d]`, orthonormal columns ordered by explained variance.
    pub components: Tensor,
    pub means: Vec<f64>,
    /// Variance along each component (denominator `n - 1`), non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn fit(x: &Tensor, d: usize) -> Result<Self> {
        let (n, f) = (x.rows(), x.cols());
        if n < 2 || d == 0 || d > (n - 1).min(f) {
            return Err(Error::InvalidArgument(format!(
                "PCA dimension {d} must lie in 1..=min(n - 1, F) = {}",
                (n.max(1) - 1).min(f)
            )));
        }
        let means: Vec<f64> = (0..f)
            .map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, f, |r, c| x.get(r, c) - means[c]);
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut components = Tensor::zeros(vec![f, d]);
        let mut explained_variance = Vec::with_capacity(d);
        for (j, &k) in order.iter().take(d).enumerate() {
            let col = eig.eigenvectors.column(k);
            // Sign convention: largest-magnitude entry positive.
            let pivot = (0..f)
                .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
                .unwrap_or(0);
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..f {
                components.set(r, j, sign * col[r]);
            }
            explained_variance.push(eig.eigenvalues[k].max(0.0));
        }
        Ok(PcaModel {
            components,
            means,
            explained_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.cols()
    }

    /// Projects rows of `x` onto the components: `(x - mean) · C`.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.means.len();
        if x.cols() != f {
            return Err(Error::shape("pca_transform", x.shape(), &[f]));
        }
        let d = self.dim();
        let mut out = Tensor::zeros(vec![x.rows(), d]);
        for r in 0..x.rows() {
            let row = x.row(r);
            for j in 0..d {
                let mut s = 0.0;
                for c in 0..f {
                    s += (row[c] - self.means[c]) * self.components.get(c, j);
                }
                out.set(r, j, s);
            }
        }
        Ok(out)
    }

    /// Maps projected coordinates back to feature space.
    pub fn inverse_transform(&self, z: &Tensor) -> Result<Tensor> {
        let (f, d) = (self.means.len(), self.dim());
        if z.cols() != d {
            return Err(Error::shape("pca_inverse_transform", z.shape(), &[d]));
        }
        let mut out = Tensor::zeros(vec![z.rows(), f]);
        for r in 0..z.rows() {
            for c in 0..f {
                let mut s = self.means[c];
                for j in 0..d {
                    s += z.get(r, j) * self.components.get(c, j);
                }
                out.set(r, c, s);
            }
        }
        Ok(out)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` candidates nearest to row `i`, ties broken by lower id.
fn nearest(z: &Tensor, i: usize, candidates: impl Iterator<Item = usize>, k: usize) -> Vec<Edge> {
    let row = z.row(i);
    let mut dists: Vec<(f64, usize)> = candidates
        .filter(|&j| j != i)
        .map(|j| (sq_dist(row, z.row(j)), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(dists.len());
    if k < dists.len() && k > 0 {
        dists.select_nth_unstable_by(k - 1, cmp);
        dists.truncate(k);
    } else {
        dists.truncate(k);
    }
    dists.sort_by(cmp);
    dists
        .into_iter()
        .map(|(d2, j)| Edge::new(i, j, d2.sqrt()))
        .collect()
}

/// Exact directed kNN graph; edge weight is the Euclidean distance.
pub fn knn_graph(z: &Tensor, k: usize) -> Result<Vec<Edge>> {
    let n = z.rows();
    if k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} must be < n = {n}")));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| nearest(z, i, 0..n, k))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

/// Batch-balanced kNN: each node links to its `k_per_batch` nearest nodes
/// inside every batch (its own included, itself excluded). Batches smaller
/// than `k_per_batch` contribute all their members.
pub fn bbknn_graph(z: &Tensor, batch: &[usize], k_per_batch: usize) -> Result<Vec<Edge>> {
    let n = z.rows();
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch label array".into()));
    }
    if batch.len() != n {
        return Err(Error::shape("bbknn_graph", z.shape(), &[batch.len()]));
    }
    let n_batches = batch.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_batches];
    for (i, &b) in batch.iter().enumerate() {
        members[b].push(i);
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            members
                .iter()
                .flat_map(|m| nearest(z, i, m.iter().copied(), k_per_batch))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Knn,
    Bbknn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphBuildConfig {
    pub pca_dim: usize,
    /// Neighbors per node (`knn`) or per node and batch (`bbknn`).
    pub k: usize,
    pub mode: GraphMode,
    pub symmetrize: bool,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        GraphBuildConfig {
            pca_dim: 50,
            k: 3,
            mode: GraphMode::Bbknn,
            symmetrize: false,
        }
    }
}

/// PCA projection followed by a (batch-balanced) kNN graph. The returned
/// graph carries `x` as its node features, edge weights are distances in the
/// PCA space, and batch labels are attached when given.
pub fn build_graph(x: &Tensor, batch: Option<&[usize]>, cfg: &GraphBuildConfig) -> Result<Graph> {
    let n = x.rows();
    let max_dim = n.saturating_sub(1).min(x.cols());
    if max_dim == 0 {
        return Err(Error::InvalidArgument("need at least two nodes and one feature".into()));
    }
    let dim = cfg.pca_dim.min(max_dim);
    if dim < cfg.pca_dim {
        log::warn!("PCA dimension clamped from {} to {dim}", cfg.pca_dim);
    }
    let z = PcaModel::fit(x, dim)?.transform(x)?;
    let edges = match (cfg.mode, batch) {
        (GraphMode::Knn, _) => knn_graph(&z, cfg.k)?,
        (GraphMode::Bbknn, Some(b)) => bbknn_graph(&z, b, cfg.k)?,
        (GraphMode::Bbknn, None) => {
            return Err(Error::InvalidArgument("bbknn needs batch labels".into()));
        }
    };
    let mut g = Graph::new(n, edges, x.clone())?;
    if cfg.symmetrize {
        g = g.symmetrize()?;
    }
    match batch {
        Some(b) => g.with_batch(b.to_vec()),
        None => Ok(g),
    }
}
