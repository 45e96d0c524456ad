//! Forman-Ricci curvature of weighted edges.
//!
//! For an undirected edge `e = (v1, v2)` with weight `w(e)` and node weights
//! `w(v)`:
//!
//! ```text
//! Ric(e) = w(e) · ( w(v1)/w(e) + w(v2)/w(e)
//!                  - Σ_{e1 ~ v1, e1 ≠ e} w(v1) / √(w(e)·w(e1))
//!                  - Σ_{e2 ~ v2, e2 ≠ e} w(v2) / √(w(e)·w(e2)) )
//! ```
//!
//! The directed graph is read as undirected; when both directions of a
//! pair are stored the larger weight is used.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Graph;

const MIN_WEIGHT: f64 = 1e-12;

/// Curvature per undirected edge, keyed by `(min(u, v), max(u, v))`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurvatureMap {
    values: BTreeMap<(usize, usize), f64>,
}

fn key(u: usize, v: usize) -> (usize, usize) {
    (u.min(v), u.max(v))
}

impl CurvatureMap {
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        self.values.get(&key(u, v)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.values.iter().map(|(k, v)| (*k, *v))
    }

    pub fn insert(&mut self, u: usize, v: usize, value: f64) {
        self.values.insert(key(u, v), value);
    }

    /// One value per directed edge of `g`; both directions share a value.
    pub fn per_edge(&self, g: &Graph) -> Result<Vec<f64>> {
        let mut missing = Vec::new();
        let values: Vec<f64> = g
            .edges()
            .enumerate()
            .map(|(id, e)| {
                self.get(e.src, e.dst).unwrap_or_else(|| {
                    missing.push(id);
                    f64::NAN
                })
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEdges(missing));
        }
        Ok(values)
    }
}

/// Computes Forman-Ricci curvature for every edge of `g`.
///
/// `node_weights` defaults to 1; `edge_weights` (one per directed edge)
/// defaults to the graph's stored weights. Zero weights are clamped to
/// 1e-12.
pub fn forman_ricci(
    g: &Graph,
    node_weights: Option<&[f64]>,
    edge_weights: Option<&[f64]>,
) -> Result<CurvatureMap> {
    let n = g.n_nodes();
    if let Some(nw) = node_weights {
        if nw.len() != n {
            return Err(Error::shape("forman_ricci", &[n], &[nw.len()]));
        }
        if nw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("node weights must be non-negative".into()));
        }
    }
    let weights = edge_weights.unwrap_or_else(|| g.weights());
    if weights.len() != g.n_edges() {
        return Err(Error::shape("forman_ricci", &[g.n_edges()], &[weights.len()]));
    }
    let mut undirected: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut clamped = 0usize;
    for (id, e) in g.edges().enumerate() {
        let mut w = weights[id];
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidWeight { edge: id, weight: w });
        }
        if w == 0.0 {
            clamped += 1;
            w = MIN_WEIGHT;
        }
        let slot = undirected.entry(key(e.src, e.dst)).or_insert(w);
        *slot = slot.max(w);
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} zero-weight edges to {MIN_WEIGHT:e} for curvature");
    }
    let mut incident: Vec<Vec<f64>> = vec![Vec::new(); n];
    for (&(u, v), &w) in &undirected {
        incident[u].push(w);
        incident[v].push(w);
    }
    // Σ_{e' ~ v} 1/√w(e') including e itself; e's own term is removed below.
    let inv_sqrt_sum: Vec<f64> = incident
        .iter()
        .map(|ws| ws.iter().map(|w| 1.0 / w.sqrt()).sum())
        .collect();
    let node_w = |v: usize| node_weights.map_or(1.0, |nw| nw[v]);
    let mut map = CurvatureMap::default();
    for (&(u, v), &w) in &undirected {
        let (wu, wv) = (node_w(u), node_w(v));
        let own = 1.0 / w.sqrt();
        let su = inv_sqrt_sum[u] - own;
        let sv = inv_sqrt_sum[v] - own;
        let ric = w * (wu / w + wv / w - wu * su / w.sqrt() - wv * sv / w.sqrt());
        map.values.insert((u, v), ric);
    }
    Ok(map)
}
