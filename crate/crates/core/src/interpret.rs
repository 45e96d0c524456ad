//! Post-hoc readouts of a trained model: per-head input-feature saliency,
//! edge-feature importance, and a graph reweighted by Set Transformer
//! attention.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::edge_features::EdgeFeatureTable;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::GatLayer;
use crate::params::ModelParams;
use crate::pipeline::MainModel;
use crate::set_transformer::{EdgeSetBatch, SetEncoder};
use crate::tensor::Tensor;
use crate::unsupervised::{louvain_weighted, CommunityAssignment, UndirectedGraph};

/// Per-head input-feature weights, min-max normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub top_k: usize,
    /// `weights[h][f]` for head `h` and input feature `f`.
    pub weights: Vec<Vec<f64>>,
    /// Per head, the `top_k` features by weight, ties by lower index.
    pub ranked: Vec<Vec<(usize, f64)>>,
}

impl SaliencyReport {
    pub fn heads(&self) -> usize {
        self.weights.len()
    }

    /// Feature ranked first in each head.
    pub fn top_features(&self) -> Vec<usize> {
        self.ranked.iter().map(|r| r[0].0).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("head\trank\tfeature\tweight\n");
        for (h, ranked) in self.ranked.iter().enumerate() {
            for (r, (f, w)) in ranked.iter().enumerate() {
                out.push_str(&format!("{h}\t{}\t{f}\t{w}\n", r + 1));
            }
        }
        out
    }
}

fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 1.0 };
    }
}

/// Saliency from a `[F × K·F']` weight matrix split into `heads` column
/// blocks: the L2 norm of each row within a block, min-max normalized.
/// A head whose rows all have the same norm gets weight 1 everywhere.
pub fn weight_saliency(w: &Tensor, heads: usize, top_k: usize) -> Result<SaliencyReport> {
    let shape = w.shape();
    if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot split weight of shape {shape:?} into {heads} heads"
        )));
    }
    let (rows, width) = (shape[0], shape[1] / heads);
    let mut weights = Vec::with_capacity(heads);
    let mut ranked = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut norms: Vec<f64> = (0..rows)
            .map(|f| w.row(f)[h * width..(h + 1) * width].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        min_max(&mut norms);
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        ranked.push(order.iter().take(top_k).map(|&f| (f, norms[f])).collect());
        weights.push(norms);
    }
    Ok(SaliencyReport { top_k, weights, ranked })
}

/// Saliency of the first attention layer of a GAT-backbone model.
pub fn gene_saliency(model: &MainModel, params: &ModelParams, top_k: usize) -> Result<SaliencyReport> {
    let layer: &GatLayer = model
        .first_gat_layer()
        .ok_or_else(|| Error::UnsupportedBackbone(format!("saliency needs a GAT backbone, got {}", model.config.backbone)))?;
    weight_saliency(params.get(&layer.weight_name())?, layer.heads, top_k)
}

/// Importance of each input column of the edge-set encoder: the mean
/// absolute entry of row `c` of `lift.w · W^Q_j`, averaged over heads and
/// normalized to sum to 1. All-zero products give uniform importance.
pub fn edge_feature_importance(encoder: &SetEncoder, params: &ModelParams) -> Result<Vec<f64>> {
    let c = &encoder.config;
    let lift = params.get(&encoder.name("lift.w"))?;
    let mut scores = vec![0.0; c.input_dim];
    for j in 0..c.heads {
        let wq = params.get(&encoder.name(&format!("wq.{j}")))?;
        let cols = wq.cols();
        for (r, s) in scores.iter_mut().enumerate() {
            let row = lift.row(r);
            let total: f64 = (0..cols)
                .map(|k| row.iter().enumerate().map(|(i, x)| x * wq.get(i, k)).sum::<f64>().abs())
                .sum();
            *s += total / cols as f64 / c.heads as f64;
        }
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    } else {
        scores.fill(1.0 / c.input_dim as f64);
    }
    Ok(scores)
}

/// The source graph's topology reweighted by edge-set attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionGraph {
    pub n_nodes: usize,
    /// `(src, dst, weight)` in the source graph's edge order.
    pub edges: Vec<(usize, usize, f64)>,
    /// Attention mass per edge before direction averaging; each node's
    /// out-edges sum to 1.
    pub mass: Vec<f64>,
}

impl AttentionGraph {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("src\tdst\tweight\tmass\n");
        for ((s, d, w), m) in self.edges.iter().zip(&self.mass) {
            out.push_str(&format!("{s}\t{d}\t{w}\t{m}\n"));
        }
        out
    }
}

/// Attention mass each set element receives, averaged over heads and over
/// the set's query positions. Indexed by edge id.
pub fn edge_attention_mass(encoder: &SetEncoder, params: &ModelParams, g: &Graph, table: &EdgeFeatureTable) -> Result<Vec<f64>> {
    table.check_edge_count(g.n_edges())?;
    let c = &encoder.config;
    if table.width() != c.input_dim {
        return Err(Error::shape("edge_attention_mass", &[g.n_edges(), table.width()], &[g.n_edges(), c.input_dim]));
    }
    let batch = EdgeSetBatch::new(g, c.max_set)?;
    let (b, m) = (batch.nodes().len(), batch.set_size());
    let mut mass = vec![0.0; g.n_edges()];
    if b == 0 {
        return Ok(mass);
    }
    let mut s = Tensor::zeros(vec![b * m, c.input_dim]);
    for (r, (&e, &keep)) in batch.slots().iter().zip(batch.mask()).enumerate() {
        if keep {
            s.row_mut(r).copy_from_slice(table.row(e));
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let sv = tape.constant(s);
    let lifted = encoder.lift(&mut tape, &bound, sv)?;
    let (_, maps) = encoder.multihead_with_attention(&mut tape, &bound, lifted, b, m, batch.mask())?;
    for set in 0..b {
        let mask = &batch.mask()[set * m..(set + 1) * m];
        let queries = mask.iter().filter(|&&k| k).count() as f64;
        for &att in &maps {
            let a = tape.value(att).data();
            for q in (0..m).filter(|&q| mask[q]) {
                for k in (0..m).filter(|&k| mask[k]) {
                    let e = batch.slots()[set * m + k];
                    mass[e] += a[(set * m + q) * m + k] / queries / c.heads as f64;
                }
            }
        }
    }
    Ok(mass)
}

/// Builds the attention graph and clusters it with weighted Louvain.
pub fn attention_graph(
    model: &MainModel,
    params: &ModelParams,
    g: &Graph,
    table: &EdgeFeatureTable,
    resolution: f64,
    seed: u64,
) -> Result<(AttentionGraph, CommunityAssignment)> {
    let encoder = model
        .encoder()
        .ok_or_else(|| Error::InvalidArgument("model has no edge-set encoder".into()))?;
    let mass = edge_attention_mass(encoder, params, g, table)?;
    let edges: Vec<(usize, usize, f64)> = g
        .edges()
        .enumerate()
        .map(|(e, x)| {
            let w = match g.find_edge(x.dst, x.src) {
                Some(r) => 0.5 * (mass[e] + mass[r]),
                None => mass[e],
            };
            (x.src, x.dst, w)
        })
        .collect();
    let ug = UndirectedGraph::from_weighted_edges(g.n_nodes(), &edges)?;
    let assignment = louvain_weighted(&ug, resolution, seed)?;
    Ok((
        AttentionGraph {
            n_nodes: g.n_nodes(),
            edges,
            mass,
        },
        assignment,
    ))
}

/// Adjusted Rand index between two labelings of the same items. Two
/// labelings that are both trivial (one cluster, or all singletons) score
/// 1 when identical as partitions and 0 otherwise.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("adjusted_rand_index", &[a.len()], &[b.len()]));
    }
    let n = a.len();
    let pairs = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sa: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sb: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as f64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max - expected == 0.0 {
        return Ok(if table.len() == rows.len() && table.len() == cols.len() { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_row_is_the_only_salient_feature() {
        let mut w = Tensor::zeros(vec![4, 6]);
        w.row_mut(2).copy_from_slice(&[1.0, -2.0, 0.5, 3.0, 0.1, -1.0]);
        let rep = weight_saliency(&w, 2, 3).unwrap();
        for h in 0..2 {
            assert_eq!(rep.weights[h], vec![0.0, 0.0, 1.0, 0.0]);
            assert_eq!(rep.ranked[h], vec![(2, 1.0), (0, 0.0), (1, 0.0)]);
        }
    }

    #[test]
    fn duplicated_rows_tie_by_index() {
        let w = Tensor::new(vec![3, 2], vec![1.0, 1.0, 3.0, 0.0, 1.0, 1.0]).unwrap();
        let rep = weight_saliency(&w, 1, 3).unwrap();
        assert_eq!(rep.top_features(), vec![1]);
        assert_eq!(rep.ranked[0][1].0, 0);
        assert_eq!(rep.ranked[0][2].0, 2);
    }

    #[test]
    fn ari_hand_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        // Contingency [[1,1],[1,1]]: index 0, expected 2·2/6, max 2.
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((ari - (0.0 - 2.0 / 3.0) / (2.0 - 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 1, 2], &[0, 0, 0]).unwrap(), 0.0);
    }
}
