//! node2vec: biased second-order random walks followed by skip-gram with
//! negative sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Node2VecConfig {
    pub dim: usize,
    /// Return parameter.
    pub p: f64,
    /// In-out parameter.
    pub q: f64,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for Node2VecConfig {
    fn default() -> Self {
        Node2VecConfig {
            dim: 16,
            p: 1.0,
            q: 1.0,
            walk_length: 20,
            walks_per_node: 10,
            window: 5,
            negatives: 5,
            epochs: 1,
            lr: 0.025,
        }
    }
}

impl Node2VecConfig {
    fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if self.dim == 0 || self.walk_length < 2 || self.walks_per_node == 0 || self.window == 0 {
            return Err(Error::InvalidArgument(
                "node2vec needs dim, walks_per_node and window >= 1 and walk_length >= 2".into(),
            ));
        }
        if !positive(self.p) || !positive(self.q) || !positive(self.lr) {
            return Err(Error::InvalidArgument("node2vec p, q and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbedding {
    /// `[n × dim]`; isolated nodes get zero rows.
    pub vectors: Tensor,
}

impl NodeEmbedding {
    pub fn dot(&self, u: usize, v: usize) -> f64 {
        self.vectors.row(u).iter().zip(self.vectors.row(v)).map(|(a, b)| a * b).sum()
    }

    pub fn cosine(&self, u: usize, v: usize) -> f64 {
        let nu = self.dot(u, u).sqrt();
        let nv = self.dot(v, v).sqrt();
        if nu == 0.0 || nv == 0.0 {
            0.0
        } else {
            self.dot(u, v) / (nu * nv)
        }
    }
}

/// Sorted, deduplicated undirected neighbor lists of `g`.
pub fn undirected_adjacency(g: &Graph) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); g.n_nodes()];
    for e in g.edges() {
        if e.src != e.dst {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Unnormalized transition weights for the step after `prev -> cur`.
pub fn transition_weights(adj: &[Vec<usize>], prev: usize, cur: usize, p: f64, q: f64) -> Vec<f64> {
    adj[cur]
        .iter()
        .map(|&x| {
            if x == prev {
                1.0 / p
            } else if adj[prev].binary_search(&x).is_ok() {
                1.0
            } else {
                1.0 / q
            }
        })
        .collect()
}

/// One walk of at most `length` nodes starting at `start`.
pub fn walk<R: Rng>(adj: &[Vec<usize>], start: usize, length: usize, p: f64, q: f64, rng: &mut R) -> Vec<usize> {
    let mut path = vec![start];
    while path.len() < length {
        let cur = *path.last().unwrap();
        let nbrs = &adj[cur];
        if nbrs.is_empty() {
            break;
        }
        let next = if path.len() == 1 {
            nbrs[rng.gen_range(0..nbrs.len())]
        } else {
            let prev = path[path.len() - 2];
            let w = transition_weights(adj, prev, cur, p, q);
            let dist = WeightedIndex::new(&w).expect("positive transition weights");
            nbrs[dist.sample(rng)]
        };
        path.push(next);
    }
    path
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Learns node embeddings on the undirected view of `g`.
pub fn node2vec_embed(g: &Graph, cfg: &Node2VecConfig, seed: u64) -> Result<NodeEmbedding> {
    cfg.validate()?;
    let n = g.n_nodes();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let adj = undirected_adjacency(g);
    let isolated = adj.iter().filter(|a| a.is_empty()).count();
    if isolated == n {
        return Err(Error::InvalidArgument("node2vec needs at least one edge".into()));
    }
    if isolated > 0 {
        log::warn!("{isolated} isolated nodes get zero node2vec vectors");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<usize> = (0..n).filter(|&i| !adj[i].is_empty()).collect();
    let mut walks = Vec::with_capacity(starts.len() * cfg.walks_per_node);
    for _ in 0..cfg.walks_per_node {
        let mut order = starts.clone();
        order.shuffle(&mut rng);
        for s in order {
            walks.push(walk(&adj, s, cfg.walk_length, cfg.p, cfg.q, &mut rng));
        }
    }

    let mut counts = vec![0.0f64; n];
    for w in &walks {
        for &v in w {
            counts[v] += 1.0;
        }
    }
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75))).expect("walks visit some node");

    let d = cfg.dim;
    let mut syn0: Vec<f64> = (0..n * d).map(|_| (rng.gen::<f64>() - 0.5) / d as f64).collect();
    let mut syn1 = vec![0.0; n * d];
    let total: usize = walks.iter().map(Vec::len).sum::<usize>() * cfg.epochs.max(1);
    let mut processed = 0usize;
    let mut neu1e = vec![0.0; d];
    for _ in 0..cfg.epochs {
        for w in &walks {
            for (pos, &center) in w.iter().enumerate() {
                let lr = cfg.lr * (1.0 - processed as f64 / total as f64).max(1e-4);
                processed += 1;
                let lo = pos.saturating_sub(cfg.window);
                let hi = (pos + cfg.window + 1).min(w.len());
                for (cpos, &ctx) in w.iter().enumerate().take(hi).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    neu1e.iter_mut().for_each(|x| *x = 0.0);
                    let input = ctx * d;
                    for s in 0..=cfg.negatives {
                        let (target, label) = if s == 0 {
                            (center, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == center {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = target * d;
                        let f: f64 = (0..d).map(|k| syn0[input + k] * syn1[out + k]).sum();
                        let gscale = (label - sigmoid(f)) * lr;
                        for k in 0..d {
                            neu1e[k] += gscale * syn1[out + k];
                            syn1[out + k] += gscale * syn0[input + k];
                        }
                    }
                    for k in 0..d {
                        syn0[input + k] += neu1e[k];
                    }
                }
            }
        }
    }
    for (i, a) in adj.iter().enumerate() {
        if a.is_empty() {
            syn0[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(NodeEmbedding {
        vectors: Tensor::matrix(n, d, syn0)?,
    })
}

/// Dot product of the endpoint embeddings for every directed edge of `g`.
pub fn edge_dot_features(emb: &NodeEmbedding, g: &Graph) -> Result<Vec<f64>> {
    if emb.vectors.rows() != g.n_nodes() {
        return Err(Error::shape("edge_dot_features", &[g.n_nodes()], &[emb.vectors.rows()]));
    }
    Ok(g.edges().map(|e| emb.dot(e.src, e.dst)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_weights_follow_bias() {
        // 0-1, 1-2, 1-3, 0-2: from prev 0 at cur 1: back to 0 (1/p), 2 shares
        // an edge with 0 (1), 3 does not (1/q).
        let g = Graph::from_pairs(4, &[(0, 1), (1, 2), (1, 3), (0, 2)]).unwrap();
        let adj = undirected_adjacency(&g);
        let w = transition_weights(&adj, 0, 1, 4.0, 0.5);
        assert_eq!(adj[1], vec![0, 2, 3]);
        assert_eq!(w, vec![0.25, 1.0, 2.0]);
    }

    #[test]
    fn walks_stay_on_edges() {
        let g = Graph::from_pairs(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let adj = undirected_adjacency(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let path = walk(&adj, 2, 30, 1.0, 1.0, &mut rng);
        assert_eq!(path.len(), 30);
        for w in path.windows(2) {
            assert!(adj[w[0]].contains(&w[1]));
        }
    }

    #[test]
    fn embedding_is_deterministic_and_zeroes_isolated_nodes() {
        let g = Graph::from_pairs(4, &[(0, 1), (1, 2)]).unwrap();
        let cfg = Node2VecConfig { dim: 4, ..Default::default() };
        let a = node2vec_embed(&g, &cfg, 9).unwrap();
        let b = node2vec_embed(&g, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.vectors.row(3).iter().all(|&x| x == 0.0));
        assert_eq!(edge_dot_features(&a, &g).unwrap().len(), 2);
    }

    #[test]
    fn edgeless_graph_is_rejected() {
        let g = Graph::from_pairs(3, &[]).unwrap();
        assert!(node2vec_embed(&g, &Node2VecConfig::default(), 0).is_err());
    }
}
