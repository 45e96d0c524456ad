//! Louvain community detection on an undirected weighted graph.
//!
//! Local moving visits nodes in a seeded order and moves each node to the
//! neighboring community with the largest modularity gain (when that gain
//! exceeds 1e-12). Communities are then collapsed into super-nodes and the
//! process repeats until a pass makes no moves.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

const GAIN_TOLERANCE: f64 = 1e-12;

/// Symmetric weighted adjacency. `self_loops[i]` holds the weight of the loop
/// at `i`, counted once; it contributes twice to the degree.
#[derive(Clone, Debug)]
pub struct UndirectedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
}

impl UndirectedGraph {
    /// Builds the undirected view of `g`. Pairs stored in both directions are
    /// merged with the larger weight. With `weighted = false` every pair has
    /// weight 1.
    pub fn from_graph(g: &Graph, weighted: bool) -> Result<Self> {
        let triples: Vec<(usize, usize, f64)> = g
            .edges()
            .map(|e| (e.src, e.dst, if weighted { e.weight } else { 1.0 }))
            .collect();
        Self::from_weighted_edges(g.n_nodes(), &triples)
    }

    /// Builds from `(u, v, w)` triples; duplicates merge with the larger weight.
    pub fn from_weighted_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (id, &(u, v, w)) in edges.iter().enumerate() {
            let bad = u.max(v);
            if bad >= n {
                return Err(Error::NodeOutOfRange { node: bad, n_nodes: n });
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidWeight { edge: id, weight: w });
            }
            let slot = merged.entry((u.min(v), u.max(v))).or_insert(w);
            *slot = slot.max(w);
        }
        let mut adj = vec![Vec::new(); n];
        let mut self_loops = vec![0.0; n];
        for ((u, v), w) in merged {
            if w == 0.0 {
                continue;
            }
            if u == v {
                self_loops[u] += w;
            } else {
                adj[u].push((v, w));
                adj[v].push((u, w));
            }
        }
        Ok(UndirectedGraph { adj, self_loops })
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|(_, w)| w).sum::<f64>() + 2.0 * self.self_loops[i]
    }

    /// Twice the total edge weight.
    pub fn total_degree(&self) -> f64 {
        (0..self.n_nodes()).map(|i| self.degree(i)).sum()
    }

    fn aggregate(&self, community: &[usize], n_comms: usize) -> UndirectedGraph {
        let mut self_loops = vec![0.0; n_comms];
        let mut merged: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comms];
        for i in 0..self.n_nodes() {
            let ci = community[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                let cj = community[j];
                if ci == cj {
                    // Each internal pair is seen from both ends.
                    self_loops[ci] += 0.5 * w;
                } else {
                    *merged[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        let adj = merged.into_iter().map(|m| m.into_iter().collect()).collect();
        UndirectedGraph { adj, self_loops }
    }
}

/// Result of community detection. Community ids are dense and numbered in
/// order of first appearance over node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    pub community: Vec<usize>,
    pub modularity: f64,
    /// Modularity of the full-graph partition after each pass.
    pub pass_modularity: Vec<f64>,
}

impl CommunityAssignment {
    pub fn n_communities(&self) -> usize {
        self.community.iter().max().map_or(0, |m| m + 1)
    }
}

/// Newman modularity with resolution `gamma`:
/// `Q = Σ_c [ L_c / m - gamma (d_c / 2m)^2 ]`.
pub fn modularity(g: &UndirectedGraph, community: &[usize], gamma: f64) -> f64 {
    let m2 = g.total_degree();
    if m2 == 0.0 {
        return 0.0;
    }
    let n_comms = community.iter().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; n_comms];
    let mut total = vec![0.0; n_comms];
    for i in 0..g.n_nodes() {
        let c = community[i];
        total[c] += g.degree(i);
        internal[c] += 2.0 * g.self_loops[i];
        for &(j, w) in &g.adj[i] {
            if community[j] == c {
                internal[c] += w;
            }
        }
    }
    internal
        .iter()
        .zip(&total)
        .map(|(l, d)| l / m2 - gamma * (d / m2).powi(2))
        .sum()
}

fn renumber(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let out = labels
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// One local-moving phase; returns the (unrenumbered) labels and whether any
/// node moved.
fn local_moves(g: &UndirectedGraph, gamma: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let n = g.n_nodes();
    let m2 = g.total_degree();
    let degree: Vec<f64> = (0..n).map(|i| g.degree(i)).collect();
    let mut community: Vec<usize> = (0..n).collect();
    let mut tot = degree.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in &order {
            let own = community[i];
            let ki = degree[i];
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            links.insert(own, 0.0);
            for &(j, w) in g.neighbors(i) {
                *links.entry(community[j]).or_insert(0.0) += w;
            }
            tot[own] -= ki;
            let gain = |c: usize, k_in: f64| k_in - gamma * tot[c] * ki / m2;
            let stay = gain(own, links[&own]);
            let mut best = (own, stay);
            for (&c, &k_in) in &links {
                let gc = gain(c, k_in);
                if gc > best.1 + GAIN_TOLERANCE {
                    best = (c, gc);
                }
            }
            tot[best.0] += ki;
            if best.0 != own {
                community[i] = best.0;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (community, moved_any)
}

fn run(g: &UndirectedGraph, gamma: f64, seed: u64) -> Result<CommunityAssignment> {
    let n = g.n_nodes();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("resolution must be positive, got {gamma}")));
    }
    let mut assignment: Vec<usize> = (0..n).collect();
    let mut pass_modularity = Vec::new();
    if g.total_degree() == 0.0 {
        return Ok(CommunityAssignment {
            community: assignment,
            modularity: 0.0,
            pass_modularity,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = g.clone();
    loop {
        let (labels, moved) = local_moves(&level, gamma, &mut rng);
        if !moved {
            break;
        }
        let (labels, n_comms) = renumber(&labels);
        for c in assignment.iter_mut() {
            *c = labels[*c];
        }
        pass_modularity.push(modularity(g, &assignment, gamma));
        if n_comms == level.n_nodes() {
            break;
        }
        level = level.aggregate(&labels, n_comms);
    }
    let (community, _) = renumber(&assignment);
    let q = modularity(g, &community, gamma);
    Ok(CommunityAssignment {
        community,
        modularity: q,
        pass_modularity,
    })
}

/// Louvain on the undirected, unit-weight view of `g`.
pub fn louvain(g: &Graph, resolution: f64, seed: u64) -> Result<CommunityAssignment> {
    run(&UndirectedGraph::from_graph(g, false)?, resolution, seed)
}

/// Louvain on an explicitly weighted undirected graph.
pub fn louvain_weighted(g: &UndirectedGraph, resolution: f64, seed: u64) -> Result<CommunityAssignment> {
    run(g, resolution, seed)
}
