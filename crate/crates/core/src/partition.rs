//! Multilevel edge-cut partitioning and cluster mini-batching.
//!
//! The graph is coarsened by heavy-edge matching, split by greedy region
//! growing on the coarsest level, then projected back with boundary
//! refinement at every level. A final pass enforces the size bounds
//! `max(1, ⌊0.8·n/p⌋) ≤ |part| ≤ ⌈1.2·n/p⌉`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Subgraph};

/// Assignment of every node to one of `n_parts` non-empty parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    n_parts: usize,
    assignment: Vec<usize>,
}

impl Partition {
    pub fn from_assignment(n_parts: usize, assignment: Vec<usize>) -> Result<Self> {
        let mut sizes = vec![0usize; n_parts];
        for &a in &assignment {
            if a >= n_parts {
                return Err(Error::InvalidArgument(format!("part id {a} >= {n_parts}")));
            }
            sizes[a] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Invariant(format!("part {empty} is empty")));
        }
        Ok(Partition {
            n_parts,
            assignment,
        })
    }

    pub fn n_parts(&self) -> usize {
        self.n_parts
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Node ids of each part, ascending.
    pub fn parts(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.n_parts];
        for (v, &a) in self.assignment.iter().enumerate() {
            parts[a].push(v);
        }
        parts
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_parts];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Number of directed edges whose endpoints lie in different parts.
    pub fn cut_edges(&self, g: &Graph) -> usize {
        g.edges()
            .filter(|e| self.assignment[e.src] != self.assignment[e.dst])
            .count()
    }
}

/// Desk-scale default part count.
pub fn default_part_count(n_nodes: usize) -> usize {
    (n_nodes / 64).max(1)
}

/// Inclusive part-size bounds for `n` nodes in `p` parts.
pub fn balance_bounds(n: usize, p: usize) -> (usize, usize) {
    let ideal = n as f64 / p as f64;
    let lower = ((0.8 * ideal).floor() as usize).max(1);
    let upper = (1.2 * ideal).ceil() as usize;
    (lower, upper)
}

#[derive(Clone, Debug)]
struct WeightedGraph {
    vwgt: Vec<usize>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl WeightedGraph {
    fn from_graph(g: &Graph) -> Self {
        let n = g.n_nodes();
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for e in g.edges() {
            *maps[e.src].entry(e.dst).or_default() += 1.0;
            *maps[e.dst].entry(e.src).or_default() += 1.0;
        }
        WeightedGraph {
            vwgt: vec![1; n],
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
        }
    }

    fn n(&self) -> usize {
        self.vwgt.len()
    }

    /// Heavy-edge matching; returns the coarse graph and the fine→coarse map.
    fn coarsen(&self, max_vwgt: usize, rng: &mut ChaCha8Rng) -> (WeightedGraph, Vec<usize>) {
        let n = self.n();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut map = vec![usize::MAX; n];
        let mut next = 0;
        for &v in &order {
            if map[v] != usize::MAX {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for &(u, w) in &self.adj[v] {
                if map[u] != usize::MAX || self.vwgt[u] + self.vwgt[v] > max_vwgt {
                    continue;
                }
                if best.map_or(true, |(bu, bw)| w > bw || (w == bw && u < bu)) {
                    best = Some((u, w));
                }
            }
            map[v] = next;
            if let Some((u, _)) = best {
                map[u] = next;
            }
            next += 1;
        }
        let mut vwgt = vec![0; next];
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); next];
        for v in 0..n {
            let cv = map[v];
            vwgt[cv] += self.vwgt[v];
            for &(u, w) in &self.adj[v] {
                let cu = map[u];
                if cu != cv {
                    *maps[cv].entry(cu).or_default() += w;
                }
            }
        }
        (
            WeightedGraph {
                vwgt,
                adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            },
            map,
        )
    }

    fn connections(&self, v: usize, part: &[usize]) -> BTreeMap<usize, f64> {
        let mut conn = BTreeMap::new();
        for &(u, w) in &self.adj[v] {
            *conn.entry(part[u]).or_insert(0.0) += w;
        }
        conn
    }
}

/// Greedy region growing on a (possibly coarse) weighted graph.
fn grow_regions(wg: &WeightedGraph, p: usize, upper: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = wg.n();
    const NONE: usize = usize::MAX;
    let mut part = vec![NONE; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut remaining_w: usize = wg.vwgt.iter().sum();
    let mut unassigned = n;
    let mut cursor = 0;
    for k in 0..p {
        let parts_left = p - k;
        if parts_left == 1 {
            for v in 0..n {
                if part[v] == NONE {
                    part[v] = k;
                }
            }
            break;
        }
        let target = remaining_w as f64 / parts_left as f64;
        let mut weight = 0usize;
        let mut frontier: BTreeMap<usize, f64> = BTreeMap::new();
        loop {
            if unassigned <= parts_left - 1 || weight as f64 >= target {
                break;
            }
            let candidate = frontier
                .iter()
                .filter(|(&v, _)| weight + wg.vwgt[v] <= upper || weight == 0)
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&v, _)| v)
                .or_else(|| {
                    while cursor < n && part[order[cursor]] != NONE {
                        cursor += 1;
                    }
                    (cursor < n).then(|| order[cursor])
                });
            let Some(v) = candidate else { break };
            let w = wg.vwgt[v];
            if weight > 0 && (weight + w) as f64 - target > target - weight as f64 {
                break;
            }
            part[v] = k;
            frontier.remove(&v);
            weight += w;
            unassigned -= 1;
            for &(u, ew) in &wg.adj[v] {
                if part[u] == NONE {
                    *frontier.entry(u).or_insert(0.0) += ew;
                }
            }
        }
        remaining_w -= weight;
    }
    part
}

/// Greedy boundary refinement that never breaks the size bounds.
fn refine(
    wg: &WeightedGraph,
    part: &mut [usize],
    p: usize,
    (lower, upper): (usize, usize),
    rng: &mut ChaCha8Rng,
) {
    let n = wg.n();
    let mut pw = vec![0usize; p];
    let mut count = vec![0usize; p];
    for v in 0..n {
        pw[part[v]] += wg.vwgt[v];
        count[part[v]] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..8 {
        order.shuffle(rng);
        let mut moved = false;
        for &v in &order {
            let a = part[v];
            let w = wg.vwgt[v];
            if count[a] <= 1 || pw[a] < lower + w {
                continue;
            }
            let conn = wg.connections(v, part);
            let own = conn.get(&a).copied().unwrap_or(0.0);
            let best = conn
                .iter()
                .filter(|(&b, &c)| b != a && c > own && pw[b] + w <= upper)
                .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(x.0)));
            if let Some((&b, _)) = best {
                part[v] = b;
                pw[a] -= w;
                pw[b] += w;
                count[a] -= 1;
                count[b] += 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Moves single nodes until every part size lies within the bounds.
fn enforce_balance(wg: &WeightedGraph, part: &mut [usize], p: usize, (lower, upper): (usize, usize)) {
    let n = wg.n();
    let mut size = vec![0usize; p];
    for v in 0..n {
        size[part[v]] += 1;
    }
    loop {
        let over = (0..p).find(|&a| size[a] > upper);
        let under = (0..p).find(|&b| size[b] < lower);
        let (from, to) = match (over, under) {
            (Some(a), _) => {
                let b = under.unwrap_or_else(|| (0..p).min_by_key(|&b| (size[b], b)).unwrap());
                (a, b)
            }
            (None, Some(b)) => ((0..p).max_by_key(|&a| (size[a], usize::MAX - a)).unwrap(), b),
            (None, None) => break,
        };
        // Prefer the node of `from` best connected to `to` and least to `from`.
        let v = (0..n)
            .filter(|&v| part[v] == from)
            .max_by(|&x, &y| {
                let score = |v: usize| {
                    let c = wg.connections(v, part);
                    c.get(&to).copied().unwrap_or(0.0) - c.get(&from).copied().unwrap_or(0.0)
                };
                score(x).total_cmp(&score(y)).then(y.cmp(&x))
            })
            .expect("source part is non-empty");
        part[v] = to;
        size[from] -= 1;
        size[to] += 1;
    }
}

/// Splits `g` into `p` balanced parts with few cut edges. Deterministic for a
/// fixed seed.
pub fn partition_graph(g: &Graph, p: usize, seed: u64) -> Result<Partition> {
    let n = g.n_nodes();
    if p == 0 || p > n {
        return Err(Error::InvalidArgument(format!(
            "part count {p} must lie in 1..={n}"
        )));
    }
    if p == 1 {
        return Partition::from_assignment(1, vec![0; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = balance_bounds(n, p);
    let max_vwgt = (n / (2 * p)).max(1);
    let mut levels = vec![WeightedGraph::from_graph(g)];
    let mut maps: Vec<Vec<usize>> = Vec::new();
    let stop = (8 * p).max(32);
    while levels.last().unwrap().n() > stop && max_vwgt > 1 {
        let (coarse, map) = levels.last().unwrap().coarsen(max_vwgt, &mut rng);
        if coarse.n() as f64 > 0.9 * levels.last().unwrap().n() as f64 {
            break;
        }
        levels.push(coarse);
        maps.push(map);
    }
    let coarsest = levels.last().unwrap();
    let mut part = grow_regions(coarsest, p, bounds.1, &mut rng);
    refine(coarsest, &mut part, p, bounds, &mut rng);
    for level in (0..maps.len()).rev() {
        let fine = &levels[level];
        let map = &maps[level];
        part = (0..fine.n()).map(|v| part[map[v]]).collect();
        refine(fine, &mut part, p, bounds, &mut rng);
    }
    enforce_balance(&levels[0], &mut part, p, bounds);
    refine(&levels[0], &mut part, p, bounds, &mut rng);
    Partition::from_assignment(p, part)
}

/// One epoch of cluster mini-batches: parts are shuffled, grouped
/// `batch_size` at a time, and each group becomes the subgraph induced on
/// its nodes (edges between the grouped parts included).
pub fn minibatches(
    g: &Graph,
    partition: &Partition,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Subgraph>> {
    if partition.assignment().len() != g.n_nodes() {
        return Err(Error::InvalidArgument(
            "partition does not cover the graph".into(),
        ));
    }
    let parts = partition.parts();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let mut nodes: Vec<usize> = chunk.iter().flat_map(|&k| parts[k].iter().copied()).collect();
            nodes.sort_unstable();
            g.induced_subgraph(&nodes)
        })
        .collect()
}
