//! Directed graph with node features, labels and split masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A weighted directed edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

impl Edge {
    pub fn new(src: usize, dst: usize, weight: f64) -> Self {
        Edge { src, dst, weight }
    }
}

/// Train/validation/test node masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect()
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        Self::indices(&self.train)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        Self::indices(&self.val)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        Self::indices(&self.test)
    }

    /// Random split with the given train and validation fractions; the rest
    /// is test.
    pub fn random_split(n: usize, train: f64, val: f64, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let n_train = (train * n as f64).round() as usize;
        let n_val = ((val * n as f64).round() as usize).min(n - n_train.min(n));
        let mut masks = Masks {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_train {
                masks.train[i] = true;
            } else if rank < n_train + n_val {
                masks.val[i] = true;
            } else {
                masks.test[i] = true;
            }
        }
        masks
    }

    fn validate(&self, n: usize, labeled: Option<&[usize]>) -> Result<()> {
        if self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(Error::Invariant("mask length differs from node count".into()));
        }
        for i in 0..n {
            let count = self.train[i] as u8 + self.val[i] as u8 + self.test[i] as u8;
            if count > 1 {
                return Err(Error::Invariant(format!("node {i} is in more than one mask")));
            }
            if labeled.is_some() && count == 0 {
                return Err(Error::Invariant(format!("labeled node {i} is in no mask")));
            }
        }
        Ok(())
    }
}

/// Immutable directed graph. Edges are stored sorted by `(src, dst)`, so an
/// edge id is its position in that order and the CSR index is by source.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    weight: Vec<f64>,
    offsets: Vec<usize>,
    features: Tensor,
    batch: Option<Vec<usize>>,
    community: Option<Vec<usize>>,
    class: Option<Vec<usize>>,
    masks: Option<Masks>,
}

fn check_labels(name: &str, labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Invariant(format!(
            "{name} labels have length {} but the graph has {n} nodes",
            labels.len()
        )));
    }
    Ok(())
}

impl Graph {
    /// Builds a graph from an edge list and an `[n_nodes × F]` feature
    /// matrix. Rejects self-loops, duplicate edges, out-of-range endpoints
    /// and negative or non-finite weights.
    pub fn new(n_nodes: usize, mut edges: Vec<Edge>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != n_nodes {
            return Err(Error::Invariant(format!(
                "feature matrix shape {:?} does not match {n_nodes} nodes",
                features.shape()
            )));
        }
        edges.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
        for (i, e) in edges.iter().enumerate() {
            for node in [e.src, e.dst] {
                if node >= n_nodes {
                    return Err(Error::NodeOutOfRange { node, n_nodes });
                }
            }
            if e.src == e.dst {
                return Err(Error::Invariant(format!("self-loop on node {}", e.src)));
            }
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(Error::InvalidWeight {
                    edge: i,
                    weight: e.weight,
                });
            }
            if i > 0 && edges[i - 1].src == e.src && edges[i - 1].dst == e.dst {
                return Err(Error::Invariant(format!(
                    "duplicate edge ({}, {})",
                    e.src, e.dst
                )));
            }
        }
        let mut offsets = vec![0usize; n_nodes + 1];
        for e in &edges {
            offsets[e.src + 1] += 1;
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        Ok(Graph {
            n_nodes,
            src: edges.iter().map(|e| e.src).collect(),
            dst: edges.iter().map(|e| e.dst).collect(),
            weight: edges.iter().map(|e| e.weight).collect(),
            offsets,
            features,
            batch: None,
            community: None,
            class: None,
            masks: None,
        })
    }

    /// Graph without node features (a zero-width feature matrix).
    pub fn from_edges(n_nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        Graph::new(n_nodes, edges, Tensor::zeros(vec![n_nodes, 0]))
    }

    /// Unit-weight graph from `(src, dst)` pairs.
    pub fn from_pairs(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Graph::from_edges(
            n_nodes,
            pairs.iter().map(|&(s, d)| Edge::new(s, d, 1.0)).collect(),
        )
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != self.n_nodes {
            return Err(Error::Invariant(format!(
                "feature matrix shape {:?} does not match {} nodes",
                features.shape(),
                self.n_nodes
            )));
        }
        self.features = features;
        Ok(self)
    }

    pub fn with_batch(mut self, labels: Vec<usize>) -> Result<Self> {
        check_labels("batch", &labels, self.n_nodes)?;
        self.batch = Some(labels);
        Ok(self)
    }

    pub fn with_community(mut self, labels: Vec<usize>) -> Result<Self> {
        check_labels("community", &labels, self.n_nodes)?;
        self.community = Some(labels);
        Ok(self)
    }

    pub fn with_class(mut self, labels: Vec<usize>) -> Result<Self> {
        check_labels("class", &labels, self.n_nodes)?;
        if let Some(m) = &self.masks {
            m.validate(self.n_nodes, Some(&labels))?;
        }
        self.class = Some(labels);
        Ok(self)
    }

    pub fn with_masks(mut self, masks: Masks) -> Result<Self> {
        masks.validate(self.n_nodes, self.class.as_deref())?;
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn batch(&self) -> Option<&[usize]> {
        self.batch.as_deref()
    }

    pub fn community(&self) -> Option<&[usize]> {
        self.community.as_deref()
    }

    pub fn class(&self) -> Option<&[usize]> {
        self.class.as_deref()
    }

    pub fn masks(&self) -> Option<&Masks> {
        self.masks.as_ref()
    }

    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn targets(&self) -> &[usize] {
        &self.dst
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn edge(&self, id: usize) -> Edge {
        Edge::new(self.src[id], self.dst[id], self.weight[id])
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.n_edges()).map(|i| self.edge(i))
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn max_out_degree(&self) -> usize {
        (0..self.n_nodes).map(|i| self.out_degree(i)).max().unwrap_or(0)
    }

    /// Out-neighbors of `i` as `(neighbor, edge id)`, ascending by neighbor.
    pub fn neighborhood(&self, i: usize) -> Result<Vec<(usize, usize)>> {
        if i >= self.n_nodes {
            return Err(Error::NodeOutOfRange {
                node: i,
                n_nodes: self.n_nodes,
            });
        }
        Ok((self.offsets[i]..self.offsets[i + 1])
            .map(|e| (self.dst[e], e))
            .collect())
    }

    /// Edge id of `(src, dst)` if present.
    pub fn find_edge(&self, src: usize, dst: usize) -> Option<usize> {
        if src >= self.n_nodes {
            return None;
        }
        let range = self.offsets[src]..self.offsets[src + 1];
        self.dst[range.clone()]
            .binary_search(&dst)
            .ok()
            .map(|k| range.start + k)
    }

    /// Adds the reverse of every edge that lacks one, copying its weight.
    pub fn symmetrize(&self) -> Result<Graph> {
        let mut edges: Vec<Edge> = self.edges().collect();
        for e in self.edges() {
            if self.find_edge(e.dst, e.src).is_none() {
                edges.push(Edge::new(e.dst, e.src, e.weight));
            }
        }
        let mut g = self.clone();
        let rebuilt = Graph::new(self.n_nodes, edges, self.features.clone())?;
        g.src = rebuilt.src;
        g.dst = rebuilt.dst;
        g.weight = rebuilt.weight;
        g.offsets = rebuilt.offsets;
        Ok(g)
    }

    /// Copy of this graph with new class labels (masks are kept).
    pub fn relabeled(&self, class: Vec<usize>) -> Result<Graph> {
        check_labels("class", &class, self.n_nodes)?;
        let mut g = self.clone();
        g.class = Some(class);
        Ok(g)
    }

    /// Induced subgraph on `nodes` (any order, no duplicates). Local node
    /// `k` is `nodes[k]`; every edge with both endpoints selected is kept.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Subgraph> {
        let mut local = vec![usize::MAX; self.n_nodes];
        for (k, &v) in nodes.iter().enumerate() {
            if v >= self.n_nodes {
                return Err(Error::NodeOutOfRange {
                    node: v,
                    n_nodes: self.n_nodes,
                });
            }
            if local[v] != usize::MAX {
                return Err(Error::InvalidArgument(format!("node {v} selected twice")));
            }
            local[v] = k;
        }
        let mut kept: Vec<(usize, usize, usize)> = Vec::new();
        for &v in nodes {
            for e in self.offsets[v]..self.offsets[v + 1] {
                let d = self.dst[e];
                if local[d] != usize::MAX {
                    kept.push((local[v], local[d], e));
                }
            }
        }
        kept.sort_unstable();
        let edges = kept
            .iter()
            .map(|&(s, d, e)| Edge::new(s, d, self.weight[e]))
            .collect();
        let pick = |labels: &Option<Vec<usize>>| {
            labels
                .as_ref()
                .map(|l| nodes.iter().map(|&v| l[v]).collect::<Vec<_>>())
        };
        let mut graph = Graph::new(nodes.len(), edges, self.features.select_rows(nodes))?;
        graph.batch = pick(&self.batch);
        graph.community = pick(&self.community);
        graph.class = pick(&self.class);
        graph.masks = self.masks.as_ref().map(|m| Masks {
            train: nodes.iter().map(|&v| m.train[v]).collect(),
            val: nodes.iter().map(|&v| m.val[v]).collect(),
            test: nodes.iter().map(|&v| m.test[v]).collect(),
        });
        Ok(Subgraph {
            graph,
            node_ids: nodes.to_vec(),
            edge_ids: kept.iter().map(|t| t.2).collect(),
        })
    }
}

/// A graph view with maps back to its parent's node and edge ids.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: Graph,
    /// Parent node id of each local node.
    pub node_ids: Vec<usize>,
    /// Parent edge id of each local edge.
    pub edge_ids: Vec<usize>,
}

impl Subgraph {
    /// The whole graph viewed as a subgraph of itself.
    pub fn whole(g: &Graph) -> Subgraph {
        Subgraph {
            graph: g.clone(),
            node_ids: (0..g.n_nodes()).collect(),
            edge_ids: (0..g.n_edges()).collect(),
        }
    }

    /// Local id of a parent node, if it belongs to this subgraph.
    pub fn local_of(&self, global: usize) -> Option<usize> {
        self.node_ids.iter().position(|&v| v == global)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triangle() -> Graph {
        Graph::from_pairs(3, &[(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)]).unwrap()
    }

    #[test]
    fn neighborhood_examples() {
        let g = Graph::from_pairs(3, &[(0, 1)]).unwrap();
        assert!(g.neighborhood(2).unwrap().is_empty());
        let t = triangle();
        let e01 = t.find_edge(0, 1).unwrap();
        let e02 = t.find_edge(0, 2).unwrap();
        assert_eq!(t.neighborhood(0).unwrap(), vec![(1, e01), (2, e02)]);
        assert!(matches!(
            t.neighborhood(3),
            Err(Error::NodeOutOfRange { node: 3, n_nodes: 3 })
        ));
    }

    #[test]
    fn rejects_bad_structure() {
        assert!(Graph::from_pairs(2, &[(0, 0)]).is_err());
        assert!(Graph::from_pairs(2, &[(0, 1), (0, 1)]).is_err());
        assert!(Graph::from_pairs(2, &[(0, 2)]).is_err());
        assert!(Graph::from_edges(2, vec![Edge::new(0, 1, -1.0)]).is_err());
        assert!(Graph::from_edges(2, vec![Edge::new(0, 1, f64::NAN)]).is_err());
    }

    #[test]
    fn masks_must_be_disjoint() {
        let g = Graph::from_pairs(2, &[(0, 1)]).unwrap();
        let m = Masks {
            train: vec![true, false],
            val: vec![true, false],
            test: vec![false, true],
        };
        assert!(g.with_masks(m).is_err());
    }

    #[test]
    fn symmetrize_adds_missing_reverse_edges() {
        let g = Graph::from_pairs(3, &[(0, 1), (1, 2), (2, 1)]).unwrap();
        let s = g.symmetrize().unwrap();
        assert_eq!(s.n_edges(), 4);
        assert!(s.find_edge(1, 0).is_some());
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (2usize..20).prop_flat_map(|n| {
            prop::collection::btree_set((0..n, 0..n), 0..60).prop_map(move |pairs| {
                let pairs: Vec<_> = pairs.into_iter().filter(|(a, b)| a != b).collect();
                Graph::from_pairs(n, &pairs).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn csr_agrees_with_edge_list(g in arb_graph()) {
            for i in 0..g.n_nodes() {
                let mut brute: Vec<(usize, usize)> = (0..g.n_edges())
                    .filter(|&e| g.sources()[e] == i)
                    .map(|e| (g.targets()[e], e))
                    .collect();
                brute.sort_unstable();
                prop_assert_eq!(g.neighborhood(i).unwrap(), brute);
            }
        }

        #[test]
        fn induced_subgraph_keeps_exactly_internal_edges(g in arb_graph(), seed in any::<u64>()) {
            let nodes: Vec<usize> = (0..g.n_nodes()).filter(|v| (seed >> (v % 64)) & 1 == 1).collect();
            let sub = g.induced_subgraph(&nodes).unwrap();
            let expected = g.edges().filter(|e| nodes.contains(&e.src) && nodes.contains(&e.dst)).count();
            prop_assert_eq!(sub.graph.n_edges(), expected);
            for (local, &global) in sub.edge_ids.iter().enumerate() {
                let le = sub.graph.edge(local);
                let ge = g.edge(global);
                prop_assert_eq!(sub.node_ids[le.src], ge.src);
                prop_assert_eq!(sub.node_ids[le.dst], ge.dst);
            }
        }
    }
}
