//! Message-passing layers (GAT, GCN), a dense head and dropout.
//!
//! Node `i` aggregates messages from its out-neighbors `j` (edges `i -> j`)
//! and from itself. [`MessageGraph`] precomputes the self-loop-augmented edge
//! list once per graph: the stored edges come first, in CSR order, followed
//! by one self-loop per node.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Bound, ModelParams};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Self-loop-augmented connectivity shared by all layers on one graph.
#[derive(Clone, Debug)]
pub struct MessageGraph {
    n_nodes: usize,
    n_real: usize,
    /// Aggregating node per augmented edge.
    src: Vec<usize>,
    /// Message-sending node per augmented edge.
    dst: Vec<usize>,
    gcn_norm: Arc<SparseMatrix>,
}

impl MessageGraph {
    pub fn new(g: &Graph) -> Result<Self> {
        let n = g.n_nodes();
        let e = g.n_edges();
        let mut src = g.sources().to_vec();
        let mut dst = g.targets().to_vec();
        src.extend(0..n);
        dst.extend(0..n);
        let deg: Vec<f64> = (0..n).map(|i| (g.out_degree(i) + 1) as f64).collect();
        let mut triplets = Vec::with_capacity(e + n);
        for i in 0..n {
            let row: Vec<usize> = g.targets()[g.offsets()[i]..g.offsets()[i + 1]].to_vec();
            let mut inserted = false;
            for j in row {
                if !inserted && i < j {
                    triplets.push((i, i, 1.0 / deg[i]));
                    inserted = true;
                }
                triplets.push((i, j, 1.0 / (deg[i] * deg[j]).sqrt()));
            }
            if !inserted {
                triplets.push((i, i, 1.0 / deg[i]));
            }
        }
        Ok(MessageGraph {
            n_nodes: n,
            n_real: e,
            src,
            dst,
            gcn_norm: Arc::new(SparseMatrix::from_sorted_triplets(n, n, &triplets)?),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of stored (non-self-loop) edges.
    pub fn n_real_edges(&self) -> usize {
        self.n_real
    }

    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn targets(&self) -> &[usize] {
        &self.dst
    }

    /// `D̂^{-1/2} Â D̂^{-1/2}` with `Â = A + I` and `D̂` the row degrees of `Â`.
    pub fn gcn_operator(&self) -> &Arc<SparseMatrix> {
        &self.gcn_norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Elu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Elu => tape.elu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Concat,
    Average,
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn check_width(op: &'static str, tape: &Tape, h: Var, expected: usize) -> Result<()> {
    let shape = tape.shape(h);
    if shape.len() != 2 || shape[1] != expected {
        return Err(Error::shape(op, shape, &[expected]));
    }
    Ok(())
}

/// Multi-head graph attention layer. Parameters: `{prefix}.w` (`[F × K·F′]`),
/// `{prefix}.a_src` and `{prefix}.a_dst` (`[K × F′]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub mode: HeadMode,
    pub activation: Activation,
}

/// Normalized attention per augmented edge and head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `[E + N × K]`, rows aligned with [`MessageGraph`] edges.
    pub alpha: Tensor,
    pub n_real: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.alpha.cols()
    }

    /// Largest deviation of any per-node, per-head attention sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let k = self.heads();
        let n = self.src.iter().max().map_or(0, |m| m + 1);
        let mut sums = vec![0.0; n * k];
        for (r, &i) in self.src.iter().enumerate() {
            for h in 0..k {
                sums[i * k + h] += self.alpha.get(r, h);
            }
        }
        sums.iter().fold(0.0f64, |m, s| m.max((s - 1.0).abs()))
    }
}

/// Per-edge attention rows `Λ_ij = α^1_ij ‖ … ‖ α^K_ij` for the stored edges;
/// self-loop coefficients are dropped.
pub fn extract_edge_features(rec: &AttentionRecord) -> Tensor {
    let rows: Vec<usize> = (0..rec.n_real).collect();
    rec.alpha.select_rows(&rows)
}

impl GatLayer {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize, heads: usize, mode: HeadMode, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || heads == 0 {
            return Err(Error::InvalidArgument("GAT dimensions and head count must be >= 1".into()));
        }
        Ok(GatLayer {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            heads,
            mode,
            activation,
        })
    }

    pub fn output_width(&self) -> usize {
        match self.mode {
            HeadMode::Concat => self.heads * self.out_dim,
            HeadMode::Average => self.out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        let kf = self.heads * self.out_dim;
        params.insert(self.weight_name(), glorot(self.in_dim, kf, self.in_dim, kf, rng));
        for side in ["a_src", "a_dst"] {
            params.insert(
                format!("{}.{side}", self.prefix),
                glorot(self.heads, self.out_dim, 2 * self.out_dim, 1, rng),
            );
        }
    }

    /// Returns the activated output and the variable holding the normalized
    /// attention coefficients (`[E + N × K]`).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mg: &MessageGraph, h: Var) -> Result<(Var, Var)> {
        check_width("gat_forward", tape, h, self.in_dim)?;
        let w = bound.get(&self.weight_name())?;
        let a_src = bound.get(&format!("{}.a_src", self.prefix))?;
        let a_dst = bound.get(&format!("{}.a_dst", self.prefix))?;
        let wh = tape.matmul(h, w)?;
        let s_src = tape.grouped_row_dot(wh, a_src)?;
        let s_dst = tape.grouped_row_dot(wh, a_dst)?;
        let e_src = tape.gather_rows(s_src, mg.sources())?;
        let e_dst = tape.gather_rows(s_dst, mg.targets())?;
        let scores = tape.add(e_src, e_dst)?;
        let scores = tape.leaky_relu(scores, LEAKY_SLOPE)?;
        let alpha = tape.segment_softmax(scores, mg.sources(), mg.n_nodes())?;
        let messages = tape.gather_rows(wh, mg.targets())?;
        let messages = tape.head_scale(messages, alpha)?;
        let agg = tape.scatter_add_rows(messages, mg.sources(), mg.n_nodes())?;
        let out = match self.mode {
            HeadMode::Concat => agg,
            HeadMode::Average => tape.head_mean(agg, self.heads)?,
        };
        Ok((self.activation.apply(tape, out)?, alpha))
    }

    pub fn record(&self, tape: &Tape, mg: &MessageGraph, alpha: Var) -> AttentionRecord {
        AttentionRecord {
            alpha: tape.value(alpha).clone(),
            n_real: mg.n_real_edges(),
            src: mg.sources().to_vec(),
            dst: mg.targets().to_vec(),
        }
    }
}

/// Graph convolution `σ(D̂^{-1/2} Â D̂^{-1/2} H W)`. Parameter: `{prefix}.w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument("GCN dimensions must be >= 1".into()));
        }
        Ok(GcnLayer {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        params.insert(self.weight_name(), glorot(self.in_dim, self.out_dim, self.in_dim, self.out_dim, rng));
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mg: &MessageGraph, h: Var) -> Result<Var> {
        check_width("gcn_forward", tape, h, self.in_dim)?;
        let w = bound.get(&self.weight_name())?;
        let hw = tape.matmul(h, w)?;
        let agg = tape.sparse_matmul(Arc::clone(mg.gcn_operator()), hw)?;
        self.activation.apply(tape, agg)
    }
}

/// Affine map `x W + b`. Parameters: `{prefix}.w`, `{prefix}.b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument("dense dimensions must be >= 1".into()));
        }
        Ok(Dense {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        })
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        params.insert(
            format!("{}.w", self.prefix),
            glorot(self.in_dim, self.out_dim, self.in_dim, self.out_dim, rng),
        );
        params.insert(format!("{}.b", self.prefix), Tensor::zeros(vec![1, self.out_dim]));
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        check_width("dense", tape, x, self.in_dim)?;
        let w = bound.get(&format!("{}.w", self.prefix))?;
        let b = bound.get(&format!("{}.b", self.prefix))?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Inverted dropout: in training, zeroes each entry with probability `rate`
/// and scales survivors by `1 / (1 - rate)`. Identity otherwise.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen::<f64>() < p {
                    pairs.push((i, j));
                }
            }
        }
        Graph::from_pairs(n, &pairs).unwrap()
    }

    fn gat(heads: usize, mode: HeadMode) -> (GatLayer, ModelParams) {
        let layer = GatLayer::new("gat", 3, 2, heads, mode, Activation::Elu).unwrap();
        let mut params = ModelParams::new();
        layer.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        (layer, params)
    }

    #[test]
    fn self_loop_only_node_attends_to_itself() {
        let g = Graph::from_pairs(2, &[(1, 0)]).unwrap();
        let mg = MessageGraph::new(&g).unwrap();
        let (layer, params) = gat(2, HeadMode::Concat);
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = t.constant(random_tensor(&[2, 3], 4));
        let (out, alpha) = layer.forward(&mut t, &b, &mg, h).unwrap();
        let rec = layer.record(&t, &mg, alpha);
        // Augmented rows: [1->0, self 0, self 1]; node 0 has only its loop.
        assert_eq!(rec.alpha.row(1), &[1.0, 1.0]);
        let wh = t.value(h).clone();
        let w = params.get("gat.w").unwrap();
        for c in 0..4 {
            let pre: f64 = (0..3).map(|k| wh.get(0, k) * w.get(k, c)).sum();
            let expect = if pre > 0.0 { pre } else { pre.exp() - 1.0 };
            assert!((t.value(out).get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_features_give_uniform_attention() {
        let g = random_graph(8, 0.4, 2);
        let mg = MessageGraph::new(&g).unwrap();
        let (layer, params) = gat(3, HeadMode::Average);
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = t.constant(Tensor::filled(vec![8, 3], 0.7));
        let (_, alpha) = layer.forward(&mut t, &b, &mg, h).unwrap();
        let rec = layer.record(&t, &mg, alpha);
        for (r, &i) in rec.src.iter().enumerate() {
            let expect = 1.0 / (g.out_degree(i) + 1) as f64;
            for k in 0..3 {
                assert!((rec.alpha.get(r, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_neighbor_with_equal_scores_splits_evenly() {
        let g = Graph::from_pairs(2, &[(0, 1)]).unwrap();
        let mg = MessageGraph::new(&g).unwrap();
        let (layer, params) = gat(1, HeadMode::Concat);
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = t.constant(Tensor::filled(vec![2, 3], 1.0));
        let (_, alpha) = layer.forward(&mut t, &b, &mg, h).unwrap();
        let feats = extract_edge_features(&layer.record(&t, &mg, alpha));
        assert_eq!(feats.shape(), &[1, 1]);
        assert!((feats.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn attention_sums_to_one_and_exports_real_edges() {
        let g = random_graph(10, 0.3, 5);
        let mg = MessageGraph::new(&g).unwrap();
        let layer = GatLayer::new("gat", 3, 2, 8, HeadMode::Concat, Activation::Elu).unwrap();
        let mut params = ModelParams::new();
        layer.init(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = t.constant(random_tensor(&[10, 3], 6));
        let (_, alpha) = layer.forward(&mut t, &b, &mg, h).unwrap();
        let rec = layer.record(&t, &mg, alpha);
        assert!(rec.normalization_error() < 1e-6);
        assert!(rec.alpha.data().iter().all(|a| (0.0..=1.0).contains(a)));
        let feats = extract_edge_features(&rec);
        assert_eq!(feats.shape(), &[g.n_edges(), 8]);
    }

    #[test]
    fn gat_is_invariant_to_neighbor_order() {
        // Same edges listed with a different CSR layout via relabeling.
        let g = random_graph(6, 0.5, 7);
        let perm = [3, 5, 0, 1, 4, 2];
        let pairs: Vec<(usize, usize)> = g.edges().map(|e| (perm[e.src], perm[e.dst])).collect();
        let gp = Graph::from_pairs(6, &pairs).unwrap();
        let x = random_tensor(&[6, 3], 8);
        let mut xp = Tensor::zeros(vec![6, 3]);
        for i in 0..6 {
            xp.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let (layer, params) = gat(2, HeadMode::Concat);
        let run = |g: &Graph, x: &Tensor| {
            let mg = MessageGraph::new(g).unwrap();
            let mut t = Tape::new();
            let b = params.bind(&mut t);
            let h = t.constant(x.clone());
            let (out, _) = layer.forward(&mut t, &b, &mg, h).unwrap();
            t.value(out).clone()
        };
        let a = run(&g, &x);
        let bp = run(&gp, &xp);
        for i in 0..6 {
            for (u, v) in a.row(i).iter().zip(bp.row(perm[i])) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gat_gradient_check_through_nll() {
        let g = random_graph(10, 0.3, 9);
        let mg = MessageGraph::new(&g).unwrap();
        for mode in [HeadMode::Concat, HeadMode::Average] {
            let l1 = GatLayer::new("g", 3, 2, 2, mode, Activation::Identity).unwrap();
            let width = l1.output_width();
            let targets: Vec<usize> = (0..10).map(|i| i % width).collect();
            let rows: Vec<usize> = (0..10).collect();
            let inputs = [
                random_tensor(&[10, 3], 1),
                random_tensor(&[3, 4], 2),
                random_tensor(&[2, 2], 3),
                random_tensor(&[2, 2], 4),
            ];
            let err = fd_check(&inputs, |t, v| {
                let mut p = Bound::default();
                p.insert("g.w", v[1]);
                p.insert("g.a_src", v[2]);
                p.insert("g.a_dst", v[3]);
                let (out, _) = l1.forward(t, &p, &mg, v[0])?;
                let out = t.elu(out)?;
                let lp = t.log_softmax_rows(out)?;
                t.nll_loss(lp, &targets, &rows)
            });
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn gcn_matches_dense_reference() {
        let g = random_graph(5, 0.4, 11);
        let mg = MessageGraph::new(&g).unwrap();
        let layer = GcnLayer::new("gcn", 3, 2, Activation::Relu).unwrap();
        let mut params = ModelParams::new();
        layer.init(&mut params, &mut ChaCha8Rng::seed_from_u64(2));
        let x = random_tensor(&[5, 3], 12);
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = t.constant(x.clone());
        let out = layer.forward(&mut t, &b, &mg, h).unwrap();

        let mut a = vec![vec![0.0; 5]; 5];
        for i in 0..5 {
            a[i][i] = 1.0;
        }
        for e in g.edges() {
            a[e.src][e.dst] = 1.0;
        }
        let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let w = params.get("gcn.w").unwrap();
        for i in 0..5 {
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..5 {
                    let xw: f64 = (0..3).map(|k| x.get(j, k) * w.get(k, c)).sum();
                    s += a[i][j] / (d[i] * d[j]).sqrt() * xw;
                }
                assert!((t.value(out).get(i, c) - s.max(0.0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gcn_single_node_and_isolated_twins() {
        let g = Graph::from_pairs(2, &[]).unwrap();
        let mg = MessageGraph::new(&g).unwrap();
        let layer = GcnLayer::new("gcn", 2, 3, Activation::Identity).unwrap();
        let mut params = ModelParams::new();
        layer.init(&mut params, &mut ChaCha8Rng::seed_from_u64(3));
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = t.constant(Tensor::matrix(2, 2, vec![0.3, -0.2, 0.3, -0.2]).unwrap());
        let out = layer.forward(&mut t, &b, &mg, h).unwrap();
        let v = t.value(out);
        assert_eq!(v.row(0), v.row(1));
        let w = params.get("gcn.w").unwrap();
        for c in 0..3 {
            assert!((v.get(0, c) - (0.3 * w.get(0, c) - 0.2 * w.get(1, c))).abs() < 1e-15);
        }
    }

    #[test]
    fn gcn_gradient_check_through_nll() {
        let g = random_graph(8, 0.3, 13);
        let mg = MessageGraph::new(&g).unwrap();
        let l1 = GcnLayer::new("a", 3, 4, Activation::Relu).unwrap();
        let l2 = GcnLayer::new("b", 4, 3, Activation::Identity).unwrap();
        let targets: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let rows: Vec<usize> = (0..8).collect();
        let inputs = [random_tensor(&[8, 3], 1), random_tensor(&[3, 4], 2), random_tensor(&[4, 3], 3)];
        let err = fd_check(&inputs, |t, v| {
            let mut p = Bound::default();
            p.insert("a.w", v[1]);
            p.insert("b.w", v[2]);
            let h = l1.forward(t, &p, &mg, v[0])?;
            let h = l2.forward(t, &p, &mg, h)?;
            let lp = t.log_softmax_rows(h)?;
            t.nll_loss(lp, &targets, &rows)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn width_mismatch_is_reported() {
        let g = Graph::from_pairs(2, &[(0, 1)]).unwrap();
        let mg = MessageGraph::new(&g).unwrap();
        let (layer, params) = gat(1, HeadMode::Concat);
        let mut t = Tape::new();
        let b = params.bind(&mut t);
        let h = t.constant(Tensor::zeros(vec![2, 5]));
        assert!(matches!(layer.forward(&mut t, &b, &mg, h), Err(Error::Shape { .. })));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.constant(random_tensor(&[4, 4], 1));
        assert_eq!(dropout(&mut t, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut t, x, 0.9, false, &mut rng).unwrap(), x);
        assert!(dropout(&mut t, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(vec![1, 10], 2.0));
        let mut total = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let y = dropout(&mut t, x, 0.5, true, &mut rng).unwrap();
            total += t.value(y).data().iter().sum::<f64>();
        }
        let mean = total / (trials * 10) as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "{mean}");
    }
}
