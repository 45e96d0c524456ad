//! Set Transformer encoder for per-node edge-feature sets.
//!
//! Each node's out-edge feature rows form a set. Sets are padded to a fixed
//! size `M` and processed as one batch: a linear lift to width `d`, a single
//! attention block
//!
//! ```text
//! X   = LayerNorm(S + Multihead(S, S, S))
//! STB = LayerNorm(X + rFF(X))
//! ```
//!
//! and a position-weighted sum `w_i = Σ_j λ_j w_ij` over the unpadded rows,
//! taken in ascending neighbor-id order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::edge_features::EdgeFeatureTable;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Bound, ModelParams};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetTransformerConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    /// Largest set the pooling weights can hold.
    pub max_set: usize,
}

impl SetTransformerConfig {
    pub fn new(input_dim: usize, max_set: usize) -> Self {
        SetTransformerConfig {
            input_dim,
            dim: 8,
            heads: 2,
            max_set,
        }
    }
}

/// Parameters, all under `{prefix}.`: `lift.w`/`lift.b`, per-head
/// `wq.{j}`/`wk.{j}`/`wv.{j}` (`[d × d/h]`), `wo` (`[d × d]`), `ff1.*`, `ff2.*`,
/// `ln1.*`, `ln2.*` and `lambda` (`[1 × M]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetEncoder {
    pub prefix: String,
    pub config: SetTransformerConfig,
}

/// Padded layout of every non-isolated node's out-edge set.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSetBatch {
    n_nodes: usize,
    set_size: usize,
    /// Nodes with at least one out-edge, ascending.
    nodes: Vec<usize>,
    /// Edge id per padded slot (`nodes.len() × set_size`); padding repeats
    /// edge 0 and is masked.
    slots: Vec<usize>,
    mask: Vec<bool>,
}

impl EdgeSetBatch {
    /// Builds the batch for `g`; sets are padded to `max_set`.
    pub fn new(g: &Graph, max_set: usize) -> Result<Self> {
        let n = g.n_nodes();
        let largest = g.max_out_degree();
        if largest > max_set {
            return Err(Error::SetOverflow { size: largest, max: max_set });
        }
        let nodes: Vec<usize> = (0..n).filter(|&i| g.out_degree(i) > 0).collect();
        let mut slots = Vec::with_capacity(nodes.len() * max_set);
        let mut mask = Vec::with_capacity(nodes.len() * max_set);
        for &i in &nodes {
            // CSR order is ascending by neighbor id.
            let range = g.offsets()[i]..g.offsets()[i + 1];
            let len = range.len();
            slots.extend(range);
            slots.extend(std::iter::repeat(0).take(max_set - len));
            mask.extend(std::iter::repeat(true).take(len));
            mask.extend(std::iter::repeat(false).take(max_set - len));
        }
        Ok(EdgeSetBatch {
            n_nodes: n,
            set_size: max_set,
            nodes,
            slots,
            mask,
        })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn set_size(&self) -> usize {
        self.set_size
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Edge id per padded slot; padding slots hold edge 0.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn is_isolated(&self, node: usize) -> bool {
        self.nodes.binary_search(&node).is_err()
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect())
        .expect("shape matches data")
}

impl SetEncoder {
    pub fn new(prefix: impl Into<String>, config: SetTransformerConfig) -> Result<Self> {
        let c = &config;
        if c.input_dim == 0 || c.dim == 0 || c.heads == 0 || c.max_set == 0 {
            return Err(Error::InvalidArgument("set transformer dimensions must be >= 1".into()));
        }
        if c.dim % c.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} is not divisible by {} heads",
                c.dim, c.heads
            )));
        }
        Ok(SetEncoder {
            prefix: prefix.into(),
            config,
        })
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn output_width(&self) -> usize {
        self.config.dim
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) {
        let c = &self.config;
        let (d, dh) = (c.dim, c.dim / c.heads);
        params.insert(self.name("lift.w"), uniform(c.input_dim, d, rng));
        params.insert(self.name("lift.b"), Tensor::zeros(vec![1, d]));
        for j in 0..c.heads {
            for p in ["wq", "wk", "wv"] {
                params.insert(self.name(&format!("{p}.{j}")), uniform(d, dh, rng));
            }
        }
        params.insert(self.name("wo"), uniform(d, d, rng));
        for ff in ["ff1", "ff2"] {
            params.insert(self.name(&format!("{ff}.w")), uniform(d, d, rng));
            params.insert(self.name(&format!("{ff}.b")), Tensor::zeros(vec![1, d]));
        }
        for ln in ["ln1", "ln2"] {
            params.insert(self.name(&format!("{ln}.g")), Tensor::filled(vec![1, d], 1.0));
            params.insert(self.name(&format!("{ln}.b")), Tensor::zeros(vec![1, d]));
        }
        params.insert(self.name("lambda"), Tensor::filled(vec![1, c.max_set], 1.0 / c.max_set as f64));
    }

    /// Masked multi-head self-attention over `b` sets of `m` rows each.
    /// `x` is `[b·m × d]`; `key_mask` has one flag per row.
    pub fn multihead(&self, tape: &mut Tape, bound: &Bound, x: Var, b: usize, m: usize, key_mask: &[bool]) -> Result<Var> {
        Ok(self.multihead_with_attention(tape, bound, x, b, m, key_mask)?.0)
    }

    /// As [`SetEncoder::multihead`], also returning each head's `[b × m × m]`
    /// attention matrix (query rows, key columns).
    pub fn multihead_with_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        b: usize,
        m: usize,
        key_mask: &[bool],
    ) -> Result<(Var, Vec<Var>)> {
        let c = &self.config;
        let (d, dh) = (c.dim, c.dim / c.heads);
        let shape = tape.shape(x).to_vec();
        if shape != [b * m, d] || key_mask.len() != b * m {
            return Err(Error::shape("multihead", &shape, &[b * m, d]));
        }
        let mut score_mask = Vec::with_capacity(b * m * m);
        for s in 0..b {
            let keys = &key_mask[s * m..(s + 1) * m];
            for _ in 0..m {
                score_mask.extend_from_slice(keys);
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        let mut maps = Vec::with_capacity(c.heads);
        for j in 0..c.heads {
            let project = |tape: &mut Tape, p: &str| -> Result<Var> {
                let w = bound.get(&self.name(&format!("{p}.{j}")))?;
                let y = tape.matmul(x, w)?;
                tape.reshape(y, vec![b, m, dh])
            };
            let q = project(tape, "wq")?;
            let k = project(tape, "wk")?;
            let v = project(tape, "wv")?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.softmax_rows(scores, Some(&score_mask))?;
            let o = tape.batch_matmul(att, v, false)?;
            heads.push(tape.reshape(o, vec![b * m, dh])?);
            maps.push(att);
        }
        let cat = tape.concat(&heads)?;
        let wo = bound.get(&self.name("wo"))?;
        Ok((tape.matmul(cat, wo)?, maps))
    }

    /// Lifts `[b·m × input_dim]` rows to `[b·m × d]`.
    pub fn lift(&self, tape: &mut Tape, bound: &Bound, s: Var) -> Result<Var> {
        let lifted = tape.matmul(s, bound.get(&self.name("lift.w"))?)?;
        tape.add_row(lifted, bound.get(&self.name("lift.b"))?)
    }

    /// Lift followed by one attention block; `[b·m × input_dim]` to `[b·m × d]`.
    pub fn block(&self, tape: &mut Tape, bound: &Bound, s: Var, b: usize, m: usize, key_mask: &[bool]) -> Result<Var> {
        let shape = tape.shape(s).to_vec();
        if shape != [b * m, self.config.input_dim] {
            return Err(Error::shape("stb_forward", &shape, &[b * m, self.config.input_dim]));
        }
        let p = |n: &str| bound.get(&self.name(n));
        let lifted = self.lift(tape, bound, s)?;
        let att = self.multihead(tape, bound, lifted, b, m, key_mask)?;
        let x = tape.add(lifted, att)?;
        let x = tape.layer_norm(x, p("ln1.g")?, p("ln1.b")?, LAYER_NORM_EPS)?;
        let h = tape.matmul(x, p("ff1.w")?)?;
        let h = tape.add_row(h, p("ff1.b")?)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, p("ff2.w")?)?;
        let h = tape.add_row(h, p("ff2.b")?)?;
        let y = tape.add(x, h)?;
        tape.layer_norm(y, p("ln2.g")?, p("ln2.b")?, LAYER_NORM_EPS)
    }

    /// `Σ_j λ_j w_ij` over unpadded rows; `[b·m × d]` to `[b × d]`.
    pub fn pool(&self, tape: &mut Tape, bound: &Bound, w: Var, b: usize, m: usize, key_mask: &[bool]) -> Result<Var> {
        if m != self.config.max_set {
            return Err(Error::SetOverflow { size: m, max: self.config.max_set });
        }
        let d = self.config.dim;
        let lambda = bound.get(&self.name("lambda"))?;
        let lam = tape.broadcast_rows(lambda, b)?;
        let mask: Vec<f64> = key_mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let lam = tape.mul_const(lam, mask)?;
        let lam = tape.reshape(lam, vec![b, 1, m])?;
        let w3 = tape.reshape(w, vec![b, m, d])?;
        let pooled = tape.batch_matmul(lam, w3, false)?;
        tape.reshape(pooled, vec![b, d])
    }

    /// Encodes every node's edge set. `edges` is the `[E × input_dim]` table
    /// on the tape; the result is `[n_nodes × d]` with zero rows for isolated
    /// nodes.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, batch: &EdgeSetBatch, edges: Var) -> Result<Var> {
        let d = self.config.dim;
        let b = batch.nodes.len();
        let m = batch.set_size;
        if b == 0 {
            return Ok(tape.constant(Tensor::zeros(vec![batch.n_nodes, d])));
        }
        let s = tape.gather_rows(edges, &batch.slots)?;
        let keep: Vec<f64> = batch
            .mask
            .iter()
            .flat_map(|&k| std::iter::repeat(if k { 1.0 } else { 0.0 }).take(self.config.input_dim))
            .collect();
        let s = tape.mul_const(s, keep)?;
        let w = self.block(tape, bound, s, b, m, &batch.mask)?;
        let pooled = self.pool(tape, bound, w, b, m, &batch.mask)?;
        tape.scatter_add_rows(pooled, &batch.nodes, batch.n_nodes)
    }

    /// Encodes a single node's edge set outside any training tape.
    pub fn encode_node(&self, params: &ModelParams, table: &EdgeFeatureTable, g: &Graph, node: usize) -> Result<Vec<f64>> {
        if node >= g.n_nodes() {
            return Err(Error::NodeOutOfRange { node, n_nodes: g.n_nodes() });
        }
        table.check_edge_count(g.n_edges())?;
        let d = self.config.dim;
        let nbrs = g.neighborhood(node)?;
        if nbrs.is_empty() {
            return Ok(vec![0.0; d]);
        }
        let m = self.config.max_set;
        if nbrs.len() > m {
            return Err(Error::SetOverflow { size: nbrs.len(), max: m });
        }
        let f = self.config.input_dim;
        let mut s = Tensor::zeros(vec![m, f]);
        let mut mask = vec![false; m];
        for (r, &(_, e)) in nbrs.iter().enumerate() {
            s.row_mut(r).copy_from_slice(table.row(e));
            mask[r] = true;
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let sv = tape.constant(s);
        let w = self.block(&mut tape, &bound, sv, 1, m, &mask)?;
        let pooled = self.pool(&mut tape, &bound, w, 1, m, &mask)?;
        Ok(tape.value(pooled).data().to_vec())
    }
}
