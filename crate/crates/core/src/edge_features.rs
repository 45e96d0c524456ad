//! Per-edge feature rows keyed by directed edge id.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column prefix marking attention-coefficient columns.
pub const ATTENTION_PREFIXES: [&str; 2] = ["aux_community_h", "aux_batch_h"];
pub const CURVATURE_COLUMN: &str = "forman_ricci";
pub const NODE2VEC_COLUMN: &str = "node2vec_dot";

/// Column names of the default 18-wide schema.
pub fn default_schema(heads: usize) -> Vec<String> {
    let mut cols = Vec::with_capacity(2 * heads + 2);
    for prefix in ATTENTION_PREFIXES {
        cols.extend((1..=heads).map(|h| format!("{prefix}{h}")));
    }
    cols.push(CURVATURE_COLUMN.to_string());
    cols.push(NODE2VEC_COLUMN.to_string());
    cols
}

fn is_attention(name: &str) -> bool {
    ATTENTION_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Fixed-width feature vectors, one row per directed edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatureTable {
    columns: Vec<String>,
    values: Tensor,
}

impl EdgeFeatureTable {
    pub fn new(columns: Vec<String>, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.cols() != columns.len() {
            return Err(Error::shape("EdgeFeatureTable", values.shape(), &[columns.len()]));
        }
        for (c, name) in columns.iter().enumerate() {
            for r in 0..values.rows() {
                let v = values.get(r, c);
                if !v.is_finite() {
                    return Err(Error::Invariant(format!("non-finite value in column {name}")));
                }
                if is_attention(name) && !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invariant(format!(
                        "attention column {name} has value {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(EdgeFeatureTable { columns, values })
    }

    /// A zero-width table for `n_edges` edges (the no-edge-feature baseline).
    pub fn empty(n_edges: usize) -> Self {
        EdgeFeatureTable {
            columns: vec![],
            values: Tensor::zeros(vec![n_edges, 0]),
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn n_edges(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn row(&self, edge: usize) -> &[f64] {
        let w = self.width();
        &self.values.data()[edge * w..(edge + 1) * w]
    }

    /// Rows for the given parent edge ids, in that order.
    pub fn select_edges(&self, edge_ids: &[usize]) -> EdgeFeatureTable {
        let w = self.width();
        let mut data = Vec::with_capacity(edge_ids.len() * w);
        for &e in edge_ids {
            data.extend_from_slice(self.row(e));
        }
        EdgeFeatureTable {
            columns: self.columns.clone(),
            values: Tensor::new(vec![edge_ids.len(), w], data).expect("sizes agree"),
        }
    }

    /// Keeps only the named columns, in the given order.
    pub fn select_columns(&self, keep: &[String]) -> Result<EdgeFeatureTable> {
        let idx: Vec<usize> = keep
            .iter()
            .map(|k| {
                self.columns
                    .iter()
                    .position(|c| c == k)
                    .ok_or_else(|| Error::InvalidArgument(format!("no edge feature column {k}")))
            })
            .collect::<Result<_>>()?;
        let n = self.n_edges();
        let mut data = Vec::with_capacity(n * idx.len());
        for r in 0..n {
            let row = self.row(r);
            data.extend(idx.iter().map(|&c| row[c]));
        }
        EdgeFeatureTable::new(keep.to_vec(), Tensor::new(vec![n, idx.len()], data)?)
    }

    pub fn check_edge_count(&self, n_edges: usize) -> Result<()> {
        if self.n_edges() != n_edges {
            return Err(Error::Invariant(format!(
                "edge feature table has {} rows but the graph has {n_edges} edges",
                self.n_edges()
            )));
        }
        Ok(())
    }
}
