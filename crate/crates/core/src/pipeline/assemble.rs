//! Assembly of the per-edge feature table from its four sources.

use serde::{Deserialize, Serialize};

use crate::edge_features::{EdgeFeatureTable, ATTENTION_PREFIXES, CURVATURE_COLUMN, NODE2VEC_COLUMN};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::unsupervised::{edge_dot_features, forman_ricci, louvain, node2vec_embed, CurvatureMap, Node2VecConfig};

use super::aux_task::{task_labels, train_auxiliary, AuxOutcome, AuxTaskSpec, LabelSource};

/// Rescales to zero mean and unit (population) variance. A constant column
/// becomes all zeros.
pub fn standardize(values: &mut [f64]) {
    let n = values.len();
    if n == 0 {
        return;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Concatenates `[aux_community | aux_batch | curvature | node2vec]` per
/// directed edge of `g`. The curvature and node2vec columns are
/// standardized; attention columns are kept as they are.
pub fn assemble_edge_features(
    g: &Graph,
    aux_community: &Tensor,
    aux_batch: &Tensor,
    curvature: &CurvatureMap,
    node2vec: &[f64],
) -> Result<EdgeFeatureTable> {
    let e = g.n_edges();
    for (aux, name) in [(aux_community, "community"), (aux_batch, "batch")] {
        if aux.rows() < e {
            return Err(Error::MissingEdges((aux.rows()..e).collect()));
        }
        if aux.rows() > e {
            return Err(Error::InvalidArgument(format!(
                "{name} attention has {} rows for {e} edges",
                aux.rows()
            )));
        }
    }
    if node2vec.len() < e {
        return Err(Error::MissingEdges((node2vec.len()..e).collect()));
    }
    let mut curv = curvature.per_edge(g)?;
    let mut n2v = node2vec[..e].to_vec();
    standardize(&mut curv);
    standardize(&mut n2v);
    let (k1, k2) = (aux_community.cols(), aux_batch.cols());
    let width = k1 + k2 + 2;
    let mut columns = Vec::with_capacity(width);
    for (prefix, k) in ATTENTION_PREFIXES.iter().zip([k1, k2]) {
        columns.extend((1..=k).map(|h| format!("{prefix}{h}")));
    }
    columns.push(CURVATURE_COLUMN.to_string());
    columns.push(NODE2VEC_COLUMN.to_string());
    let mut data = Vec::with_capacity(e * width);
    for r in 0..e {
        data.extend_from_slice(aux_community.row(r));
        data.extend_from_slice(aux_batch.row(r));
        data.push(curv[r]);
        data.push(n2v[r]);
    }
    EdgeFeatureTable::new(columns, Tensor::matrix(e, width, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeFeatureConfig {
    pub aux: AuxTaskSpec,
    pub node2vec: Node2VecConfig,
    pub louvain_resolution: f64,
}

impl Default for EdgeFeatureConfig {
    fn default() -> Self {
        EdgeFeatureConfig {
            aux: AuxTaskSpec::default(),
            node2vec: Node2VecConfig::default(),
            louvain_resolution: 1.0,
        }
    }
}

/// Intermediate products of [`build_edge_features`].
#[derive(Clone, Debug)]
pub struct EdgeFeatureArtifacts {
    pub communities: Vec<usize>,
    pub aux_community: AuxOutcome,
    pub aux_batch: AuxOutcome,
    pub curvature: CurvatureMap,
    pub node2vec: Vec<f64>,
}

/// Runs every edge-feature generator on `g` and assembles the table.
/// Community labels come from Louvain on the graph itself; batch labels must
/// be attached to `g`.
pub fn build_edge_features(g: &Graph, cfg: &EdgeFeatureConfig, seed: u64) -> Result<(EdgeFeatureTable, EdgeFeatureArtifacts)> {
    let communities = louvain(g, cfg.louvain_resolution, seed)?.community;
    let batch = task_labels(g, LabelSource::Batch)?;
    let aux_community = train_auxiliary(g, &communities, &cfg.aux, seed.wrapping_add(11))?;
    let aux_batch = train_auxiliary(g, &batch, &cfg.aux, seed.wrapping_add(12))?;
    let curvature = forman_ricci(g, None, None)?;
    let emb = node2vec_embed(g, &cfg.node2vec, seed.wrapping_add(13))?;
    let node2vec = edge_dot_features(&emb, g)?;
    let table = assemble_edge_features(g, &aux_community.edge_features, &aux_batch.edge_features, &curvature, &node2vec)?;
    Ok((
        table,
        EdgeFeatureArtifacts {
            communities,
            aux_community,
            aux_batch,
            curvature,
            node2vec,
        },
    ))
}
