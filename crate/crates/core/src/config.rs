//! Run configuration shared by every training command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::edge_features::{EdgeFeatureTable, ATTENTION_PREFIXES, CURVATURE_COLUMN, NODE2VEC_COLUMN};
use crate::error::{Error, Result};
use crate::io::read_json;
use crate::optim::AdagradConfig;
use crate::pipeline::{AuxTaskSpec, Backbone, EdgeFeatureConfig, MainModelConfig};
use crate::preprocess::GraphBuildConfig;
use crate::unsupervised::Node2VecConfig;

/// Which edge-feature groups the main model sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeFeatureToggles {
    pub community_attention: bool,
    pub batch_attention: bool,
    pub curvature: bool,
    pub node2vec: bool,
}

impl Default for EdgeFeatureToggles {
    fn default() -> Self {
        EdgeFeatureToggles {
            community_attention: true,
            batch_attention: true,
            curvature: true,
            node2vec: true,
        }
    }
}

impl EdgeFeatureToggles {
    pub fn none() -> Self {
        EdgeFeatureToggles {
            community_attention: false,
            batch_attention: false,
            curvature: false,
            node2vec: false,
        }
    }

    /// Keeps the enabled columns of `table`, in table order.
    pub fn select(&self, table: &EdgeFeatureTable) -> Result<EdgeFeatureTable> {
        let keep: Vec<String> = table
            .columns()
            .iter()
            .filter(|c| {
                (self.community_attention && c.starts_with(ATTENTION_PREFIXES[0]))
                    || (self.batch_attention && c.starts_with(ATTENTION_PREFIXES[1]))
                    || (self.curvature && *c == CURVATURE_COLUMN)
                    || (self.node2vec && *c == NODE2VEC_COLUMN)
            })
            .cloned()
            .collect();
        table.select_columns(&keep)
    }
}

/// Locations of run inputs and outputs, relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    pub graph: PathBuf,
    pub edges: PathBuf,
    pub out: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        RunPaths {
            graph: "data".into(),
            edges: "edges.tsv".into(),
            out: "runs".into(),
        }
    }
}

/// Every tunable of a run. `hidden` and `dropout` default per backbone
/// (GAT 8 and 0.5, GCN 256 and 0.4) when omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: Backbone,
    pub hidden: Option<usize>,
    pub heads: usize,
    pub dropout: Option<f64>,
    pub batch_size: usize,
    pub n_parts: Option<usize>,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub set_dim: usize,
    pub set_heads: usize,
    pub seeds: Vec<u64>,
    pub edge_features: EdgeFeatureToggles,
    pub graph: GraphBuildConfig,
    pub aux: AuxTaskSpec,
    pub node2vec: Node2VecConfig,
    pub louvain_resolution: f64,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gat = MainModelConfig::gat();
        RunConfig {
            backbone: Backbone::Gat,
            hidden: None,
            heads: gat.heads,
            dropout: None,
            batch_size: gat.batch_size,
            n_parts: None,
            epochs: gat.epochs,
            patience: gat.patience,
            lr: gat.optimizer.lr,
            weight_decay: gat.optimizer.weight_decay,
            set_dim: gat.set_dim,
            set_heads: gat.set_heads,
            seeds: (0..5).collect(),
            edge_features: EdgeFeatureToggles::default(),
            graph: GraphBuildConfig::default(),
            aux: AuxTaskSpec::default(),
            node2vec: Node2VecConfig::default(),
            louvain_resolution: 1.0,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.graph.k == 0 || self.graph.pca_dim == 0 {
            return Err(Error::InvalidArgument("k and pca_dim must be >= 1".into()));
        }
        if !(self.louvain_resolution > 0.0) {
            return Err(Error::InvalidArgument("louvain_resolution must be positive".into()));
        }
        if !(self.aux.holdout > 0.0 && self.aux.holdout < 1.0) {
            return Err(Error::InvalidArgument("aux holdout must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> MainModelConfig {
        let base = MainModelConfig::for_backbone(self.backbone);
        MainModelConfig {
            backbone: self.backbone,
            hidden: self.hidden.unwrap_or(base.hidden),
            heads: self.heads,
            dropout: self.dropout.unwrap_or(base.dropout),
            batch_size: self.batch_size,
            n_parts: self.n_parts,
            epochs: self.epochs,
            patience: self.patience,
            optimizer: AdagradConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
            },
            set_dim: self.set_dim,
            set_heads: self.set_heads,
        }
    }

    pub fn edge_feature_config(&self) -> EdgeFeatureConfig {
        EdgeFeatureConfig {
            aux: self.aux.clone(),
            node2vec: self.node2vec.clone(),
            louvain_resolution: self.louvain_resolution,
        }
    }
}
