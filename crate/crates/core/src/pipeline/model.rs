//! The edge-aware node classifier: a two-layer GCN or GAT backbone whose
//! output is concatenated with a Set Transformer encoding of each node's
//! edge-feature set, followed by a dense softmax head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::edge_features::EdgeFeatureTable;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{dropout, Activation, Dense, GatLayer, GcnLayer, HeadMode, MessageGraph};
use crate::optim::AdagradConfig;
use crate::params::{Bound, ModelParams};
use crate::set_transformer::{EdgeSetBatch, SetEncoder, SetTransformerConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Gcn,
    Gat,
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::Gcn => "gcn",
            Backbone::Gat => "gat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MainModelConfig {
    pub backbone: Backbone,
    pub hidden: usize,
    /// Attention heads per GAT layer; ignored by the GCN backbone.
    pub heads: usize,
    pub dropout: f64,
    /// Partition parts merged into one mini-batch.
    pub batch_size: usize,
    /// Partition part count; `None` uses `max(1, n / 64)`.
    pub n_parts: Option<usize>,
    pub epochs: usize,
    pub patience: usize,
    pub optimizer: AdagradConfig,
    pub set_dim: usize,
    pub set_heads: usize,
}

impl MainModelConfig {
    pub fn gat() -> Self {
        MainModelConfig {
            backbone: Backbone::Gat,
            hidden: 8,
            heads: 8,
            dropout: 0.5,
            batch_size: 256,
            n_parts: None,
            epochs: 1000,
            patience: 100,
            optimizer: AdagradConfig::default(),
            set_dim: 8,
            set_heads: 2,
        }
    }

    pub fn gcn() -> Self {
        MainModelConfig {
            backbone: Backbone::Gcn,
            hidden: 256,
            dropout: 0.4,
            ..Self::gat()
        }
    }

    pub fn for_backbone(backbone: Backbone) -> Self {
        match backbone {
            Backbone::Gcn => Self::gcn(),
            Backbone::Gat => Self::gat(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "hidden, heads, batch_size and epochs must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.n_parts == Some(0) {
            return Err(Error::InvalidArgument("n_parts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum BackboneLayers {
    Gcn(GcnLayer, GcnLayer),
    Gat(GatLayer, GatLayer),
}

/// Layer structure of the classifier; parameters live in [`ModelParams`].
#[derive(Clone, Debug)]
pub struct MainModel {
    pub config: MainModelConfig,
    pub n_features: usize,
    pub n_classes: usize,
    pub edge_width: usize,
    pub max_set: usize,
    backbone: BackboneLayers,
    encoder: Option<SetEncoder>,
    head: Dense,
}

/// Per-graph tensors a forward pass needs.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub message_graph: MessageGraph,
    pub features: Tensor,
    pub edge_sets: Option<(EdgeSetBatch, Tensor)>,
}

impl ModelInputs {
    pub fn new(g: &Graph, table: &EdgeFeatureTable, max_set: usize) -> Result<Self> {
        table.check_edge_count(g.n_edges())?;
        let edge_sets = if table.width() > 0 {
            Some((EdgeSetBatch::new(g, max_set)?, table.values().clone()))
        } else {
            None
        };
        Ok(ModelInputs {
            message_graph: MessageGraph::new(g)?,
            features: g.features().clone(),
            edge_sets,
        })
    }
}

impl MainModel {
    /// `edge_width = 0` builds the baseline without a set encoder.
    pub fn new(config: MainModelConfig, n_features: usize, n_classes: usize, edge_width: usize, max_set: usize) -> Result<Self> {
        config.validate()?;
        if n_features == 0 || n_classes < 2 {
            return Err(Error::DegenerateTask(format!(
                "need features and at least two classes (got {n_features} features, {n_classes} classes)"
            )));
        }
        let h = config.hidden;
        let backbone = match config.backbone {
            Backbone::Gcn => BackboneLayers::Gcn(
                GcnLayer::new("gcn1", n_features, h, Activation::Relu)?,
                GcnLayer::new("gcn2", h, h, Activation::Identity)?,
            ),
            Backbone::Gat => BackboneLayers::Gat(
                GatLayer::new("gat1", n_features, h, config.heads, HeadMode::Concat, Activation::Elu)?,
                GatLayer::new("gat2", h * config.heads, h, config.heads, HeadMode::Average, Activation::Elu)?,
            ),
        };
        let encoder = if edge_width > 0 {
            let st = SetTransformerConfig {
                input_dim: edge_width,
                dim: config.set_dim,
                heads: config.set_heads,
                max_set: max_set.max(1),
            };
            Some(SetEncoder::new("st", st)?)
        } else {
            None
        };
        let enhanced = h + encoder.as_ref().map_or(0, SetEncoder::output_width);
        Ok(MainModel {
            head: Dense::new("head", enhanced, n_classes)?,
            config,
            n_features,
            n_classes,
            edge_width,
            max_set: max_set.max(1),
            backbone,
            encoder,
        })
    }

    pub fn backbone_width(&self) -> usize {
        self.config.hidden
    }

    /// Width of the vector fed to the dense head.
    pub fn enhanced_width(&self) -> usize {
        self.head.in_dim
    }

    pub fn encoder(&self) -> Option<&SetEncoder> {
        self.encoder.as_ref()
    }

    pub fn first_gat_layer(&self) -> Option<&GatLayer> {
        match &self.backbone {
            BackboneLayers::Gat(l1, _) => Some(l1),
            BackboneLayers::Gcn(..) => None,
        }
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        match &self.backbone {
            BackboneLayers::Gcn(a, b) => {
                a.init(&mut params, &mut rng);
                b.init(&mut params, &mut rng);
            }
            BackboneLayers::Gat(a, b) => {
                a.init(&mut params, &mut rng);
                b.init(&mut params, &mut rng);
            }
        }
        if let Some(enc) = &self.encoder {
            enc.init(&mut params, &mut rng);
        }
        self.head.init(&mut params, &mut rng);
        params
    }

    pub fn inputs(&self, g: &Graph, table: &EdgeFeatureTable) -> Result<ModelInputs> {
        if table.width() != self.edge_width {
            return Err(Error::shape("model_inputs", &[self.edge_width], &[table.width()]));
        }
        if g.n_features() != self.n_features {
            return Err(Error::shape("model_inputs", &[self.n_features], &[g.n_features()]));
        }
        ModelInputs::new(g, table, self.max_set)
    }

    /// Log-probabilities `[n × classes]`. Dropout is active only when
    /// `training` is set.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: &ModelInputs, training: bool, rng: &mut impl Rng) -> Result<Var> {
        let rate = self.config.dropout;
        let mg = &inputs.message_graph;
        let x = tape.constant(inputs.features.clone());
        let x = dropout(tape, x, rate, training, rng)?;
        let h = match &self.backbone {
            BackboneLayers::Gcn(l1, l2) => {
                let h = l1.forward(tape, bound, mg, x)?;
                let h = dropout(tape, h, rate, training, rng)?;
                l2.forward(tape, bound, mg, h)?
            }
            BackboneLayers::Gat(l1, l2) => {
                let (h, _) = l1.forward(tape, bound, mg, x)?;
                let h = dropout(tape, h, rate, training, rng)?;
                l2.forward(tape, bound, mg, h)?.0
            }
        };
        let enhanced = match (&self.encoder, &inputs.edge_sets) {
            (Some(enc), Some((batch, values))) => {
                let edges = tape.constant(values.clone());
                let s = enc.encode(tape, bound, batch, edges)?;
                tape.concat(&[h, s])?
            }
            (None, _) => h,
            (Some(_), None) => return Err(Error::MissingEdges(Vec::new())),
        };
        let logits = self.head.forward(tape, bound, enhanced)?;
        tape.log_softmax_rows(logits)
    }
}
