//! Auxiliary GAT tasks whose first-layer attention becomes edge features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{dropout, extract_edge_features, Activation, AttentionRecord, GatLayer, HeadMode, MessageGraph};
use crate::optim::{AdagradConfig, AdagradState};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Community,
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxTaskSpec {
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Fraction of nodes held out for early stopping.
    pub holdout: f64,
    pub optimizer: AdagradConfig,
}

impl Default for AuxTaskSpec {
    fn default() -> Self {
        AuxTaskSpec {
            hidden: 8,
            heads: 8,
            dropout: 0.5,
            epochs: 1000,
            patience: 100,
            holdout: 0.1,
            optimizer: AdagradConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AuxOutcome {
    pub params: ModelParams,
    /// First-layer attention on the self-loop-augmented edges.
    pub attention: AttentionRecord,
    /// `[E × heads]` attention rows for the stored edges.
    pub edge_features: Tensor,
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
    pub best_epoch: usize,
    pub holdout_accuracy: f64,
    /// Accuracy over all nodes with the best parameters.
    pub accuracy: f64,
}

pub fn task_labels(g: &Graph, source: LabelSource) -> Result<Vec<usize>> {
    let labels = match source {
        LabelSource::Community => g.community(),
        LabelSource::Batch => g.batch(),
    };
    labels
        .map(<[usize]>::to_vec)
        .ok_or_else(|| Error::InvalidArgument(format!("graph has no {source:?} labels").to_lowercase()))
}

fn accuracy_on(logp: &Tensor, labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes
        .iter()
        .filter(|&&i| {
            let row = logp.row(i);
            let pred = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            pred == labels[i]
        })
        .count();
    hits as f64 / nodes.len() as f64
}

/// Trains a two-layer GAT to predict `labels` on the full graph and returns
/// its first-layer attention. Early stopping monitors a random node holdout.
pub fn train_auxiliary(g: &Graph, labels: &[usize], spec: &AuxTaskSpec, seed: u64) -> Result<AuxOutcome> {
    let n = g.n_nodes();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    if labels.len() != n {
        return Err(Error::shape("train_auxiliary", &[n], &[labels.len()]));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; n_classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::DegenerateTask("auxiliary labels have a single class".into()));
    }
    if !(0.0..1.0).contains(&spec.holdout) || spec.epochs == 0 {
        return Err(Error::InvalidArgument("holdout must lie in [0, 1) and epochs >= 1".into()));
    }
    let l1 = GatLayer::new("aux1", g.n_features(), spec.hidden, spec.heads, HeadMode::Concat, Activation::Elu)?;
    let l2 = GatLayer::new("aux2", spec.hidden * spec.heads, n_classes, spec.heads, HeadMode::Average, Activation::Identity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    l1.init(&mut params, &mut rng);
    l2.init(&mut params, &mut rng);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((spec.holdout * n as f64).round() as usize).min(n - 1);
    let mut holdout = order[..n_hold].to_vec();
    let mut train = order[n_hold..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();

    let mg = MessageGraph::new(g)?;
    let features = g.features().clone();
    let forward = |tape: &mut Tape, params: &ModelParams, training: bool, rng: &mut ChaCha8Rng| -> Result<_> {
        let bound = params.bind(tape);
        let x = tape.constant(features.clone());
        let x = dropout(tape, x, spec.dropout, training, rng)?;
        let (h, alpha) = l1.forward(tape, &bound, &mg, x)?;
        let h = dropout(tape, h, spec.dropout, training, rng)?;
        let (logits, _) = l2.forward(tape, &bound, &mg, h)?;
        let logp = tape.log_softmax_rows(logits)?;
        Ok((bound, logp, alpha))
    };

    let mut opt = AdagradState::new(spec.optimizer);
    let mut tape = Tape::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let (mut train_curve, mut hold_curve) = (Vec::new(), Vec::new());
    for epoch in 0..spec.epochs {
        tape.clear();
        let (bound, logp, _) = forward(&mut tape, &params, true, &mut rng)?;
        let loss = tape.nll_loss(logp, labels, &train)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        tape.backward(loss)?;
        let grads = params.gradients(&tape, &bound);
        opt.step(&mut params, &grads)?;
        train_curve.push(lv);

        let monitor = if holdout.is_empty() { &train } else { &holdout };
        tape.clear();
        let (_, logp, _) = forward(&mut tape, &params, false, &mut rng)?;
        let hv = tape.nll_loss(logp, labels, monitor)?;
        let hv = tape.value(hv).data()[0];
        hold_curve.push(hv);
        if hv < best.0 {
            best = (hv, epoch, params.clone());
        } else if epoch - best.1 >= spec.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best;
    tape.clear();
    let (_, logp, alpha) = forward(&mut tape, &params, false, &mut rng)?;
    let attention = l1.record(&tape, &mg, alpha);
    let logp_v = tape.value(logp).clone();
    let all: Vec<usize> = (0..n).collect();
    Ok(AuxOutcome {
        edge_features: extract_edge_features(&attention),
        attention,
        holdout_accuracy: accuracy_on(&logp_v, labels, if holdout.is_empty() { &train } else { &holdout }),
        accuracy: accuracy_on(&logp_v, labels, &all),
        params,
        train_loss: train_curve,
        holdout_loss: hold_curve,
        best_epoch,
    })
}
