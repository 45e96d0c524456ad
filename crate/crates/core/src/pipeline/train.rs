//! Inductive mini-batch training of the main classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::edge_features::EdgeFeatureTable;
use crate::error::{Error, Result};
use crate::graph::{Graph, Masks};
use crate::optim::AdagradState;
use crate::params::ModelParams;
use crate::partition::{default_part_count, minibatches, partition_graph};
use crate::tensor::Tensor;

use super::model::{MainModel, MainModelConfig, ModelInputs};

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn required_masks(g: &Graph) -> Result<(&[usize], &Masks)> {
    let class = g
        .class()
        .ok_or_else(|| Error::InvalidArgument("graph has no class labels".into()))?;
    let masks = g
        .masks()
        .ok_or_else(|| Error::InvalidArgument("graph has no train/val/test masks".into()))?;
    Ok((class, masks))
}

/// Number of classes implied by the training and validation labels.
pub fn class_count(g: &Graph) -> Result<usize> {
    let (class, masks) = required_masks(g)?;
    let labeled = (0..g.n_nodes()).filter(|&i| masks.train[i] || masks.val[i]);
    Ok(labeled.map(|i| class[i] + 1).max().unwrap_or(0))
}

/// Builds the model for `g`, sizing the pooling weights by the largest
/// out-degree of the full graph.
pub fn build_model(g: &Graph, table: &EdgeFeatureTable, cfg: &MainModelConfig) -> Result<MainModel> {
    MainModel::new(cfg.clone(), g.n_features(), class_count(g)?, table.width(), g.max_out_degree())
}

/// Mean NLL over `nodes`, evaluated without dropout.
pub fn eval_loss(model: &MainModel, params: &ModelParams, inputs: &ModelInputs, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logp = model.forward(&mut tape, &bound, inputs, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let loss = tape.nll_loss(logp, labels, nodes)?;
    Ok(tape.value(loss).data()[0])
}

/// Log-probabilities for every node of `g`, without dropout.
pub fn predict(model: &MainModel, params: &ModelParams, g: &Graph, table: &EdgeFeatureTable) -> Result<Tensor> {
    let inputs = model.inputs(g, table)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let logp = model.forward(&mut tape, &bound, &inputs, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(tape.value(logp).clone())
}

/// Fraction of `nodes` whose arg-max prediction (ties to the lower class)
/// equals the label.
pub fn accuracy(logp: &Tensor, labels: &[usize], nodes: &[usize]) -> f64 {
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

/// Trains on the subgraph induced by the training nodes and early-stops on
/// the validation loss measured on the full graph. Test labels are never
/// read.
pub fn train_main(g: &Graph, table: &EdgeFeatureTable, cfg: &MainModelConfig, seed: u64) -> Result<(MainModel, TrainOutcome)> {
    let model = build_model(g, table, cfg)?;
    let (class, masks) = required_masks(g)?;
    let train_nodes = masks.train_nodes();
    let val_nodes = masks.val_nodes();
    if train_nodes.is_empty() {
        return Err(Error::InvalidArgument("training mask is empty".into()));
    }
    let full_inputs = model.inputs(g, table)?;
    let train_sub = g.induced_subgraph(&train_nodes)?;
    let train_table = table.select_edges(&train_sub.edge_ids);
    let n_parts = cfg.n_parts.unwrap_or_else(|| default_part_count(train_nodes.len())).min(train_nodes.len());
    let partition = partition_graph(&train_sub.graph, n_parts, seed)?;
    // With every part in one batch the mini-batch is the same each epoch.
    let single_batch = n_parts <= cfg.batch_size;
    let batch_inputs = |sub_nodes: &[usize], sub_edges: &[usize], graph: &Graph| -> Result<(ModelInputs, Vec<usize>)> {
        let labels: Vec<usize> = sub_nodes.iter().map(|&v| class[train_nodes[v]]).collect();
        let t = train_table.select_edges(sub_edges);
        Ok((model.inputs(graph, &t)?, labels))
    };
    let cached = if single_batch {
        let all: Vec<usize> = (0..train_nodes.len()).collect();
        let edges: Vec<usize> = (0..train_sub.graph.n_edges()).collect();
        Some(batch_inputs(&all, &edges, &train_sub.graph)?)
    } else {
        None
    };

    let mut params = model.init_params(seed);
    let mut opt = AdagradState::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut tape = Tape::new();
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let monitor = if val_nodes.is_empty() { None } else { Some(&val_nodes) };

    let mut step = |tape: &mut Tape, params: &mut ModelParams, inputs: &ModelInputs, labels: &[usize], epoch: usize, rng: &mut ChaCha8Rng| -> Result<(f64, usize)> {
        tape.clear();
        let bound = params.bind(tape);
        let logp = model.forward(tape, &bound, inputs, true, rng)?;
        let rows: Vec<usize> = (0..labels.len()).collect();
        let loss = tape.nll_loss(logp, labels, &rows)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        tape.backward(loss)?;
        let grads = params.gradients(tape, &bound);
        opt.step(params, &grads)?;
        Ok((lv, rows.len()))
    };

    for epoch in 0..cfg.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        if let Some((inputs, labels)) = &cached {
            let (l, c) = step(&mut tape, &mut params, inputs, labels, epoch, &mut rng)?;
            total += l * c as f64;
            count += c;
        } else {
            let batch_seed = seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
            for mb in minibatches(&train_sub.graph, &partition, cfg.batch_size, batch_seed)? {
                let (inputs, labels) = batch_inputs(&mb.node_ids, &mb.edge_ids, &mb.graph)?;
                let (l, c) = step(&mut tape, &mut params, &inputs, &labels, epoch, &mut rng)?;
                total += l * c as f64;
                count += c;
            }
        }
        train_curve.push(total / count as f64);

        let vl = match monitor {
            Some(nodes) => eval_loss(&model, &params, &full_inputs, class, nodes)?,
            None => *train_curve.last().unwrap(),
        };
        if !vl.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        val_curve.push(vl);
        if vl < best.0 {
            best = (vl, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best;
    Ok((
        model,
        TrainOutcome {
            params,
            train_loss: train_curve,
            val_loss: val_curve,
            best_epoch,
        },
    ))
}

/// Test accuracy of trained parameters on the full graph.
pub fn test_accuracy(model: &MainModel, params: &ModelParams, g: &Graph, table: &EdgeFeatureTable) -> Result<f64> {
    let (class, masks) = required_masks(g)?;
    let test = masks.test_nodes();
    if test.is_empty() {
        return Err(Error::EmptyTestMask);
    }
    Ok(accuracy(&predict(model, params, g, table)?, class, &test))
}
