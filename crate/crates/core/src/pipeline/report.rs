//! Multi-seed evaluation and serializable run reports.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edge_features::EdgeFeatureTable;
use crate::error::{Error, Result};
use crate::graph::Graph;

use super::model::{Backbone, MainModelConfig};
use super::stats::{confidence_interval, mean, welch_test, WelchTest};
use super::train::{test_accuracy, train_main};

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`
/// so reports stay valid JSON.
pub mod float_or_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid float `{other}`"))),
            },
        }
    }
}

/// One seed's training history and accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub test_accuracy: f64,
}

impl RunRecord {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }

    /// First epoch (1-based count) whose validation loss is at or below
    /// `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.val_loss.iter().position(|&v| v <= target).map(|e| e + 1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub backbone: Backbone,
    pub edge_feature_width: usize,
    pub runs: Vec<RunRecord>,
    pub mean_accuracy: f64,
    /// 95% t-interval of the test accuracy; present with two or more runs.
    pub ci95: Option<(f64, f64)>,
    /// Welch's test of this report's accuracies against a baseline.
    pub welch: Option<WelchTest>,
    pub wall_clock_secs: f64,
}

/// Equality ignores wall-clock time.
impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
            && self.backbone == other.backbone
            && self.edge_feature_width == other.edge_feature_width
            && self.runs == other.runs
            && self.mean_accuracy == other.mean_accuracy
            && self.ci95 == other.ci95
            && self.welch == other.welch
    }
}

impl RunReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.test_accuracy).collect()
    }

    /// Attaches Welch's test against `baseline`.
    pub fn compare_with(&mut self, baseline: &RunReport) -> Result<()> {
        self.welch = Some(welch_test(&self.accuracies(), &baseline.accuracies())?);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Tab-separated `seed, epoch, train_loss, val_loss` rows with a header.
    pub fn loss_tsv(&self) -> String {
        let mut out = String::from("seed\tepoch\ttrain_loss\tval_loss\n");
        for r in &self.runs {
            for (e, (t, v)) in r.train_loss.iter().zip(&r.val_loss).enumerate() {
                out.push_str(&format!("{}\t{}\t{t}\t{v}\n", r.seed, e + 1));
            }
        }
        out
    }
}

/// Trains and tests one model per seed (seeds run in parallel) and
/// summarizes the test accuracies.
pub fn evaluate(g: &Graph, table: &EdgeFeatureTable, cfg: &MainModelConfig, seeds: &[u64], label: &str) -> Result<RunReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    if g.masks().map_or(true, |m| m.test.iter().all(|t| !t)) {
        return Err(Error::EmptyTestMask);
    }
    let start = Instant::now();
    let runs = seeds
        .par_iter()
        .map(|&seed| -> Result<RunRecord> {
            let (model, out) = train_main(g, table, cfg, seed)?;
            let acc = test_accuracy(&model, &out.params, g, table)?;
            Ok(RunRecord {
                seed,
                train_loss: out.train_loss,
                val_loss: out.val_loss,
                best_epoch: out.best_epoch,
                test_accuracy: acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    Ok(RunReport {
        label: label.to_string(),
        backbone: cfg.backbone,
        edge_feature_width: table.width(),
        mean_accuracy: mean(&accs),
        ci95: confidence_interval(&accs, 0.95).ok(),
        welch: None,
        runs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Baseline (no edge features) against the edge-feature model on the same
/// seeds; the second report carries Welch's test against the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub baseline: RunReport,
    pub enhanced: RunReport,
}

impl Ablation {
    pub fn accuracy_gain(&self) -> f64 {
        self.enhanced.mean_accuracy - self.baseline.mean_accuracy
    }

    /// Sum over seeds of the epochs the enhanced model needs to reach the
    /// baseline's best validation loss, divided by the sum of the baseline's
    /// best epochs (1-based). Runs that never reach it count their full
    /// length.
    pub fn epoch_ratio(&self) -> f64 {
        let (mut num, mut den) = (0usize, 0usize);
        for (b, e) in self.baseline.runs.iter().zip(&self.enhanced.runs) {
            den += b.best_epoch + 1;
            num += e.epochs_to_reach(b.best_val_loss()).unwrap_or(e.val_loss.len());
        }
        num as f64 / den.max(1) as f64
    }
}

pub fn ablate(g: &Graph, table: &EdgeFeatureTable, cfg: &MainModelConfig, seeds: &[u64]) -> Result<Ablation> {
    let empty = EdgeFeatureTable::empty(g.n_edges());
    let baseline = evaluate(g, &empty, cfg, seeds, &format!("{}", cfg.backbone))?;
    let mut enhanced = evaluate(g, table, cfg, seeds, &format!("{}+edges", cfg.backbone))?;
    enhanced.compare_with(&baseline)?;
    Ok(Ablation { baseline, enhanced })
}
