//! End-to-end orchestration: auxiliary tasks, edge-feature assembly, main
//! model training and multi-seed evaluation.

pub mod assemble;
pub mod aux_task;
pub mod model;
pub mod report;
pub mod stats;
pub mod train;

pub use assemble::{assemble_edge_features, build_edge_features, EdgeFeatureArtifacts, EdgeFeatureConfig};
pub use aux_task::{task_labels, train_auxiliary, AuxOutcome, AuxTaskSpec, LabelSource};
pub use model::{Backbone, MainModel, MainModelConfig, ModelInputs};
pub use report::{ablate, evaluate, Ablation, RunRecord, RunReport};
pub use stats::{confidence_interval, welch_test, WelchTest};
pub use train::{accuracy, build_model, predict, test_accuracy, train_main, TrainOutcome};
