//! Edge-feature construction and edge-aware node classification on graphs.

pub mod autodiff;
pub mod config;
pub mod edge_features;
pub mod error;
pub mod graph;
pub mod interpret;
pub mod io;
pub mod layers;
pub mod optim;
pub mod params;
pub mod partition;
pub mod pipeline;
pub mod preprocess;
pub mod set_transformer;
pub mod synth;
pub mod tensor;
pub mod unsupervised;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
