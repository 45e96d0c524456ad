use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("node {node} out of range (graph has {n_nodes} nodes)")]
    NodeOutOfRange { node: usize, n_nodes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("all-zero rows in count matrix: {0:?}")]
    ZeroRows(Vec<usize>),
    #[error("invalid weight {weight} on edge {edge}")]
    InvalidWeight { edge: usize, weight: f64 },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("degenerate task: {0}")]
    DegenerateTask(String),
    #[error("edge features missing for edges {0:?}")]
    MissingEdges(Vec<usize>),
    #[error("edge set of size {size} exceeds the pooling capacity {max}")]
    SetOverflow { size: usize, max: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("test mask is empty")]
    EmptyTestMask,
    #[error("unsupported backbone: {0}")]
    UnsupportedBackbone(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// File the error refers to, if any.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } | Error::Format { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::EmptyTape => "empty_tape",
            Error::MissingGradient(_) => "missing_gradient",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::NodeOutOfRange { .. } => "node_out_of_range",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Invariant(_) => "invariant",
            Error::ZeroRows(_) => "zero_rows",
            Error::InvalidWeight { .. } => "invalid_weight",
            Error::EmptyGraph => "empty_graph",
            Error::DegenerateTask(_) => "degenerate_task",
            Error::MissingEdges(_) => "missing_edges",
            Error::SetOverflow { .. } => "set_overflow",
            Error::Divergence { .. } => "divergence",
            Error::EmptyTestMask => "empty_test_mask",
            Error::UnsupportedBackbone(_) => "unsupported_backbone",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
