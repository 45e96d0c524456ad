//! Label-free edge-feature generators.

pub mod curvature;
pub mod louvain;
pub mod node2vec;

pub use curvature::{forman_ricci, CurvatureMap};
pub use louvain::{louvain, louvain_weighted, modularity, CommunityAssignment, UndirectedGraph};
pub use node2vec::{edge_dot_features, node2vec_embed, Node2VecConfig, NodeEmbedding};
