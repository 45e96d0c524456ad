//! Synthetic block-structured datasets with batch effects.
//!
//! Node features are `block mean + batch shift + N(0, σ²)` noise. Class
//! labels are either the block id or a planted edge signal: whether the most
//! common block among a node's out-neighbors differs from the node's own
//! block, flipped at a given rate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, Graph, Masks};
use crate::preprocess::{build_graph, GraphBuildConfig, PcaModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelRule {
    Block,
    PlantedEdgeSignal { flip_rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    /// One mean vector per block; all of the same width.
    pub block_means: Vec<Vec<f64>>,
    /// Noise standard deviation.
    pub noise: f64,
    /// Optional per-feature multipliers of `noise`.
    #[serde(default)]
    pub feature_noise: Option<Vec<f64>>,
    pub n_batches: usize,
    /// Length of each batch's random shift vector.
    pub batch_shift: f64,
    pub label_rule: LabelRule,
    pub seed: u64,
}

impl SbmSpec {
    /// Blocks whose means are `gap / √2` along distinct coordinate axes, so
    /// any two means are `gap` apart.
    pub fn separated(block_sizes: Vec<usize>, n_features: usize, gap: f64, noise: f64, seed: u64) -> Self {
        let scale = gap / std::f64::consts::SQRT_2;
        let block_means = (0..block_sizes.len())
            .map(|b| {
                let mut m = vec![0.0; n_features];
                if n_features > 0 {
                    m[b % n_features] = scale;
                }
                m
            })
            .collect();
        SbmSpec {
            block_sizes,
            block_means,
            noise,
            feature_noise: None,
            n_batches: 1,
            batch_shift: 0.0,
            label_rule: LabelRule::Block,
            seed,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn n_features(&self) -> usize {
        self.block_means.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.block_sizes.is_empty() || self.block_sizes.iter().any(|&s| s == 0) {
            return bad("blocks must be non-empty");
        }
        if self.block_means.len() != self.block_sizes.len() {
            return bad("need one mean vector per block");
        }
        let f = self.n_features();
        if f == 0 || self.block_means.iter().any(|m| m.len() != f || m.iter().any(|v| !v.is_finite())) {
            return bad("block means must share a non-zero width and be finite");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and non-negative");
        }
        if let Some(fnz) = &self.feature_noise {
            if fnz.len() != f || fnz.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad("feature_noise needs one non-negative value per feature");
            }
        }
        if self.n_batches == 0 || !(self.batch_shift.is_finite() && self.batch_shift >= 0.0) {
            return bad("need at least one batch and a non-negative shift");
        }
        if let LabelRule::PlantedEdgeSignal { flip_rate } = self.label_rule {
            if !(0.0..=1.0).contains(&flip_rate) {
                return bad("flip rate must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub features: Tensor,
    pub batch: Vec<usize>,
    pub block: Vec<usize>,
}

/// Samples features, batch labels and block labels. Nodes are ordered by
/// block; batches are assigned by a seeded balanced shuffle.
pub fn generate(spec: &SbmSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (n, f) = (spec.n_nodes(), spec.n_features());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shifts: Vec<Vec<f64>> = (0..spec.n_batches)
        .map(|_| {
            let v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * spec.batch_shift / norm).collect()
        })
        .collect();
    let block: Vec<usize> = spec
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut batch = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        batch[i] = rank % spec.n_batches;
    }
    let mut data = Vec::with_capacity(n * f);
    for i in 0..n {
        let mean = &spec.block_means[block[i]];
        let shift = &shifts[batch[i]];
        for c in 0..f {
            let sigma = spec.noise * spec.feature_noise.as_ref().map_or(1.0, |v| v[c]);
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mean[c] + shift[c] + sigma * z);
        }
    }
    Ok(SyntheticData {
        features: Tensor::matrix(n, f, data)?,
        batch,
        block,
    })
}

/// The most common block among the out-neighbors of `i`; ties favor the
/// node's own block, then the lower block id. Nodes without out-edges map
/// to their own block.
pub fn majority_neighbor_block(g: &Graph, block: &[usize], i: usize) -> usize {
    let n_blocks = block.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_blocks];
    for &j in &g.targets()[g.offsets()[i]..g.offsets()[i + 1]] {
        counts[block[j]] += 1;
    }
    let own = block[i];
    let mut best = own;
    for (b, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = b;
        }
    }
    best
}

/// Binary labels `[majority neighbor block ≠ own block]`, each flipped with
/// probability `flip_rate`.
pub fn plant_edge_signal(g: &Graph, block: &[usize], flip_rate: f64, seed: u64) -> Result<Vec<usize>> {
    if block.len() != g.n_nodes() {
        return Err(Error::shape("plant_edge_signal", &[g.n_nodes()], &[block.len()]));
    }
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::InvalidArgument(format!("flip rate {flip_rate} not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..g.n_nodes())
        .map(|i| {
            let clean = (majority_neighbor_block(g, block, i) != block[i]) as usize;
            if rng.gen::<f64>() < flip_rate {
                1 - clean
            } else {
                clean
            }
        })
        .collect())
}

/// Directed block graph: every node sends `out_degree` edges into a single
/// target block, its own with probability `1 - displaced_fraction` and a
/// uniformly chosen other block otherwise. Targets inside the block are
/// drawn uniformly without replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedTopology {
    pub out_degree: usize,
    pub displaced_fraction: f64,
}

/// How a dataset's edges are formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Topology {
    /// PCA followed by (batch-balanced) kNN on the features.
    Knn,
    /// Edges from [`planted_block_edges`]; weights are distances in the PCA
    /// space of the graph build config.
    Planted(PlantedTopology),
}

/// Samples the edges of a [`PlantedTopology`] graph with unit weights.
pub fn planted_block_edges(block: &[usize], topo: &PlantedTopology, seed: u64) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&topo.displaced_fraction) {
        return Err(Error::InvalidArgument("displaced fraction must lie in [0, 1]".into()));
    }
    let n_blocks = block.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_blocks];
    for (i, &b) in block.iter().enumerate() {
        members[b].push(i);
    }
    if members.iter().any(|m| m.len() <= topo.out_degree) {
        return Err(Error::InvalidArgument("every block needs more members than the out-degree".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(block.len() * topo.out_degree);
    for (i, &own) in block.iter().enumerate() {
        let target = if n_blocks > 1 && rng.gen::<f64>() < topo.displaced_fraction {
            let other = rng.gen_range(0..n_blocks - 1);
            if other >= own {
                other + 1
            } else {
                other
            }
        } else {
            own
        };
        let pool: Vec<usize> = members[target].iter().copied().filter(|&j| j != i).collect();
        pairs.extend(pool.choose_multiple(&mut rng, topo.out_degree).map(|&j| (i, j)));
    }
    Ok(pairs)
}

/// Everything needed to materialize a labeled graph dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub sbm: SbmSpec,
    #[serde(default)]
    pub graph: GraphBuildConfig,
    #[serde(default = "default_topology")]
    pub topology: Topology,
    #[serde(default = "default_train")]
    pub train_fraction: f64,
    #[serde(default = "default_val")]
    pub val_fraction: f64,
}

fn default_topology() -> Topology {
    Topology::Knn
}

fn default_train() -> f64 {
    0.6
}

fn default_val() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn new(sbm: SbmSpec, graph: GraphBuildConfig) -> Self {
        DatasetSpec {
            sbm,
            graph,
            topology: Topology::Knn,
            train_fraction: default_train(),
            val_fraction: default_val(),
        }
    }
}

/// Generates features, builds the graph, attaches batch labels, class
/// labels and a random train/val/test split. The block id is kept as the
/// graph's community labels.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Graph> {
    let (tf, vf) = (spec.train_fraction, spec.val_fraction);
    if !(tf > 0.0 && vf >= 0.0 && tf + vf < 1.0) {
        return Err(Error::InvalidArgument("split fractions must leave a non-empty test set".into()));
    }
    let data = generate(&spec.sbm)?;
    let g = match &spec.topology {
        Topology::Knn => build_graph(&data.features, Some(&data.batch), &spec.graph)?,
        Topology::Planted(topo) => {
            let pairs = planted_block_edges(&data.block, topo, spec.sbm.seed.wrapping_add(2))?;
            let x = &data.features;
            let dim = spec.graph.pca_dim.min(x.rows().saturating_sub(1)).min(x.cols());
            let z = PcaModel::fit(x, dim)?.transform(x)?;
            let edges = pairs
                .into_iter()
                .map(|(i, j)| {
                    let d = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    Edge::new(i, j, d.sqrt())
                })
                .collect();
            let g = Graph::new(x.rows(), edges, x.clone())?.with_batch(data.batch.clone())?;
            if spec.graph.symmetrize {
                g.symmetrize()?
            } else {
                g
            }
        }
    };
    let class = match spec.sbm.label_rule {
        LabelRule::Block => data.block.clone(),
        LabelRule::PlantedEdgeSignal { flip_rate } => {
            plant_edge_signal(&g, &data.block, flip_rate, spec.sbm.seed ^ 0x5eed)?
        }
    };
    let masks = Masks::random_split(g.n_nodes(), tf, vf, spec.sbm.seed.wrapping_add(1));
    g.with_community(data.block)?.with_class(class)?.with_masks(masks)
}
