use std::collections::BTreeSet;

use edgeforge::graph::Graph;
use edgeforge::interpret::adjusted_rand_index;
use edgeforge::preprocess::{GraphBuildConfig, GraphMode};
use edgeforge::synth::{
    build_dataset, generate, majority_neighbor_block, plant_edge_signal, planted_block_edges, DatasetSpec, LabelRule,
    PlantedTopology, SbmSpec, Topology,
};
use edgeforge::unsupervised::louvain;

fn knn(k: usize, pca_dim: usize, mode: GraphMode) -> GraphBuildConfig {
    GraphBuildConfig { pca_dim, k, mode, symmetrize: false }
}

#[test]
fn noiseless_features_take_one_value_per_block_and_batch() {
    let mut spec = SbmSpec::separated(vec![20, 30], 4, 3.0, 0.0, 1);
    spec.n_batches = 2;
    spec.batch_shift = 0.5;
    let data = generate(&spec).unwrap();
    let rows: BTreeSet<Vec<u64>> = (0..50).map(|i| data.features.row(i).iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for i in 0..50 {
        for j in 0..50 {
            let same = data.features.row(i) == data.features.row(j);
            assert_eq!(same, data.block[i] == data.block[j] && data.batch[i] == data.batch[j]);
        }
    }
}

#[test]
fn generation_is_deterministic_under_seed() {
    let mut spec = SbmSpec::separated(vec![30, 30, 30], 5, 2.0, 1.0, 9);
    spec.n_batches = 3;
    spec.batch_shift = 1.0;
    let first = generate(&spec).unwrap();
    assert_eq!(first, generate(&spec).unwrap());
    let ds = DatasetSpec::new(spec.clone(), knn(3, 5, GraphMode::Bbknn));
    assert_eq!(build_dataset(&ds).unwrap(), build_dataset(&ds).unwrap());
    spec.seed = 10;
    assert_ne!(generate(&spec).unwrap(), first);
}

#[test]
fn knn_graph_and_louvain_recover_blocks() {
    for seed in 0..5 {
        // Noise is a tenth of the distance between block means.
        let gap = 4.0;
        let spec = SbmSpec::separated(vec![100, 100], 20, gap, 0.1 * gap, seed);
        let g = build_dataset(&DatasetSpec::new(spec, knn(15, 10, GraphMode::Knn))).unwrap();
        let found = louvain(&g, 1.0, seed).unwrap();
        let ari = adjusted_rand_index(&found.community, g.community().unwrap()).unwrap();
        assert!(ari > 0.9, "seed {seed}: ARI {ari}");
    }
}

fn cross_batch_fraction(g: &Graph) -> f64 {
    let batch = g.batch().unwrap();
    let cross = g.edges().filter(|e| batch[e.src] != batch[e.dst]).count();
    cross as f64 / g.n_edges() as f64
}

#[test]
fn without_batch_shift_plain_knn_mixes_batches_like_bbknn() {
    let (mut plain, mut balanced) = (Vec::new(), Vec::new());
    for seed in 0..8 {
        let mut spec = SbmSpec::separated(vec![80, 80], 6, 3.0, 1.0, seed);
        spec.n_batches = 2;
        spec.batch_shift = 0.0;
        plain.push(cross_batch_fraction(&build_dataset(&DatasetSpec::new(spec.clone(), knn(4, 6, GraphMode::Knn))).unwrap()));
        balanced.push(cross_batch_fraction(&build_dataset(&DatasetSpec::new(spec, knn(2, 6, GraphMode::Bbknn))).unwrap()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // 8 seeds × 640 edges: a 0.5 rate has standard error below 0.01.
    assert!(balanced.iter().all(|&f| f == 0.5));
    assert!((mean(&plain) - 0.5).abs() < 0.04, "plain kNN cross-batch rate {}", mean(&plain));
}

#[test]
fn single_block_graph_without_flips_has_constant_labels() {
    let spec = SbmSpec::separated(vec![40], 3, 1.0, 1.0, 0);
    let g = build_dataset(&DatasetSpec::new(spec, knn(3, 3, GraphMode::Knn))).unwrap();
    let labels = plant_edge_signal(&g, g.community().unwrap(), 0.0, 1).unwrap();
    assert!(labels.iter().all(|&l| l == 0));
}

#[test]
fn rule_oracle_accuracy_tracks_flip_rate() {
    let mut spec = SbmSpec::separated(vec![250; 4], 8, 1.0, 1.0, 3);
    spec.n_batches = 2;
    let g = build_dataset(&DatasetSpec::new(spec, knn(3, 8, GraphMode::Bbknn))).unwrap();
    let block = g.community().unwrap();
    let oracle: Vec<usize> = (0..g.n_nodes()).map(|i| (majority_neighbor_block(&g, block, i) != block[i]) as usize).collect();
    for flip in [0.0, 0.1, 0.3, 0.5] {
        let labels = plant_edge_signal(&g, block, flip, 11).unwrap();
        let acc = labels.iter().zip(&oracle).filter(|(a, b)| a == b).count() as f64 / g.n_nodes() as f64;
        // Three binomial standard errors at n = 1000.
        let tol = 3.0 * (flip * (1.0 - flip) / 1000.0_f64).sqrt() + 1e-12;
        assert!((acc - (1.0 - flip)).abs() <= tol, "flip {flip}: oracle accuracy {acc}");
    }
}

#[test]
fn planted_topology_sends_each_node_into_one_block() {
    let block: Vec<usize> = (0..400).map(|i| i / 100).collect();
    let topo = PlantedTopology { out_degree: 6, displaced_fraction: 0.5 };
    let pairs = planted_block_edges(&block, &topo, 4).unwrap();
    assert_eq!(pairs.len(), 400 * 6);
    let mut displaced = 0;
    for i in 0..400 {
        let targets: Vec<usize> = pairs.iter().filter(|p| p.0 == i).map(|p| p.1).collect();
        assert_eq!(targets.len(), 6);
        assert_eq!(targets.iter().collect::<BTreeSet<_>>().len(), 6);
        assert!(!targets.contains(&i));
        let b = block[targets[0]];
        assert!(targets.iter().all(|&t| block[t] == b));
        displaced += usize::from(b != block[i]);
    }
    // Binomial(400, 0.5): three standard errors is 30.
    assert!((displaced as i64 - 200).abs() <= 30, "{displaced} displaced nodes");
}

#[test]
fn planted_dataset_label_marginal_matches_displacement_rate() {
    let mut spec = SbmSpec::separated(vec![250; 4], 10, 2.0, 1.0, 5);
    spec.n_batches = 2;
    spec.label_rule = LabelRule::PlantedEdgeSignal { flip_rate: 0.0 };
    let mut ds = DatasetSpec::new(spec, knn(3, 10, GraphMode::Bbknn));
    ds.topology = Topology::Planted(PlantedTopology { out_degree: 6, displaced_fraction: 0.3 });
    let g = build_dataset(&ds).unwrap();
    let positives = g.class().unwrap().iter().filter(|&&c| c == 1).count() as f64 / 1000.0;
    assert!((positives - 0.3).abs() < 3.0 * (0.21f64 / 1000.0).sqrt(), "positive rate {positives}");
    assert_eq!(g.batch().unwrap().iter().filter(|&&b| b == 1).count(), 500);
    assert!(g.weights().iter().all(|w| w.is_finite() && *w >= 0.0));
}

#[test]
fn degenerate_specs_are_rejected() {
    let mut spec = SbmSpec::separated(vec![10, 0], 3, 1.0, 1.0, 0);
    assert!(generate(&spec).is_err());
    spec.block_sizes = vec![10, 10];
    spec.noise = -1.0;
    assert!(generate(&spec).is_err());
    spec.noise = 1.0;
    spec.label_rule = LabelRule::PlantedEdgeSignal { flip_rate: 1.5 };
    assert!(generate(&spec).is_err());
}
