use edgeforge::edge_features::EdgeFeatureTable;
use edgeforge::error::Error;
use edgeforge::graph::Graph;
use edgeforge::interpret::{
    adjusted_rand_index, attention_graph, edge_attention_mass, edge_feature_importance, gene_saliency, weight_saliency,
};
use edgeforge::params::ModelParams;
use edgeforge::pipeline::{MainModel, MainModelConfig};
use edgeforge::set_transformer::{SetEncoder, SetTransformerConfig};
use edgeforge::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_table(g: &Graph, width: usize, seed: u64) -> EdgeFeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns = (0..width).map(|c| format!("c{c}")).collect();
    EdgeFeatureTable::new(columns, random_tensor(g.n_edges(), width, &mut rng)).unwrap()
}

fn ring_graph(n: usize, f: usize) -> Graph {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), (i, (i + 3) % n)]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    Graph::from_pairs(n, &pairs).unwrap().with_features(random_tensor(n, f, &mut rng)).unwrap()
}

#[test]
fn saliency_matches_norm_and_sort_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (f, heads, width) = (12, 4, 3);
        let w = random_tensor(f, heads * width, &mut rng);
        let rep = weight_saliency(&w, heads, 5).unwrap();
        for h in 0..heads {
            let mut norms: Vec<(usize, f64)> = (0..f)
                .map(|r| (r, (0..width).map(|c| w.get(r, h * width + c).powi(2)).sum::<f64>().sqrt()))
                .collect();
            let lo = norms.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            let hi = norms.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expected: Vec<usize> = norms.iter().take(5).map(|x| x.0).collect();
            let got: Vec<usize> = rep.ranked[h].iter().map(|x| x.0).collect();
            assert_eq!(got, expected);
            for (r, v) in &norms {
                assert!((rep.weights[h][*r] - (v - lo) / (hi - lo)).abs() < 1e-12);
            }
            assert_eq!(rep.weights[h].iter().copied().fold(0.0, f64::max), 1.0);
        }
    }
}

#[test]
fn saliency_needs_a_gat_backbone() {
    let model = MainModel::new(MainModelConfig::gcn(), 4, 2, 0, 3).unwrap();
    let params = model.init_params(0);
    assert!(matches!(gene_saliency(&model, &params, 5), Err(Error::UnsupportedBackbone(_))));
    let model = MainModel::new(MainModelConfig::gat(), 4, 2, 0, 3).unwrap();
    let rep = gene_saliency(&model, &model.init_params(0), 5).unwrap();
    assert_eq!(rep.heads(), 8);
    assert_eq!(rep.ranked[0].len(), 4);
}

fn encoder(input_dim: usize, seed: u64) -> (SetEncoder, ModelParams) {
    let enc = SetEncoder::new("st", SetTransformerConfig::new(input_dim, 4)).unwrap();
    let mut params = ModelParams::new();
    enc.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
    (enc, params)
}

#[test]
fn importance_matches_matrix_walk() {
    for seed in 0..10 {
        let (enc, params) = encoder(18, seed);
        let imp = edge_feature_importance(&enc, &params).unwrap();
        let lift = params.get("st.lift.w").unwrap();
        let heads = enc.config.heads;
        let mut expected = vec![0.0; 18];
        for j in 0..heads {
            let wq = params.get(&format!("st.wq.{j}")).unwrap();
            for (c, e) in expected.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..wq.cols() {
                    let mut v = 0.0;
                    for i in 0..lift.cols() {
                        v += lift.get(c, i) * wq.get(i, k);
                    }
                    acc += v.abs();
                }
                *e += acc / wq.cols() as f64 / heads as f64;
            }
        }
        let total: f64 = expected.iter().sum();
        for (a, b) in imp.iter().zip(&expected) {
            assert!((a - b / total).abs() < 1e-12);
        }
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(imp.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn importance_guards_and_dominant_column() {
    let (enc, mut params) = encoder(5, 0);
    for j in 0..enc.config.heads {
        let shape = params.get(&format!("st.wq.{j}")).unwrap().shape().to_vec();
        params.insert(format!("st.wq.{j}"), Tensor::zeros(shape));
    }
    assert_eq!(edge_feature_importance(&enc, &params).unwrap(), vec![0.2; 5]);

    let (enc, mut params) = encoder(5, 1);
    let d = enc.config.dim;
    let mut lift = Tensor::zeros(vec![5, d]);
    for c in 0..5 {
        lift.set(c, c, if c == 3 { 10.0 } else { 1.0 });
    }
    params.insert("st.lift.w", lift);
    let imp = edge_feature_importance(&enc, &params).unwrap();
    let top = (0..5).fold(0, |b, c| if imp[c] > imp[b] { c } else { b });
    assert_eq!(top, 3);
}

#[test]
fn attention_mass_is_conserved_per_set() {
    let g = ring_graph(12, 3);
    let table = random_table(&g, 6, 2);
    let model = MainModel::new(MainModelConfig::gcn(), 3, 2, 6, g.max_out_degree()).unwrap();
    let params = model.init_params(4);
    let mass = edge_attention_mass(model.encoder().unwrap(), &params, &g, &table).unwrap();
    for i in 0..g.n_nodes() {
        let s: f64 = (g.offsets()[i]..g.offsets()[i + 1]).map(|e| mass[e]).sum();
        assert!((s - 1.0).abs() < 1e-6, "node {i}: {s}");
    }
    let (ag, assignment) = attention_graph(&model, &params, &g, &table, 1.0, 0).unwrap();
    assert_eq!(ag.edges.len(), g.n_edges());
    for ((s, d, w), e) in ag.edges.iter().zip(g.edges()) {
        assert_eq!((*s, *d), (e.src, e.dst));
        assert!(*w >= 0.0);
    }
    assert_eq!(assignment.community.len(), g.n_nodes());
}

#[test]
fn single_edge_gets_all_the_attention() {
    let g = Graph::from_pairs(2, &[(0, 1)]).unwrap().with_features(Tensor::filled(vec![2, 2], 1.0)).unwrap();
    let table = random_table(&g, 4, 0);
    let model = MainModel::new(MainModelConfig::gcn(), 2, 2, 4, 1).unwrap();
    let (ag, _) = attention_graph(&model, &model.init_params(0), &g, &table, 1.0, 0).unwrap();
    assert_eq!(ag.edges, vec![(0, 1, 1.0)]);
}

#[test]
fn identical_edge_features_give_uniform_weights() {
    let g = ring_graph(10, 2);
    let table = EdgeFeatureTable::new(vec!["a".into(), "b".into()], Tensor::filled(vec![g.n_edges(), 2], 0.3)).unwrap();
    let model = MainModel::new(MainModelConfig::gat(), 2, 2, 2, 2).unwrap();
    let (ag, _) = attention_graph(&model, &model.init_params(1), &g, &table, 1.0, 0).unwrap();
    for (_, _, w) in &ag.edges {
        assert!((w - 0.5).abs() < 1e-12, "{w}");
    }
}

#[test]
fn ari_is_label_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<usize> = (0..60).map(|_| rng.gen_range(0..4)).collect();
    let b: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
    let relabeled: Vec<usize> = a.iter().map(|&x| [7, 2, 9, 0][x]).collect();
    assert_eq!(adjusted_rand_index(&a, &relabeled).unwrap(), 1.0);
    let x = adjusted_rand_index(&a, &b).unwrap();
    assert!((x - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
    assert!(x < 0.2);
}
