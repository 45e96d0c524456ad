use std::fs;

use edgeforge::config::RunConfig;
use edgeforge::edge_features::EdgeFeatureTable;
use edgeforge::error::Error;
use edgeforge::graph::{Graph, Masks};
use edgeforge::io::{
    read_checkpoint, read_edge_table, read_graph_dir, read_matrix, write_checkpoint, write_dense_tsv, write_edge_table,
    write_graph_dir, write_matrix_market, FEATURES_MTX, FEATURES_TSV,
};
use edgeforge::pipeline::{MainModel, MainModelConfig};
use edgeforge::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labelled_graph() -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 30;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), (i, (i + 7) % n)]).collect();
    let features = Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.gen_range(-3.0..3.0) / 7.0).collect()).unwrap();
    Graph::from_pairs(n, &pairs)
        .unwrap()
        .with_features(features)
        .unwrap()
        .with_batch((0..n).map(|i| i % 2).collect())
        .unwrap()
        .with_community((0..n).map(|i| i / 10).collect())
        .unwrap()
        .with_class((0..n).map(|i| usize::from(i % 3 == 0)).collect())
        .unwrap()
        .with_masks(Masks::random_split(n, 0.6, 0.2, 3))
        .unwrap()
}

#[test]
fn graph_directory_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let g = labelled_graph();
    write_graph_dir(dir.path(), &g).unwrap();
    assert_eq!(read_graph_dir(dir.path()).unwrap(), g);
}

#[test]
fn matrix_market_features_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let g = labelled_graph();
    write_graph_dir(dir.path(), &g).unwrap();
    fs::remove_file(dir.path().join(FEATURES_TSV)).unwrap();
    write_matrix_market(&dir.path().join(FEATURES_MTX), g.features()).unwrap();
    assert_eq!(read_graph_dir(dir.path()).unwrap(), g);

    let other = Tensor::zeros(vec![g.n_nodes(), 4]);
    write_dense_tsv(&dir.path().join(FEATURES_TSV), &other).unwrap();
    assert_eq!(read_graph_dir(dir.path()).unwrap().features(), g.features());
}

#[test]
fn matrix_readers_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = labelled_graph().features().clone();
    write_dense_tsv(&dir.path().join("m.tsv"), &m).unwrap();
    write_matrix_market(&dir.path().join("m.mtx"), &m).unwrap();
    assert_eq!(read_matrix(&dir.path().join("m.tsv")).unwrap(), m);
    assert_eq!(read_matrix(&dir.path().join("m.mtx")).unwrap(), m);
}

#[test]
fn edge_table_round_trips_and_checks_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let g = labelled_graph();
    let values = Tensor::new(vec![g.n_edges(), 2], (0..g.n_edges() * 2).map(|v| v as f64 / 3.0).collect()).unwrap();
    let table = EdgeFeatureTable::new(vec!["a".into(), "b".into()], values).unwrap();
    let path = dir.path().join("edges.tsv");
    write_edge_table(&path, &g, &table).unwrap();
    assert_eq!(read_edge_table(&path, &g).unwrap(), table);

    let other = Graph::from_pairs(g.n_nodes(), &(0..g.n_nodes()).flat_map(|i| [(i, (i + 1) % 30), (i, (i + 2) % 30)]).collect::<Vec<_>>()).unwrap();
    let err = read_edge_table(&path, &other).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert_eq!(err.path(), Some(path.as_path()));
}

#[test]
fn malformed_inputs_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let g = labelled_graph();
    write_graph_dir(dir.path(), &g).unwrap();
    let edges = dir.path().join("edges.tsv");
    fs::write(&edges, "src\tdst\tweight\n0\tnope\t1\n").unwrap();
    let err = read_graph_dir(dir.path()).unwrap_err();
    assert_eq!(err.path(), Some(edges.as_path()));

    let missing = dir.path().join("absent");
    let err = read_graph_dir(&missing).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn run_config_loads_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"backbone": "gcn", "epochs": 7, "seeds": [3, 4]}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.seeds, vec![3, 4]);
    assert_eq!(cfg.model_config().backbone, MainModelConfig::gcn().backbone);

    fs::write(&path, r#"{"epoch": 7}"#).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap_err().path(), Some(path.as_path()));
}

#[test]
fn checkpoint_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let model = MainModel::new(MainModelConfig::gat(), 5, 3, 4, 6).unwrap();
    let params = model.init_params(2);
    let path = dir.path().join("model.efck");
    write_checkpoint(&path, &params).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), params);

    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&path, bytes).unwrap();
    assert!(read_checkpoint(&path).is_err());
}
