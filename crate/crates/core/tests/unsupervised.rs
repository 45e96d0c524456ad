use edgeforge::graph::{Edge, Graph};
use edgeforge::unsupervised::louvain::UndirectedGraph;
use edgeforge::unsupervised::node2vec::{transition_weights, undirected_adjacency, walk};
use edgeforge::unsupervised::{
    edge_dot_features, forman_ricci, louvain, louvain_weighted, modularity, node2vec_embed, Node2VecConfig, NodeEmbedding,
};
use edgeforge::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen::<f64>() < p {
                let w = rng.gen_range(0.1..3.0);
                edges.push(Edge::new(i, j, w));
                edges.push(Edge::new(j, i, w));
            }
        }
    }
    Graph::from_edges(n, edges).unwrap()
}

/// Curvature from a flat list of undirected edges, written independently of
/// the library.
fn curvature_oracle(edges: &[(usize, usize, f64)], node_w: &[f64], u: usize, v: usize) -> f64 {
    let we = edges.iter().find(|e| (e.0, e.1) == (u.min(v), u.max(v))).unwrap().2;
    let side = |x: usize| -> f64 {
        let mut s = node_w[x] / we;
        for &(a, b, w) in edges {
            if (a == x || b == x) && (a, b) != (u.min(v), u.max(v)) {
                s -= node_w[x] / (we * w).sqrt();
            }
        }
        s
    };
    we * (side(u) + side(v))
}

#[test]
fn curvature_matches_brute_force() {
    for seed in 0..5 {
        let g = random_graph(15, 0.3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let node_w: Vec<f64> = (0..15).map(|_| rng.gen_range(0.5..2.0)).collect();
        let flat: Vec<(usize, usize, f64)> = g.edges().filter(|e| e.src < e.dst).map(|e| (e.src, e.dst, e.weight)).collect();
        let c = forman_ricci(&g, Some(&node_w), None).unwrap();
        assert_eq!(c.len(), flat.len());
        for &(u, v, _) in &flat {
            let expect = curvature_oracle(&flat, &node_w, u, v);
            assert!((c.get(u, v).unwrap() - expect).abs() < 1e-10, "edge {u}-{v}");
        }
    }
}

#[test]
fn unit_curvature_is_four_minus_degrees() {
    let g = random_graph(20, 0.25, 42);
    let ones = vec![1.0; g.n_edges()];
    let c = forman_ricci(&g, None, Some(&ones)).unwrap();
    let deg = |i: usize| g.out_degree(i) as f64;
    for ((u, v), r) in c.iter() {
        assert!((r - (4.0 - deg(u) - deg(v))).abs() < 1e-12);
    }
}

/// Modularity straight from the definition `1/2m Σ_ij [A_ij - k_i k_j / 2m] δ(c_i, c_j)`.
fn modularity_oracle(n: usize, pairs: &[(usize, usize)], c: &[usize]) -> f64 {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in pairs {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let m2: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if c[i] == c[j] {
                q += a[i][j] - k[i] * k[j] / m2;
            }
        }
    }
    q / m2
}

/// Every set partition of `n` items as a restricted growth string.
fn for_each_partition(n: usize, mut f: impl FnMut(&[usize])) {
    let mut a = vec![0usize; n];
    let mut maxes = vec![0usize; n];
    loop {
        f(&a);
        let mut i = n - 1;
        loop {
            if i == 0 {
                return;
            }
            if a[i] <= maxes[i - 1] {
                a[i] += 1;
                let m = maxes[i - 1].max(a[i]);
                maxes[i] = m;
                for j in (i + 1)..n {
                    a[j] = 0;
                    maxes[j] = m;
                }
                break;
            }
            i -= 1;
        }
    }
}

fn two_cliques_pairs() -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for base in [0, 5] {
        for i in 0..5 {
            for j in (i + 1)..5 {
                pairs.push((base + i, base + j));
            }
        }
    }
    pairs.push((4, 5));
    pairs
}

#[test]
fn partition_enumeration_counts_bell_number() {
    let mut count = 0;
    for_each_partition(10, |_| count += 1);
    assert_eq!(count, 115_975);
}

#[test]
fn louvain_finds_exhaustive_optimum_on_two_cliques() {
    let pairs = two_cliques_pairs();
    let g = Graph::from_pairs(10, &pairs).unwrap();
    let mut best = f64::NEG_INFINITY;
    for_each_partition(10, |c| best = best.max(modularity_oracle(10, &pairs, c)));
    for seed in 0..5 {
        let r = louvain(&g, 1.0, seed).unwrap();
        assert!((r.modularity - best).abs() < 1e-12);
        assert_eq!(r.community, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }
}

#[test]
fn modularity_matches_definition_on_random_partitions() {
    let g = random_graph(12, 0.3, 5);
    let pairs: Vec<(usize, usize)> = g.edges().filter(|e| e.src < e.dst).map(|e| (e.src, e.dst)).collect();
    let ug = UndirectedGraph::from_graph(&g, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let c: Vec<usize> = (0..12).map(|_| rng.gen_range(0..4)).collect();
        let q = modularity(&ug, &c, 1.0);
        assert!((q - modularity_oracle(12, &pairs, &c)).abs() < 1e-12);
        assert!((-0.5..=1.0).contains(&q));
    }
}

#[test]
fn louvain_never_loses_to_singletons_and_is_monotone() {
    for seed in 0..10 {
        let g = random_graph(40, 0.1, seed);
        let r = louvain(&g, 1.0, seed).unwrap();
        let ug = UndirectedGraph::from_graph(&g, false).unwrap();
        let singletons: Vec<usize> = (0..40).collect();
        assert!(r.modularity >= modularity(&ug, &singletons, 1.0));
        for w in r.pass_modularity.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
        assert_eq!(r, louvain(&g, 1.0, seed).unwrap());
    }
}

#[test]
fn weighted_louvain_follows_heavy_edges() {
    // A 6-cycle where alternating weights pair up (0,1), (2,3), (4,5).
    let edges = [(0, 1, 10.0), (1, 2, 0.1), (2, 3, 10.0), (3, 4, 0.1), (4, 5, 10.0), (5, 0, 0.1)];
    let ug = UndirectedGraph::from_weighted_edges(6, &edges).unwrap();
    let r = louvain_weighted(&ug, 1.0, 0).unwrap();
    assert_eq!(r.community, vec![0, 0, 1, 1, 2, 2]);
}

#[test]
fn biased_walk_steps_pass_chi_square() {
    // prev = 0, cur = 1; neighbors of 1: 0 (return), 2 (adjacent to 0), 3, 4 (far).
    let g = Graph::from_pairs(5, &[(0, 1), (1, 2), (1, 3), (1, 4), (0, 2)]).unwrap();
    let adj = undirected_adjacency(&g);
    let (p, q) = (2.0, 0.5);
    let w = transition_weights(&adj, 0, 1, p, q);
    let total: f64 = w.iter().sum();
    let mut counts = vec![0usize; adj[1].len()];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 20_000;
    let mut done = 0;
    while done < trials {
        let path = walk(&adj, 0, 3, p, q, &mut rng);
        if path[1] != 1 {
            continue;
        }
        let pos = adj[1].iter().position(|&x| x == path[2]).unwrap();
        counts[pos] += 1;
        done += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&w)
        .map(|(&c, &wi)| {
            let e = trials as f64 * wi / total;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 3 degrees of freedom; the 0.999 quantile is 16.27.
    assert!(chi2 < 16.27, "chi2 = {chi2}");
}

#[test]
fn node2vec_separates_cliques() {
    let mut pairs = Vec::new();
    for base in [0, 6] {
        for i in 0..6 {
            for j in (i + 1)..6 {
                pairs.push((base + i, base + j));
            }
        }
    }
    pairs.push((5, 6));
    let g = Graph::from_pairs(12, &pairs).unwrap().symmetrize().unwrap();
    let cfg = Node2VecConfig { walks_per_node: 20, epochs: 3, ..Default::default() };
    let emb = node2vec_embed(&g, &cfg, 4).unwrap();
    let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0, 0);
    for u in 0..12 {
        for v in (u + 1)..12 {
            if (u < 6) == (v < 6) {
                intra += emb.cosine(u, v);
                ni += 1;
            } else {
                inter += emb.cosine(u, v);
                nx += 1;
            }
        }
    }
    assert!(intra / ni as f64 > inter / nx as f64 + 0.2);
}

#[test]
fn uniform_walk_on_a_star_visits_leaves_evenly() {
    let g = Graph::from_pairs(6, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]).unwrap();
    let adj = undirected_adjacency(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 10_000;
    let mut counts = [0usize; 6];
    for _ in 0..trials {
        let path = walk(&adj, 0, 3, 1.0, 1.0, &mut rng);
        assert_eq!(path[2], 0);
        counts[path[1]] += 1;
    }
    let e = trials as f64 / 5.0;
    let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 4 degrees of freedom; the 0.999 quantile is 18.47.
    assert!(chi2 < 18.47, "chi2 = {chi2}");
}

#[test]
fn triangle_is_one_community() {
    let g = Graph::from_pairs(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
    assert_eq!(louvain(&g, 1.0, 0).unwrap().community, vec![0, 0, 0]);
}

#[test]
fn edge_dot_features_of_unit_and_orthogonal_vectors() {
    let g = Graph::from_pairs(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
    let vectors = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let dots = edge_dot_features(&NodeEmbedding { vectors }, &g).unwrap();
    assert_eq!(dots, vec![0.0, 1.0, 0.0]);
}
