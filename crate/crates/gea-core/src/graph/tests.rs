use super::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tree_split(r: usize, count: usize, seed: u64) -> DatasetSplit {
    generate_tree_neighbour_match(r, count, seed, [1.0, 0.0, 0.0]).unwrap()
}

// ---- tree neighbour match ----

#[test]
fn tree_r2_shape_and_classes() {
    let split = tree_split(2, 12, 0);
    assert_eq!(split.train.len(), 12);
    for g in &split.train {
        assert_eq!(g.n, 7);
        assert_eq!(g.m(), 12); // 2 * (n - 1) directed arcs
        g.validate().unwrap();
        match g.target {
            Target::GraphClass(c) => assert!(c < 4),
            _ => panic!("tree targets are graph classes"),
        }
        assert_eq!(g.target_node, Some(0));
    }
    let info = DatasetInfo::from_split(&split).unwrap();
    assert_eq!(info.task, TaskKind::GraphClassify);
    assert_eq!(info.out_dim, 4);
}

#[test]
fn tree_r3_shape() {
    let split = tree_split(3, 5, 1);
    for g in &split.train {
        assert_eq!(g.n, 15);
        assert_eq!(g.m(), 28);
    }
    let info = DatasetInfo::from_split(&split).unwrap();
    assert_eq!(info.out_dim, 8);
}

#[test]
fn tree_unique_leaf_matches_query_key() {
    // Exhaustive scan: exactly one leaf key equals the root's query key,
    // and that leaf's class is the stored label.
    let split = tree_split(3, 200, 7);
    for g in &split.train {
        let (cols, ids) = match &g.node_feat {
            Features::Categorical { cols, ids } => (*cols, ids),
            _ => panic!("tree features are categorical"),
        };
        assert_eq!(cols, 2);
        let query = ids[1];
        assert!(query >= 1);
        let first_leaf = (g.n - 1) / 2;
        let matches: Vec<usize> = (first_leaf..g.n)
            .filter(|&v| ids[v * 2 + 1] == query)
            .collect();
        assert_eq!(matches.len(), 1, "exactly one matching leaf");
        let label = match g.target {
            Target::GraphClass(c) => c,
            _ => unreachable!(),
        };
        assert_eq!(ids[matches[0] * 2] - 1, label as i64);
        // Internal non-root nodes carry the null pair.
        for v in 1..first_leaf {
            assert_eq!((ids[v * 2], ids[v * 2 + 1]), (0, 0));
        }
        assert_eq!(ids[0], 0);
    }
}

#[test]
fn tree_label_distribution_uniform_chi_squared() {
    let split = tree_split(2, 10_000, 13);
    let mut counts = [0usize; 4];
    for g in &split.train {
        match g.target {
            Target::GraphClass(c) => counts[c] += 1,
            _ => unreachable!(),
        }
    }
    let expected = 10_000.0 / 4.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99th percentile of chi-squared with 3 degrees of freedom.
    assert!(chi2 < 11.345, "chi2 = {chi2}, counts = {counts:?}");
}

#[test]
fn tree_rejects_shallow_depth() {
    assert!(matches!(
        generate_tree_neighbour_match(1, 5, 0, DEFAULT_SPLIT),
        Err(GraphError::InvalidParams(_))
    ));
}

#[test]
fn generators_are_seed_deterministic_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_jsonl(&generate_tree_neighbour_match(3, 40, 99, DEFAULT_SPLIT).unwrap(), &a).unwrap();
    save_jsonl(&generate_tree_neighbour_match(3, 40, 99, DEFAULT_SPLIT).unwrap(), &b).unwrap();
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "meta.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between identical seeds"
        );
    }
}

// ---- sbm ----

#[test]
fn sbm_deterministic_corner_is_disjoint_cliques() {
    // p_in = 1, p_out = 0 with clusters of 3 gives two disjoint triangles.
    let split = generate_sbm_cluster(3, 2, 1.0, 0.0, 5, 4, [1.0, 0.0, 0.0]).unwrap();
    for g in &split.train {
        assert_eq!(g.n, 6);
        assert_eq!(g.m(), 12); // two triangles, both orientations
        g.validate().unwrap();
        let labels = match &g.target {
            Target::NodeLabels(l) => l.clone(),
            _ => panic!("sbm targets are node labels"),
        };
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
        for &(s, d) in &g.edges {
            assert_eq!(labels[s], labels[d], "no cross-cluster edges at p_out=0");
        }
    }
}

#[test]
fn sbm_sizes_six_by_twenty() {
    let split = generate_sbm_cluster(20, 6, 0.55, 0.25, 3, 3, [1.0, 0.0, 0.0]).unwrap();
    for g in &split.train {
        assert_eq!(g.n, 120);
    }
    let info = DatasetInfo::from_split(&split).unwrap();
    assert_eq!(info.task, TaskKind::NodeClassify);
    assert_eq!(info.out_dim, 6);
    assert_eq!(info.node_vocab, vec![7]); // ids 0..=6
}

#[test]
fn sbm_density_matches_p_in_monte_carlo() {
    // Mean within-cluster density over 100 graphs vs a 3-sigma binomial bound.
    let (n_per, clusters, p_in, p_out) = (10usize, 3usize, 0.6, 0.1);
    let split = generate_sbm_cluster(n_per, clusters, p_in, p_out, 42, 100, [1.0, 0.0, 0.0]).unwrap();
    let pairs_per_graph = clusters * n_per * (n_per - 1) / 2;
    let total_pairs = (100 * pairs_per_graph) as f64;
    let mut hits = 0usize;
    for g in &split.train {
        let mut seen = std::collections::HashSet::new();
        for &(s, d) in &g.edges {
            if s < d && s / n_per == d / n_per {
                seen.insert((s, d));
            }
        }
        hits += seen.len();
    }
    // Rewiring can only add within-cluster edges, so allow the bound plus
    // the (rare) rewired extras on the high side.
    let density = hits as f64 / total_pairs;
    let sigma = (p_in * (1.0 - p_in) / total_pairs).sqrt();
    assert!(
        (density - p_in).abs() < 3.0 * sigma + 1e-3,
        "density = {density}, expected about {p_in}"
    );
}

#[test]
fn sbm_rejects_bad_probabilities() {
    assert!(generate_sbm_cluster(5, 2, 0.3, 0.5, 0, 1, DEFAULT_SPLIT).is_err());
    assert!(generate_sbm_cluster(5, 2, 1.2, 0.1, 0, 1, DEFAULT_SPLIT).is_err());
}

#[test]
fn sbm_leaves_no_isolated_nodes() {
    let split = generate_sbm_cluster(8, 3, 0.15, 0.01, 11, 30, [1.0, 0.0, 0.0]).unwrap();
    for g in &split.train {
        let deg = g.in_degrees();
        assert!(deg.iter().all(|&d| d > 0), "isolated node survived rewiring");
    }
}

// ---- batching ----

fn toy_graph(n: usize, value: f64) -> Graph {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((i - 1, i));
        edges.push((i, i - 1));
    }
    Graph {
        n,
        edges,
        node_feat: Features::Dense {
            cols: 2,
            values: (0..2 * n).map(|i| value + i as f64).collect(),
        },
        edge_feat: None,
        target: Target::GraphClass(0),
        target_node: None,
    }
}

#[test]
fn batch_graph_ids_and_offsets() {
    let b = batch(&[toy_graph(3, 0.0), toy_graph(4, 10.0)]).unwrap();
    assert_eq!(b.n, 7);
    assert_eq!(b.graph_id, vec![0, 0, 0, 1, 1, 1, 1]);
    assert_eq!(b.node_offsets, vec![0, 3, 7]);
    assert_eq!(b.arc_offsets, vec![0, 4, 10]);
}

#[test]
fn singleton_batch_round_trips_to_original() {
    let g = toy_graph(5, 2.0);
    let b = batch(std::slice::from_ref(&g)).unwrap();
    let back = unbatch(&b);
    assert_eq!(back.len(), 1);
    assert_eq!(back[0], g);
}

#[test]
fn batch_shifts_second_graph_arcs_by_n1() {
    let (g1, g2) = (toy_graph(3, 0.0), toy_graph(4, 1.0));
    let b = batch(&[g1.clone(), g2.clone()]).unwrap();
    // Loop oracle: arcs of graph 2 are the originals shifted by n1 = 3.
    for (k, &(s, d)) in g2.edges.iter().enumerate() {
        assert_eq!(b.edges[g1.m() + k], (s + 3, d + 3));
    }
    // Arc locality: endpoints always share a graph id.
    for &(s, d) in &b.edges {
        assert_eq!(b.graph_id[s], b.graph_id[d]);
    }
}

#[test]
fn unbatch_is_exact_inverse() {
    let graphs = vec![toy_graph(2, 0.5), toy_graph(6, -3.0), toy_graph(4, 9.0)];
    let back = unbatch(&batch(&graphs).unwrap());
    assert_eq!(back, graphs);
}

#[test]
fn batch_rejects_mixed_targets() {
    let mut g2 = toy_graph(3, 0.0);
    g2.target = Target::NodeLabels(vec![0, 1, 0]);
    let err = batch(&[toy_graph(3, 0.0), g2]).unwrap_err();
    assert!(matches!(err, GraphError::SchemaMismatch(_)));
}

// ---- jsonl ----

#[test]
fn empty_split_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let split = DatasetSplit {
        train: vec![],
        valid: vec![],
        test: vec![],
        meta: DatasetMeta {
            seed: 0,
            generator: "none".into(),
            params: serde_json::Value::Null,
        },
    };
    save_jsonl(&split, dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join("train.jsonl")).unwrap(), b"");
    let back = load_jsonl(dir.path()).unwrap();
    assert!(back.train.is_empty() && back.valid.is_empty() && back.test.is_empty());
}

#[test]
fn jsonl_round_trip_is_field_exact_for_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut graphs = Vec::new();
    for k in 0..50 {
        let n = 2 + rng.random_range(0..5);
        let mut undirected = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_bool(0.5) {
                    undirected.push((i, j));
                }
            }
        }
        if undirected.is_empty() {
            // Column widths of empty feature blocks are unrecoverable from
            // JSON, so keep edge-feature graphs non-edgeless.
            undirected.push((0, 1));
        }
        let mut edges = Vec::new();
        for &(i, j) in &undirected {
            edges.push((i, j));
            edges.push((j, i));
        }
        let dense = k % 2 == 0;
        let node_feat = if dense {
            Features::Dense {
                cols: 3,
                values: (0..3 * n).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect(),
            }
        } else {
            Features::Categorical {
                cols: 2,
                ids: (0..2 * n).map(|_| rng.random_range(0..9)).collect(),
            }
        };
        let edge_feat = (k % 3 == 0).then(|| Features::Dense {
            cols: 1,
            values: (0..edges.len()).map(|_| rng.random::<f64>()).collect(),
        });
        let target = match k % 3 {
            0 => Target::NodeLabels((0..n).map(|_| rng.random_range(0..4)).collect()),
            1 => Target::GraphClass(rng.random_range(0..10)),
            _ => Target::GraphValue(vec![rng.random::<f64>(), rng.random::<f64>() * -7.0]),
        };
        let g = Graph {
            n,
            edges,
            node_feat,
            edge_feat,
            target,
            target_node: (k % 4 == 0).then(|| rng.random_range(0..n)),
        };
        g.validate().unwrap();
        graphs.push(g);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.jsonl");
    write_graphs(&path, &graphs).unwrap();
    let back = read_graphs(&path).unwrap();
    assert_eq!(back, graphs);

    // Bit-exact floats: a second save writes identical bytes.
    let path2 = dir.path().join("g2.jsonl");
    write_graphs(&path2, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn hand_written_single_edge_line_is_duplicated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hand.jsonl");
    std::fs::write(
        &path,
        r#"{"n":2,"edges":[[0,1]],"node_cat":[[1],[2]],"target":{"kind":"graph_class","values":[0]},"target_node":null}"#,
    )
    .unwrap();
    let graphs = read_graphs(&path).unwrap();
    assert_eq!(graphs.len(), 1);
    assert_eq!(graphs[0].n, 2);
    assert_eq!(graphs[0].m(), 2);
    assert!(graphs[0].edges.contains(&(1, 0)));
}

#[test]
fn malformed_line_error_carries_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"n\":1,\"edges\":[],\"node_cat\":[[0]],\"target\":{\"kind\":\"graph_class\",\"values\":[0]},\"target_node\":null}\nnot json\n",
    )
    .unwrap();
    match read_graphs(&path) {
        Err(GraphError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

// ---- permutation ----

#[test]
fn permuted_graph_keeps_structure() {
    let split = tree_split(2, 1, 3);
    let g = &split.train[0];
    let perm: Vec<usize> = (0..g.n).rev().collect();
    let p = g.permuted(&perm);
    p.validate().unwrap();
    assert_eq!(p.m(), g.m());
    assert_eq!(p.target_node, Some(g.n - 1));
    // Applying the inverse permutation restores the original.
    let mut inv = vec![0; g.n];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    assert_eq!(&p.permuted(&inv), g);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn batch_unbatch_round_trip(sizes in proptest::collection::vec(2usize..6, 1..5), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let graphs: Vec<Graph> = sizes
                .iter()
                .map(|&n| {
                    let mut g = toy_graph(n, rng.random::<f64>());
                    g.target = Target::GraphClass(rng.random_range(0..3));
                    g
                })
                .collect();
            let b = batch(&graphs).unwrap();
            prop_assert_eq!(unbatch(&b), graphs);
            for &(s, d) in &b.edges {
                prop_assert_eq!(b.graph_id[s], b.graph_id[d]);
            }
        }
    }
}
