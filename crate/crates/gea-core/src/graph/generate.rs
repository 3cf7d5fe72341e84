//! Synthetic dataset generators: binary-tree key matching and SBM clusters.

use super::{DatasetMeta, DatasetSplit, Features, Graph, GraphError, Target};
use crate::util::shuffle;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Default train/valid/test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

fn split_counts(count: usize, fracs: [f64; 3]) -> (usize, usize) {
    let train = (count as f64 * fracs[0]).floor() as usize;
    let valid = (count as f64 * fracs[1]).floor() as usize;
    (train.min(count), valid.min(count - train.min(count)))
}

fn make_split(
    mut graphs: Vec<Graph>,
    fracs: [f64; 3],
    meta: DatasetMeta,
) -> DatasetSplit {
    let (n_train, n_valid) = split_counts(graphs.len(), fracs);
    let test = graphs.split_off(n_train + n_valid);
    let valid = graphs.split_off(n_train);
    DatasetSplit {
        train: graphs,
        valid,
        test,
        meta,
    }
}

/// Complete binary trees of depth `r` whose root label is the class of
/// the unique leaf matching the root's query key.
///
/// Nodes are laid out heap-style (children of `i` at `2i+1`, `2i+2`);
/// every node carries a `(class, key)` pair: leaves get permuted classes
/// and keys from `1..=2^r`, internal nodes `(0, 0)`, and the root
/// `(0, query_key)`. The class count is `2^r`.
pub fn generate_tree_neighbour_match(
    r: usize,
    count: usize,
    seed: u64,
    fracs: [f64; 3],
) -> Result<DatasetSplit, GraphError> {
    if r < 2 {
        return Err(GraphError::InvalidParams(format!("depth r = {r} < 2")));
    }
    if count < 1 {
        return Err(GraphError::InvalidParams("count < 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = 1usize << r;
    let n = (1usize << (r + 1)) - 1;
    let first_leaf = leaves - 1;

    let graphs = (0..count)
        .map(|_| {
            let mut classes: Vec<i64> = (1..=leaves as i64).collect();
            let mut keys: Vec<i64> = (1..=leaves as i64).collect();
            shuffle(&mut classes, &mut rng);
            shuffle(&mut keys, &mut rng);
            let picked = rng.random_range(0..leaves);
            let query_key = keys[picked];
            let label = (classes[picked] - 1) as usize;

            let mut ids = vec![0i64; n * 2];
            for leaf in 0..leaves {
                let node = first_leaf + leaf;
                ids[node * 2] = classes[leaf];
                ids[node * 2 + 1] = keys[leaf];
            }
            ids[1] = query_key; // root key slot

            let mut edges = Vec::with_capacity(2 * (n - 1));
            for child in 1..n {
                let parent = (child - 1) / 2;
                edges.push((parent, child));
                edges.push((child, parent));
            }
            Graph {
                n,
                edges,
                node_feat: Features::Categorical { cols: 2, ids },
                edge_feat: None,
                target: Target::GraphClass(label),
                target_node: Some(0),
            }
        })
        .collect();

    let meta = DatasetMeta {
        seed,
        generator: "tree_neighbour_match".into(),
        params: json!({
            "r": r,
            "count": count,
            "split": fracs,
            "num_classes": leaves,
        }),
    };
    Ok(make_split(graphs, fracs, meta))
}

/// Stochastic-block-model node classification: `clusters` blocks of
/// `nodes_per_cluster` nodes, intra-block edge probability `p_in`,
/// inter-block `p_out`. One random node per cluster reveals its cluster
/// id (1-based) as the only nonzero feature; labels are memberships.
/// Nodes left isolated are rewired to one random same-cluster partner.
pub fn generate_sbm_cluster(
    nodes_per_cluster: usize,
    clusters: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
    count: usize,
    fracs: [f64; 3],
) -> Result<DatasetSplit, GraphError> {
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_out >= p_in {
        return Err(GraphError::InvalidParams(format!(
            "need 0 <= p_out < p_in <= 1, got p_in = {p_in}, p_out = {p_out}"
        )));
    }
    if nodes_per_cluster < 2 || clusters < 2 || count < 1 {
        return Err(GraphError::InvalidParams(
            "need nodes_per_cluster >= 2, clusters >= 2, count >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = nodes_per_cluster * clusters;

    let graphs = (0..count)
        .map(|_| {
            let cluster_of = |i: usize| i / nodes_per_cluster;
            let mut undirected = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    let p = if cluster_of(i) == cluster_of(j) { p_in } else { p_out };
                    if rng.random_bool(p) {
                        undirected.push((i, j));
                    }
                }
            }
            let mut degree = vec![0usize; n];
            for &(i, j) in &undirected {
                degree[i] += 1;
                degree[j] += 1;
            }
            for i in 0..n {
                if degree[i] == 0 {
                    let c = cluster_of(i);
                    let base = c * nodes_per_cluster;
                    let mut j = base + rng.random_range(0..nodes_per_cluster);
                    while j == i {
                        j = base + rng.random_range(0..nodes_per_cluster);
                    }
                    undirected.push((i.min(j), i.max(j)));
                    degree[i] += 1;
                    degree[j] += 1;
                }
            }
            let mut edges = Vec::with_capacity(2 * undirected.len());
            for &(i, j) in &undirected {
                edges.push((i, j));
                edges.push((j, i));
            }

            let mut ids = vec![0i64; n];
            for c in 0..clusters {
                let revealed = c * nodes_per_cluster + rng.random_range(0..nodes_per_cluster);
                ids[revealed] = (c + 1) as i64;
            }
            let labels = (0..n).map(cluster_of).collect();
            Graph {
                n,
                edges,
                node_feat: Features::Categorical { cols: 1, ids },
                edge_feat: None,
                target: Target::NodeLabels(labels),
                target_node: None,
            }
        })
        .collect();

    let meta = DatasetMeta {
        seed,
        generator: "sbm_cluster".into(),
        params: json!({
            "nodes_per_cluster": nodes_per_cluster,
            "clusters": clusters,
            "p_in": p_in,
            "p_out": p_out,
            "count": count,
            "split": fracs,
            "num_classes": clusters,
        }),
    };
    Ok(make_split(graphs, fracs, meta))
}
