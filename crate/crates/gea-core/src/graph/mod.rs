//! Graph and batch data model plus synthetic dataset generators.
//!
//! Undirected edges are always stored as two directed arcs, one per
//! orientation, so message passing can aggregate over in-arcs uniformly.
//! Batches are block-diagonal merges carrying per-node graph ids; arcs
//! never cross graph boundaries and unbatching is exact.

mod generate;
mod jsonl;

pub use generate::{generate_sbm_cluster, generate_tree_neighbour_match, DEFAULT_SPLIT};
pub use jsonl::{load_jsonl, load_split_dir, read_graphs, save_jsonl, write_graphs};

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("arc ({src}, {dst}) out of range for {n} nodes")]
    ArcOutOfRange { src: usize, dst: usize, n: usize },
    #[error("duplicate arc ({src}, {dst})")]
    DuplicateArc { src: usize, dst: usize },
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("feature rows {got} do not match count {expected}")]
    FeatureRows { expected: usize, got: usize },
    #[error("node label count {got} does not match node count {expected}")]
    LabelCount { expected: usize, got: usize },
    #[error("target node {node} out of range for {n} nodes")]
    TargetNodeRange { node: usize, n: usize },
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("batching requires homogeneous graphs: {0}")]
    SchemaMismatch(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Node or edge features: integer category tuples or dense float rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Categorical { cols: usize, ids: Vec<i64> },
    Dense { cols: usize, values: Vec<f64> },
}

impl Features {
    pub fn rows(&self) -> usize {
        match self {
            Features::Categorical { cols, ids } => {
                if *cols == 0 {
                    0
                } else {
                    ids.len() / cols
                }
            }
            Features::Dense { cols, values } => {
                if *cols == 0 {
                    0
                } else {
                    values.len() / cols
                }
            }
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Features::Categorical { cols, .. } | Features::Dense { cols, .. } => *cols,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Features::Categorical { .. } => "categorical",
            Features::Dense { .. } => "dense",
        }
    }

    fn concat(parts: Vec<&Features>) -> Result<Features, GraphError> {
        let first = parts[0];
        for p in &parts {
            if p.kind_name() != first.kind_name() || p.cols() != first.cols() {
                return Err(GraphError::SchemaMismatch(format!(
                    "feature schema {}({}) vs {}({})",
                    first.kind_name(),
                    first.cols(),
                    p.kind_name(),
                    p.cols()
                )));
            }
        }
        Ok(match first {
            Features::Categorical { cols, .. } => Features::Categorical {
                cols: *cols,
                ids: parts
                    .iter()
                    .flat_map(|p| match p {
                        Features::Categorical { ids, .. } => ids.iter().copied(),
                        Features::Dense { .. } => unreachable!(),
                    })
                    .collect(),
            },
            Features::Dense { cols, .. } => Features::Dense {
                cols: *cols,
                values: parts
                    .iter()
                    .flat_map(|p| match p {
                        Features::Dense { values, .. } => values.iter().copied(),
                        Features::Categorical { .. } => unreachable!(),
                    })
                    .collect(),
            },
        })
    }

    fn slice_rows(&self, from: usize, to: usize) -> Features {
        match self {
            Features::Categorical { cols, ids } => Features::Categorical {
                cols: *cols,
                ids: ids[from * cols..to * cols].to_vec(),
            },
            Features::Dense { cols, values } => Features::Dense {
                cols: *cols,
                values: values[from * cols..to * cols].to_vec(),
            },
        }
    }
}

/// Prediction target; exactly one kind per graph.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    NodeLabels(Vec<usize>),
    GraphClass(usize),
    GraphValue(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub n: usize,
    /// Directed arcs; both orientations of every undirected edge.
    pub edges: Vec<(usize, usize)>,
    pub node_feat: Features,
    pub edge_feat: Option<Features>,
    pub target: Target,
    pub target_node: Option<usize>,
}

impl Graph {
    /// Directed arc count.
    pub fn m(&self) -> usize {
        self.edges.len()
    }

    /// Checks structural invariants: arc ranges, no duplicates or
    /// self-loops, feature row counts, target consistency.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = std::collections::HashSet::with_capacity(self.edges.len());
        for &(src, dst) in &self.edges {
            if src >= self.n || dst >= self.n {
                return Err(GraphError::ArcOutOfRange { src, dst, n: self.n });
            }
            if src == dst {
                return Err(GraphError::SelfLoop(src));
            }
            if !seen.insert((src, dst)) {
                return Err(GraphError::DuplicateArc { src, dst });
            }
        }
        if self.node_feat.rows() != self.n {
            return Err(GraphError::FeatureRows {
                expected: self.n,
                got: self.node_feat.rows(),
            });
        }
        if let Some(ef) = &self.edge_feat {
            if ef.rows() != self.m() {
                return Err(GraphError::FeatureRows {
                    expected: self.m(),
                    got: ef.rows(),
                });
            }
        }
        if let Target::NodeLabels(labels) = &self.target {
            if labels.len() != self.n {
                return Err(GraphError::LabelCount {
                    expected: self.n,
                    got: labels.len(),
                });
            }
        }
        if let Some(t) = self.target_node {
            if t >= self.n {
                return Err(GraphError::TargetNodeRange { node: t, n: self.n });
            }
        }
        Ok(())
    }

    /// In-degree of every node (over directed arcs).
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(_, dst) in &self.edges {
            deg[dst] += 1;
        }
        deg
    }

    /// Relabels nodes: node `i` becomes `perm[i]`. Arc list order is kept.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.n, "permutation length");
        let mut inverse = vec![0; self.n];
        for (old, &new) in perm.iter().enumerate() {
            inverse[new] = old;
        }
        let permute_feat = |f: &Features| match f {
            Features::Categorical { cols, ids } => Features::Categorical {
                cols: *cols,
                ids: (0..self.n)
                    .flat_map(|new| ids[inverse[new] * cols..(inverse[new] + 1) * cols].to_vec())
                    .collect(),
            },
            Features::Dense { cols, values } => Features::Dense {
                cols: *cols,
                values: (0..self.n)
                    .flat_map(|new| {
                        values[inverse[new] * cols..(inverse[new] + 1) * cols].to_vec()
                    })
                    .collect(),
            },
        };
        Graph {
            n: self.n,
            edges: self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect(),
            node_feat: permute_feat(&self.node_feat),
            edge_feat: self.edge_feat.clone(),
            target: match &self.target {
                Target::NodeLabels(l) => {
                    Target::NodeLabels((0..self.n).map(|new| l[inverse[new]]).collect())
                }
                other => other.clone(),
            },
            target_node: self.target_node.map(|t| perm[t]),
        }
    }
}

/// Block-diagonal merge of several graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub node_feat: Features,
    pub edge_feat: Option<Features>,
    /// Graph index of every node; sorted ascending.
    pub graph_id: Vec<usize>,
    /// Node range boundaries per member graph (`num_graphs + 1` entries).
    pub node_offsets: Vec<usize>,
    /// Arc range boundaries per member graph.
    pub arc_offsets: Vec<usize>,
    /// Per-member targets, in member order.
    pub targets: Vec<Target>,
    /// Per-member target nodes, as global node indices.
    pub target_nodes: Vec<Option<usize>>,
}

impl Batch {
    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.targets.len()
    }

    /// Graph index of every arc, derived from the arc offsets.
    pub fn edge_graph_id(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.m());
        for g in 0..self.num_graphs() {
            out.extend(std::iter::repeat_n(g, self.arc_offsets[g + 1] - self.arc_offsets[g]));
        }
        out
    }
}

/// Merges graphs block-diagonally with index offsets.
pub fn batch(graphs: &[Graph]) -> Result<Batch, GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::SchemaMismatch("empty batch".into()));
    }
    let has_edge_feat = graphs[0].edge_feat.is_some();
    for g in graphs {
        if g.edge_feat.is_some() != has_edge_feat {
            return Err(GraphError::SchemaMismatch(
                "mixed presence of edge features".into(),
            ));
        }
        if std::mem::discriminant(&g.target) != std::mem::discriminant(&graphs[0].target) {
            return Err(GraphError::SchemaMismatch("mixed target kinds".into()));
        }
    }
    let mut node_offsets = vec![0];
    let mut arc_offsets = vec![0];
    let mut edges = Vec::new();
    let mut graph_id = Vec::new();
    let mut targets = Vec::new();
    let mut target_nodes = Vec::new();
    for (gi, g) in graphs.iter().enumerate() {
        let base = *node_offsets.last().expect("non-empty offsets");
        edges.extend(g.edges.iter().map(|&(s, d)| (s + base, d + base)));
        graph_id.extend(std::iter::repeat_n(gi, g.n));
        node_offsets.push(base + g.n);
        arc_offsets.push(arc_offsets.last().unwrap() + g.m());
        targets.push(g.target.clone());
        target_nodes.push(g.target_node.map(|t| t + base));
    }
    let node_feat = Features::concat(graphs.iter().map(|g| &g.node_feat).collect())?;
    let edge_feat = if has_edge_feat {
        Some(Features::concat(
            graphs.iter().map(|g| g.edge_feat.as_ref().expect("checked")).collect(),
        )?)
    } else {
        None
    };
    Ok(Batch {
        n: *node_offsets.last().unwrap(),
        edges,
        node_feat,
        edge_feat,
        graph_id,
        node_offsets,
        arc_offsets,
        targets,
        target_nodes,
    })
}

/// Splits a batch back into its member graphs; exact inverse of [`batch`].
pub fn unbatch(b: &Batch) -> Vec<Graph> {
    (0..b.num_graphs())
        .map(|gi| {
            let (nlo, nhi) = (b.node_offsets[gi], b.node_offsets[gi + 1]);
            let (alo, ahi) = (b.arc_offsets[gi], b.arc_offsets[gi + 1]);
            Graph {
                n: nhi - nlo,
                edges: b.edges[alo..ahi]
                    .iter()
                    .map(|&(s, d)| (s - nlo, d - nlo))
                    .collect(),
                node_feat: b.node_feat.slice_rows(nlo, nhi),
                edge_feat: b.edge_feat.as_ref().map(|ef| ef.slice_rows(alo, ahi)),
                target: b.targets[gi].clone(),
                target_node: b.target_nodes[gi].map(|t| t - nlo),
            }
        })
        .collect()
}

/// Generator provenance recorded next to the dataset files.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub generator: String,
    pub params: Value,
}

/// Train/validation/test graphs plus the seed they were generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Graph>,
    pub valid: Vec<Graph>,
    pub test: Vec<Graph>,
    pub meta: DatasetMeta,
}

impl DatasetSplit {
    pub fn all_graphs(&self) -> impl Iterator<Item = &Graph> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Task kind inferred from a dataset's targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    NodeClassify,
    GraphClassify,
    GraphRegress,
}

/// Feature schema and task summary used to size the embedding and head.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub task: TaskKind,
    /// Classes for classification, output width for regression.
    pub out_dim: usize,
    /// Vocabulary size per categorical node column (empty for dense).
    pub node_vocab: Vec<usize>,
    /// Dense node feature width (0 for categorical).
    pub node_dense_dim: usize,
    pub edge_vocab: Vec<usize>,
    pub edge_dense_dim: usize,
    pub has_edge_feat: bool,
}

impl DatasetInfo {
    pub fn from_split(split: &DatasetSplit) -> Result<Self, GraphError> {
        let first = split
            .all_graphs()
            .next()
            .ok_or_else(|| GraphError::SchemaMismatch("empty dataset".into()))?;
        let task = match &first.target {
            Target::NodeLabels(_) => TaskKind::NodeClassify,
            Target::GraphClass(_) => TaskKind::GraphClassify,
            Target::GraphValue(_) => TaskKind::GraphRegress,
        };
        let mut out_dim = match &first.target {
            Target::GraphValue(v) => v.len(),
            _ => 0,
        };
        // num_classes recorded by the generator wins over the observed max.
        if let Some(k) = split.meta.params.get("num_classes").and_then(Value::as_u64) {
            out_dim = out_dim.max(k as usize);
        }
        let (mut node_vocab, mut node_dense_dim) = (Vec::new(), 0);
        let (mut edge_vocab, mut edge_dense_dim) = (Vec::new(), 0);
        let mut has_edge_feat = false;
        for g in split.all_graphs() {
            match &g.target {
                Target::NodeLabels(labels) => {
                    for &l in labels {
                        out_dim = out_dim.max(l + 1);
                    }
                }
                Target::GraphClass(c) => out_dim = out_dim.max(c + 1),
                Target::GraphValue(_) => {}
            }
            match &g.node_feat {
                Features::Categorical { cols, ids } => {
                    node_vocab.resize(node_vocab.len().max(*cols), 0);
                    for (i, &id) in ids.iter().enumerate() {
                        let col = i % cols;
                        node_vocab[col] = node_vocab[col].max(id as usize + 1);
                    }
                }
                Features::Dense { cols, .. } => node_dense_dim = node_dense_dim.max(*cols),
            }
            if let Some(ef) = &g.edge_feat {
                has_edge_feat = true;
                match ef {
                    Features::Categorical { cols, ids } => {
                        edge_vocab.resize(edge_vocab.len().max(*cols), 0);
                        for (i, &id) in ids.iter().enumerate() {
                            let col = i % cols;
                            edge_vocab[col] = edge_vocab[col].max(id as usize + 1);
                        }
                    }
                    Features::Dense { cols, .. } => edge_dense_dim = edge_dense_dim.max(*cols),
                }
            }
        }
        Ok(DatasetInfo {
            task,
            out_dim,
            node_vocab,
            node_dense_dim,
            edge_vocab,
            edge_dense_dim,
            has_edge_feat,
        })
    }
}

#[cfg(test)]
mod tests;
