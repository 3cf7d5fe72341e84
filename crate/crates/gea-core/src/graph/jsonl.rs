//! Line-delimited JSON graph files.
//!
//! One object per line: `n`, `edges` (directed arcs, both orientations),
//! `node_cat` or `node_feat`, optional `edge_cat`/`edge_feat`, `target`
//! `{kind, values}` and `target_node`. A dataset directory holds
//! `train.jsonl`, `valid.jsonl`, `test.jsonl` and `meta.json`. Floats
//! survive a save/load round trip bit for bit.

use super::{DatasetMeta, DatasetSplit, Features, Graph, GraphError, Target};
use crate::util::write_atomic;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_cat: Option<Vec<Vec<i64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_feat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_cat: Option<Vec<Vec<i64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_feat: Option<Vec<Vec<f64>>>,
    target: TargetRecord,
    target_node: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetRecord {
    kind: String,
    values: serde_json::Value,
}

fn features_to_nested_i64(f: &Features) -> Option<Vec<Vec<i64>>> {
    match f {
        Features::Categorical { cols, ids } => {
            Some(ids.chunks(*cols.max(&1)).map(|c| c.to_vec()).collect())
        }
        Features::Dense { .. } => None,
    }
}

fn features_to_nested_f64(f: &Features) -> Option<Vec<Vec<f64>>> {
    match f {
        Features::Dense { cols, values } => {
            Some(values.chunks(*cols.max(&1)).map(|c| c.to_vec()).collect())
        }
        Features::Categorical { .. } => None,
    }
}

fn nested_to_features(
    cat: Option<Vec<Vec<i64>>>,
    dense: Option<Vec<Vec<f64>>>,
    rows: usize,
    what: &str,
) -> Result<Option<Features>, String> {
    match (cat, dense) {
        (Some(_), Some(_)) => Err(format!("{what} has both categorical and dense features")),
        (Some(nested), None) => {
            let cols = nested.first().map_or(0, Vec::len);
            if nested.len() != rows || nested.iter().any(|r| r.len() != cols) {
                return Err(format!("{what} categorical features are ragged"));
            }
            Ok(Some(Features::Categorical {
                cols,
                ids: nested.into_iter().flatten().collect(),
            }))
        }
        (None, Some(nested)) => {
            let cols = nested.first().map_or(0, Vec::len);
            if nested.len() != rows || nested.iter().any(|r| r.len() != cols) {
                return Err(format!("{what} dense features are ragged"));
            }
            Ok(Some(Features::Dense {
                cols,
                values: nested.into_iter().flatten().collect(),
            }))
        }
        (None, None) => Ok(None),
    }
}

fn graph_to_record(g: &Graph) -> GraphRecord {
    let (kind, values) = match &g.target {
        Target::NodeLabels(l) => ("node", serde_json::json!(l)),
        Target::GraphClass(c) => ("graph_class", serde_json::json!([c])),
        Target::GraphValue(v) => ("graph_reg", serde_json::json!(v)),
    };
    GraphRecord {
        n: g.n,
        edges: g.edges.iter().map(|&(s, d)| [s, d]).collect(),
        node_cat: features_to_nested_i64(&g.node_feat),
        node_feat: features_to_nested_f64(&g.node_feat),
        edge_cat: g.edge_feat.as_ref().and_then(features_to_nested_i64),
        edge_feat: g.edge_feat.as_ref().and_then(features_to_nested_f64),
        target: TargetRecord {
            kind: kind.into(),
            values,
        },
        target_node: g.target_node,
    }
}

fn record_to_graph(rec: GraphRecord) -> Result<Graph, String> {
    let mut edges: Vec<(usize, usize)> = rec.edges.iter().map(|&[s, d]| (s, d)).collect();
    let had_edge_feat = rec.edge_cat.is_some() || rec.edge_feat.is_some();

    // Undirected duplication rule: missing reverse orientations are added.
    let arc_set: std::collections::HashSet<(usize, usize)> = edges.iter().copied().collect();
    if arc_set.len() != edges.len() {
        return Err("duplicate arcs".into());
    }
    let missing: Vec<(usize, usize)> = edges
        .iter()
        .filter(|&&(s, d)| !arc_set.contains(&(d, s)))
        .map(|&(s, d)| (d, s))
        .collect();
    if !missing.is_empty() && had_edge_feat {
        return Err("edge features present but reverse arcs missing".into());
    }
    edges.extend(missing);

    let node_feat = nested_to_features(rec.node_cat, rec.node_feat, rec.n, "node")?
        .ok_or("missing node features")?;
    let edge_feat = nested_to_features(rec.edge_cat, rec.edge_feat, edges.len(), "edge")?;

    let target = match rec.target.kind.as_str() {
        "node" => {
            let labels: Vec<usize> = serde_json::from_value(rec.target.values)
                .map_err(|e| format!("node labels: {e}"))?;
            Target::NodeLabels(labels)
        }
        "graph_class" => {
            let values: Vec<usize> = serde_json::from_value(rec.target.values)
                .map_err(|e| format!("graph class: {e}"))?;
            match values.as_slice() {
                [c] => Target::GraphClass(*c),
                _ => return Err("graph_class expects exactly one value".into()),
            }
        }
        "graph_reg" => {
            let values: Vec<f64> = serde_json::from_value(rec.target.values)
                .map_err(|e| format!("graph values: {e}"))?;
            Target::GraphValue(values)
        }
        other => return Err(format!("unknown target kind {other:?}")),
    };

    let g = Graph {
        n: rec.n,
        edges,
        node_feat,
        edge_feat,
        target,
        target_node: rec.target_node,
    };
    g.validate().map_err(|e| e.to_string())?;
    Ok(g)
}

/// Serializes graphs one JSON object per line.
pub fn write_graphs(path: &Path, graphs: &[Graph]) -> Result<(), GraphError> {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serde_json::to_string(&graph_to_record(g))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Parses a JSONL graph file; errors carry 1-based line numbers.
pub fn read_graphs(path: &Path) -> Result<Vec<Graph>, GraphError> {
    let content = std::fs::read_to_string(path)?;
    let mut graphs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(line).map_err(|e| GraphError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        graphs.push(record_to_graph(rec).map_err(|message| GraphError::Parse {
            line: i + 1,
            message,
        })?);
    }
    Ok(graphs)
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `meta.json`.
pub fn save_jsonl(split: &DatasetSplit, dir: &Path) -> Result<(), GraphError> {
    std::fs::create_dir_all(dir)?;
    write_graphs(&dir.join("train.jsonl"), &split.train)?;
    write_graphs(&dir.join("valid.jsonl"), &split.valid)?;
    write_graphs(&dir.join("test.jsonl"), &split.test)?;
    let meta = serde_json::to_vec_pretty(&split.meta)?;
    write_atomic(&dir.join("meta.json"), &meta)?;
    Ok(())
}

/// Loads a dataset directory written by [`save_jsonl`].
pub fn load_jsonl(dir: &Path) -> Result<DatasetSplit, GraphError> {
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    Ok(DatasetSplit {
        train: read_graphs(&dir.join("train.jsonl"))?,
        valid: read_graphs(&dir.join("valid.jsonl"))?,
        test: read_graphs(&dir.join("test.jsonl"))?,
        meta,
    })
}

/// Loads a dataset directory that may lack `meta.json` (hand-built data).
pub fn load_split_dir(dir: &Path) -> Result<DatasetSplit, GraphError> {
    if dir.join("meta.json").exists() {
        return load_jsonl(dir);
    }
    Ok(DatasetSplit {
        train: read_graphs(&dir.join("train.jsonl"))?,
        valid: read_graphs(&dir.join("valid.jsonl"))?,
        test: read_graphs(&dir.join("test.jsonl"))?,
        meta: DatasetMeta {
            seed: 0,
            generator: "external".into(),
            params: serde_json::Value::Null,
        },
    })
}
