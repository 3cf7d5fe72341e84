//! Attention-score export.
//!
//! Re-derives external attention (per head, `n x S`) and self-attention
//! (per head, `n x n`) from a fresh forward pass per graph, computes a
//! per-node salience score from the external attention entropy, and
//! writes one schema-validated JSON document per graph.

use crate::{rebuild_model, CliError};
use gea_core::attention::AttnTrace;
use gea_core::config::RunConfig;
use gea_core::graph::batch;
use gea_core::model::ModelInput;
use gea_core::posenc::compute_pe;
use gea_core::tensor::{Tape, Tensor};
use gea_core::util::write_atomic;
use serde_json::{json, Value};
use std::path::Path;

pub fn run(
    config: RunConfig,
    checkpoint: &Path,
    out: &Path,
    graphs: usize,
    split_name: &str,
) -> Result<(), CliError> {
    let (model, store, split, info) = rebuild_model(&config, checkpoint)?;
    let pool = match split_name {
        "train" => &split.train,
        "valid" => &split.valid,
        "test" => &split.test,
        other => return Err(CliError::Config(format!("unknown split {other:?}"))),
    };
    if pool.is_empty() {
        return Err(CliError::Config(format!("split {split_name:?} is empty")));
    }
    std::fs::create_dir_all(out)?;

    let count = graphs.min(pool.len());
    for (idx, graph) in pool.iter().take(count).enumerate() {
        let b = batch(std::slice::from_ref(graph))?;
        let pe = compute_pe(graph, &model.config.pe)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let input = ModelInput::from_batch(&b, &info, pe)
            .map_err(|e| CliError::Other(e.to_string()))?;

        let mut traces: Vec<AttnTrace> = Vec::new();
        let mut tape = Tape::new();
        model
            .forward(&mut tape, &store, &input, Some(&mut traces))
            .map_err(|e| CliError::Other(e.to_string()))?;

        let doc = dump_document(idx, graph.n, &traces);
        validate_dump(&doc, graph.n).map_err(CliError::Other)?;
        let path = out.join(format!("graph_{idx:03}.json"));
        write_atomic(&path, &serde_json::to_vec_pretty(&doc)?)?;
    }
    println!("wrote {count} attention dumps to {}", out.display());
    Ok(())
}

fn matrix_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Normalized-entropy salience: `1 - H(alpha_i) / ln S`, averaged over
/// layers and external heads. A single-unit bank is maximally peaked.
fn salience(n: usize, traces: &[AttnTrace]) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    let mut count = 0usize;
    for trace in traces {
        for alpha in &trace.gea_heads {
            let s = alpha.cols();
            count += 1;
            for i in 0..n {
                let row = alpha.row(i);
                if s <= 1 {
                    acc[i] += 1.0;
                    continue;
                }
                let h: f64 = row
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                acc[i] += 1.0 - h / (s as f64).ln();
            }
        }
    }
    if count == 0 {
        return vec![0.0; n];
    }
    acc.iter().map(|v| v / count as f64).collect()
}

fn dump_document(idx: usize, n: usize, traces: &[AttnTrace]) -> Value {
    let layers: Vec<Value> = traces
        .iter()
        .enumerate()
        .map(|(l, trace)| {
            json!({
                "layer": l,
                "gea": { "heads": trace.gea_heads.iter().map(matrix_rows).collect::<Vec<_>>() },
                "self": { "heads": trace.self_heads.iter().map(matrix_rows).collect::<Vec<_>>() },
            })
        })
        .collect();
    json!({
        "graph": idx,
        "layers": layers,
        "salience": salience(n, traces),
    })
}

/// Structural validation of a dump document against the published
/// schema: key layout, matrix shapes, row-stochastic attention rows and
/// salience scores in the unit interval.
pub fn validate_dump(doc: &Value, n: usize) -> Result<(), String> {
    let obj = doc.as_object().ok_or("document must be an object")?;
    for key in ["graph", "layers", "salience"] {
        if !obj.contains_key(key) {
            return Err(format!("missing key {key:?}"));
        }
    }
    obj["graph"].as_u64().ok_or("graph must be an index")?;
    let layers = obj["layers"].as_array().ok_or("layers must be an array")?;
    for layer in layers {
        let lobj = layer.as_object().ok_or("layer entry must be an object")?;
        lobj.get("layer")
            .and_then(Value::as_u64)
            .ok_or("layer index must be an integer")?;
        for (section, cols_expected) in [("gea", None), ("self", Some(n))] {
            let heads = lobj
                .get(section)
                .and_then(|s| s.get("heads"))
                .and_then(Value::as_array)
                .ok_or_else(|| format!("{section}.heads must be an array"))?;
            for head in heads {
                let rows = head.as_array().ok_or("head must be a matrix")?;
                if rows.len() != n {
                    return Err(format!(
                        "{section} head has {} rows, expected {n}",
                        rows.len()
                    ));
                }
                let width = rows
                    .first()
                    .and_then(Value::as_array)
                    .map(Vec::len)
                    .unwrap_or(0);
                if let Some(expected) = cols_expected {
                    if width != expected {
                        return Err(format!("{section} row width {width}, expected {expected}"));
                    }
                }
                for row in rows {
                    let row = row.as_array().ok_or("attention row must be an array")?;
                    if row.len() != width {
                        return Err("ragged attention matrix".into());
                    }
                    let mut sum = 0.0;
                    for v in row {
                        sum += v.as_f64().ok_or("attention entries must be numbers")?;
                    }
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(format!("attention row sums to {sum}, expected 1"));
                    }
                }
            }
        }
    }
    let salience = obj["salience"].as_array().ok_or("salience must be an array")?;
    if salience.len() != n {
        return Err(format!("salience length {}, expected {n}", salience.len()));
    }
    for v in salience {
        let v = v.as_f64().ok_or("salience entries must be numbers")?;
        if !(0.0..=1.0 + 1e-12).contains(&v) {
            return Err(format!("salience {v} outside [0, 1]"));
        }
    }
    Ok(())
}
