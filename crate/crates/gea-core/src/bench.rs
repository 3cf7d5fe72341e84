//! Forward-cost scaling measurements over random sparse graphs.
//!
//! Counts multiply-adds (and wall time) for the external-attention block
//! alone and for the full model with and without self-attention, over a
//! range of node counts at fixed mean degree, then fits the growth
//! exponent by least squares on the log-log points.

use crate::attention::{GEANetBlock, UnitToggles};
use crate::graph::{batch, DatasetInfo, Features, Graph, Target, TaskKind};
use crate::model::{GEAETModel, ModelConfig, ModelInput};
use crate::mpnn::MpnnKind;
use crate::params::ParamStore;
use crate::posenc::PosEncConfig;
use crate::tensor::{Tape, Tensor};
use crate::train::TrainError;
use crate::util::loglog_slope;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_SIZES: [usize; 5] = [128, 256, 512, 1024, 2048];
pub const MEAN_DEGREE: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub arcs: usize,
    pub flops: u64,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSection {
    pub name: String,
    pub rows: Vec<BenchRow>,
    /// Fitted log-log slope of flops against node count.
    pub exponent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub sizes: Vec<usize>,
    pub mean_degree: usize,
    pub sections: Vec<BenchSection>,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for section in &self.sections {
            out.push_str(&format!(
                "{} (exponent {:.3})\n{:>8} {:>10} {:>14} {:>10}\n",
                section.name, section.exponent, "n", "arcs", "flops", "ms"
            ));
            for row in &section.rows {
                out.push_str(&format!(
                    "{:>8} {:>10} {:>14} {:>10.2}\n",
                    row.n, row.arcs, row.flops, row.millis
                ));
            }
            out.push('\n');
        }
        out
    }

    pub fn section(&self, name: &str) -> Option<&BenchSection> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Random connected-ish sparse graph with `MEAN_DEGREE * n / 2`
/// undirected edges and binary node features.
fn sparse_graph(n: usize, rng: &mut ChaCha8Rng) -> Graph {
    let undirected_target = MEAN_DEGREE * n / 2;
    let mut seen = std::collections::HashSet::new();
    // A ring keeps every node non-isolated.
    for i in 0..n {
        let j = (i + 1) % n;
        seen.insert((i.min(j), i.max(j)));
    }
    while seen.len() < undirected_target {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i != j {
            seen.insert((i.min(j), i.max(j)));
        }
    }
    let mut undirected: Vec<(usize, usize)> = seen.into_iter().collect();
    undirected.sort_unstable();
    let mut edges = Vec::with_capacity(2 * undirected.len());
    for &(i, j) in &undirected {
        edges.push((i, j));
        edges.push((j, i));
    }
    Graph {
        n,
        edges,
        node_feat: Features::Categorical {
            cols: 1,
            ids: (0..n).map(|_| rng.random_range(0..2)).collect(),
        },
        edge_feat: None,
        target: Target::NodeLabels(vec![0; n]),
        target_node: None,
    }
}

fn bench_info() -> DatasetInfo {
    DatasetInfo {
        task: TaskKind::NodeClassify,
        out_dim: 2,
        node_vocab: vec![2],
        node_dense_dim: 0,
        edge_vocab: vec![],
        edge_dense_dim: 0,
        has_edge_feat: false,
    }
}

fn bench_model_config(with_attention: bool) -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        layers: 2,
        unit_size: 8,
        self_heads: 2,
        external_heads: 2,
        mpnn: Some(MpnnKind::Gcn),
        self_attention: with_attention,
        geanet: true,
        use_node_units: true,
        use_edge_units: true,
        use_shared_unit: true,
        pe: PosEncConfig::none(),
        geanet_reads_mpnn_nodes: false,
    }
}

/// Runs the scaling measurement; one forward pass per size per section.
pub fn run_bench(sizes: &[usize], seed: u64) -> Result<BenchReport, TrainError> {
    let info = bench_info();
    let mut sections = Vec::new();

    // Section 1: the external attention block alone.
    {
        let dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = GEANetBlock::build(dim, 8, 2, UnitToggles::default(), &mut store, &mut rng, "g")
            .map_err(crate::model::ModelError::from)?;
        let mut rows = Vec::new();
        for &n in sizes {
            let g = sparse_graph(n, &mut rng);
            let m = g.m();
            let x = Tensor::randn(n, dim, &mut rng);
            let e = Tensor::randn(m, dim, &mut rng);
            let start = Instant::now();
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let ev = tape.leaf(e);
            block
                .forward(&mut tape, &store, xv, ev, &vec![0; n], &vec![0; m], None)
                .map_err(crate::model::ModelError::from)?;
            rows.push(BenchRow {
                n,
                arcs: m,
                flops: tape.flops(),
                millis: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.flops as f64)).collect();
        sections.push(BenchSection {
            name: "geanet".into(),
            exponent: loglog_slope(&pts),
            rows,
        });
    }

    // Sections 2 and 3: the full model without and with self-attention.
    for (name, with_attention) in [("geaet_no_attn", false), ("geaet_attn", true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut store = ParamStore::new();
        let model = GEAETModel::build(
            bench_model_config(with_attention),
            info.clone(),
            &mut store,
            &mut rng,
        )?;
        let mut rows = Vec::new();
        for &n in sizes {
            let g = sparse_graph(n, &mut rng);
            let b = batch(std::slice::from_ref(&g))?;
            let input = ModelInput::from_batch(&b, &info, None)?;
            let start = Instant::now();
            let mut tape = Tape::new();
            model.forward(&mut tape, &store, &input, None)?;
            rows.push(BenchRow {
                n,
                arcs: g.m(),
                flops: tape.flops(),
                millis: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.flops as f64)).collect();
        sections.push(BenchSection {
            name: name.into(),
            exponent: loglog_slope(&pts),
            rows,
        });
    }

    Ok(BenchReport {
        sizes: sizes.to_vec(),
        mean_degree: MEAN_DEGREE,
        sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_fits_expected_exponents() {
        // Reduced sizes keep the unit test fast; the acceptance suite
        // runs the full range.
        let report = run_bench(&[64, 128, 256, 512], 0).unwrap();
        let gea = report.section("geanet").unwrap();
        assert!(
            (0.9..=1.1).contains(&gea.exponent),
            "geanet exponent {}",
            gea.exponent
        );
        let no_attn = report.section("geaet_no_attn").unwrap();
        assert!(
            (0.9..=1.1).contains(&no_attn.exponent),
            "no-attn exponent {}",
            no_attn.exponent
        );
        let attn = report.section("geaet_attn").unwrap();
        assert!(
            attn.exponent > no_attn.exponent + 0.3,
            "attention exponent {} vs {}",
            attn.exponent,
            no_attn.exponent
        );
    }

    #[test]
    fn doubling_nodes_doubles_geanet_flops() {
        let report = run_bench(&[256, 512], 1).unwrap();
        let rows = &report.section("geanet").unwrap().rows;
        let ratio = rows[1].flops as f64 / rows[0].flops as f64;
        assert!((1.9..=2.1).contains(&ratio), "ratio {ratio}");
    }
}
