//! End-to-end gradient verification: every op and layer, plus the full
//! model, checked against central finite differences.

use crate::attention::{GEANetBlock, LayerError, SelfAttentionLayer, UnitToggles};
use crate::graph::{batch, generate_tree_neighbour_match, DatasetInfo};
use crate::model::{GEAETModel, ModelConfig, ModelError, ModelInput};
use crate::mpnn::{MpnnKind, MpnnLayer};
use crate::params::ParamStore;
use crate::posenc::PosEncConfig;
use crate::tensor::{grad_check, grad_check_params, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

/// One verified component of the suite.
#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub name: String,
    pub max_rel_err: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tensor_err(e: LayerError) -> TensorError {
    match e {
        LayerError::Tensor(te) => te,
        other => panic!("layer construction failed inside gradcheck: {other}"),
    }
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(te) => te,
        ModelError::Layer(inner) => tensor_err(inner),
        other => panic!("model failed inside gradcheck: {other}"),
    }
}

fn op_checks(out: &mut Vec<ComponentCheck>) -> Result<(), TensorError> {
    let mut r = rng(101);
    let x = Tensor::randn(4, 6, &mut r);
    let w = Tensor::randn(6, 4, &mut r);
    let sel = Tensor::randn(4, 6, &mut r);
    let seg = [0usize, 0, 1, 1];

    let mut push = |name: &str, err: f64| {
        out.push(ComponentCheck {
            name: name.to_string(),
            max_rel_err: err,
        })
    };

    push("op.matmul", {
        let w = w.clone();
        grad_check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            H,
        )?
    });
    push("op.row_softmax", {
        let sel = sel.clone();
        grad_check(
            move |t, x| {
                let y = t.row_softmax(x);
                let s = t.constant(sel.clone());
                let p = t.mul(y, s)?;
                Ok(t.sum_all(p))
            },
            &x,
            H,
        )?
    });
    push("op.col_softmax", {
        let sel = sel.clone();
        grad_check(
            move |t, x| {
                let y = t.col_softmax(x);
                let s = t.constant(sel.clone());
                let p = t.mul(y, s)?;
                Ok(t.sum_all(p))
            },
            &x,
            H,
        )?
    });
    push("op.segment_softmaxes", {
        let sel = sel.clone();
        let seg = seg.to_vec();
        grad_check(
            move |t, x| {
                let c = t.segment_col_softmax(x, &seg)?;
                let sq = Tensor::randn(4, 4, &mut rng(7));
                let xs = t.constant(sq);
                let rs = t.segment_row_softmax(xs, &seg)?;
                let mixed = t.matmul(rs, c)?;
                let s = t.constant(sel.clone());
                let p = t.mul(mixed, s)?;
                Ok(t.sum_all(p))
            },
            &x,
            H,
        )?
    });
    push("op.row_l1_normalize", {
        let sel = sel.clone();
        let mut pos = x.clone();
        for v in pos.data_mut() {
            *v = v.abs() + 0.2;
        }
        grad_check(
            move |t, x| {
                let y = t.row_l1_normalize(x, 1e-12);
                let s = t.constant(sel.clone());
                let p = t.mul(y, s)?;
                Ok(t.sum_all(p))
            },
            &pos,
            H,
        )?
    });
    push("op.elementwise", {
        let sel = sel.clone();
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            if v.abs() < 0.1 {
                *v = 0.1 * v.signum().max(0.5);
            }
        }
        grad_check(
            move |t, x| {
                let s = t.constant(sel.clone());
                let a = t.add(x, s)?;
                let m = t.mul(a, x)?;
                let d = t.sub(m, x)?;
                let rl = t.relu(d);
                let sg = t.sigmoid(rl);
                let sc = t.scale(sg, 1.5);
                Ok(t.sum_all(sc))
            },
            &shifted,
            H,
        )?
    });
    push("op.gather_scatter", {
        grad_check(
            |t, x| {
                let g = t.gather_rows(x, &[3, 0, 1, 1, 2])?;
                let s = t.scatter_add_rows(g, &[0, 2, 1, 1, 3], 4)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum_all(sq))
            },
            &x,
            H,
        )?
    });
    push("op.concat_slice", {
        grad_check(
            |t, x| {
                let a = t.slice_cols(x, 0, 3)?;
                let b = t.slice_cols(x, 3, 6)?;
                let c = t.concat_cols(&[b, a])?;
                let sq = t.mul(c, c)?;
                Ok(t.sum_all(sq))
            },
            &x,
            H,
        )?
    });
    push("op.layer_norm", {
        let mut r2 = rng(102);
        let gamma = Tensor::randn(1, 6, &mut r2);
        let beta = Tensor::randn(1, 6, &mut r2);
        grad_check(
            move |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(x, g, b, 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            H,
        )?
    });
    push("op.losses", {
        let labels = vec![1usize, 0, 3, 2];
        let target = Tensor::randn(4, 6, &mut rng(103));
        grad_check(
            move |t, x| {
                let ce = t.cross_entropy(x, &labels)?;
                let tv = t.constant(target.clone());
                let shifted = t.add_scalar(x, 0.75);
                let l1 = t.l1_loss(shifted, tv)?;
                Ok(t.add(ce, l1)?)
            },
            &x,
            H,
        )?
    });
    Ok(())
}

fn gea_toggle_checks(out: &mut Vec<ComponentCheck>) -> Result<(), TensorError> {
    let (d, s, n, m) = (4usize, 3usize, 4usize, 5usize);
    let seg_n = [0usize, 0, 1, 1];
    let seg_m = [0usize, 0, 0, 1, 1];
    for mask in 0..8u8 {
        let toggles = UnitToggles {
            use_node_units: mask & 1 != 0,
            use_edge_units: mask & 2 != 0,
            use_shared_unit: mask & 4 != 0,
        };
        let mut r = rng(200 + mask as u64);
        let mut store = ParamStore::new();
        let block = GEANetBlock::build(d, s, 2, toggles, &mut store, &mut r, "gea")
            .map_err(tensor_err)?;
        let x = Tensor::randn(n, d, &mut r);
        let e = Tensor::randn(m, d, &mut r);
        let rx = Tensor::randn(n, d, &mut r);
        let re = Tensor::randn(m, d, &mut r);
        let report = grad_check_params(
            |t, store| {
                let xv = t.constant(x.clone());
                let ev = t.constant(e.clone());
                let (xg, eg) = block
                    .forward(t, store, xv, ev, &seg_n, &seg_m, None)
                    .map_err(tensor_err)?;
                let rxv = t.constant(rx.clone());
                let rev = t.constant(re.clone());
                let px = t.mul(xg, rxv)?;
                let pe = t.mul(eg, rev)?;
                let lx = t.sum_all(px);
                let le = t.sum_all(pe);
                Ok(t.add(lx, le)?)
            },
            &mut store,
            H,
        )?;
        out.push(ComponentCheck {
            name: format!(
                "layer.geanet[node={},edge={},shared={}]",
                toggles.use_node_units as u8,
                toggles.use_edge_units as u8,
                toggles.use_shared_unit as u8
            ),
            max_rel_err: report.max_rel_err,
        });
    }
    Ok(())
}

fn layer_checks(out: &mut Vec<ComponentCheck>) -> Result<(), TensorError> {
    let (n, d) = (5usize, 4usize);
    let seg = [0usize, 0, 0, 1, 1];
    // Self-attention.
    {
        let mut r = rng(300);
        let mut store = ParamStore::new();
        let sa = SelfAttentionLayer::build(d, 2, &mut store, &mut r, "sa").map_err(tensor_err)?;
        let x = Tensor::randn(n, d, &mut r);
        let sel = Tensor::randn(n, d, &mut r);
        let report = grad_check_params(
            |t, store| {
                let xv = t.constant(x.clone());
                let y = sa.forward(t, store, xv, &seg, None).map_err(tensor_err)?;
                let s = t.constant(sel.clone());
                let p = t.mul(y, s)?;
                Ok(t.sum_all(p))
            },
            &mut store,
            H,
        )?;
        out.push(ComponentCheck {
            name: "layer.self_attention".into(),
            max_rel_err: report.max_rel_err,
        });
    }
    // Single- and multi-head external attention.
    for (name, heads) in [("layer.gea_single_head", 1usize), ("layer.gea_multi_head", 2)] {
        let mut r = rng(301 + heads as u64);
        let mut store = ParamStore::new();
        let block = GEANetBlock::build(d, 3, heads, UnitToggles::default(), &mut store, &mut r, "g")
            .map_err(tensor_err)?;
        let x = Tensor::randn(n, d, &mut r);
        let sel = Tensor::randn(n, d, &mut r);
        let report = grad_check_params(
            |t, store| {
                let xv = t.constant(x.clone());
                let y = crate::attention::multi_head_gea(
                    t,
                    store,
                    xv,
                    &block.units,
                    crate::attention::UnitStream::Node,
                    heads,
                    block.w_o_node,
                    &seg,
                    None,
                )
                .map_err(tensor_err)?;
                let s = t.constant(sel.clone());
                let p = t.mul(y, s)?;
                Ok(t.sum_all(p))
            },
            &mut store,
            H,
        )?;
        out.push(ComponentCheck {
            name: name.into(),
            max_rel_err: report.max_rel_err,
        });
    }
    // Message passing layers.
    for (name, kind) in [
        ("layer.gcn", MpnnKind::Gcn),
        ("layer.gatedgcn", MpnnKind::GatedGcn),
        ("layer.gine", MpnnKind::Gine),
    ] {
        let mut r = rng(310);
        let mut store = ParamStore::new();
        let layer = MpnnLayer::build(kind, d, &mut store, &mut r, "m").map_err(tensor_err)?;
        let src = [0usize, 1, 1, 2, 3, 4];
        let dst = [1usize, 0, 2, 1, 4, 3];
        let x = Tensor::randn(n, d, &mut r);
        let e = Tensor::randn(src.len(), d, &mut r);
        let rx = Tensor::randn(n, d, &mut r);
        let re = Tensor::randn(src.len(), d, &mut r);
        let report = grad_check_params(
            |t, store| {
                let xv = t.constant(x.clone());
                let ev = t.constant(e.clone());
                let (x_out, e_out) = layer
                    .forward(t, store, xv, ev, &src, &dst, n)
                    .map_err(tensor_err)?;
                let rxv = t.constant(rx.clone());
                let rev = t.constant(re.clone());
                let px = t.mul(x_out, rxv)?;
                let pe = t.mul(e_out, rev)?;
                let lx = t.sum_all(px);
                let le = t.sum_all(pe);
                Ok(t.add(lx, le)?)
            },
            &mut store,
            H,
        )?;
        out.push(ComponentCheck {
            name: name.into(),
            max_rel_err: report.max_rel_err,
        });
    }
    Ok(())
}

fn small_model(seed: u64, layers: usize) -> (GEAETModel, ParamStore, ModelInput) {
    let split = generate_tree_neighbour_match(2, 2, seed, [1.0, 0.0, 0.0]).expect("tree data");
    let info = DatasetInfo::from_split(&split).expect("info");
    let config = ModelConfig {
        hidden_dim: 8,
        layers,
        unit_size: 3,
        self_heads: 2,
        external_heads: 2,
        mpnn: Some(MpnnKind::GatedGcn),
        self_attention: true,
        geanet: true,
        use_node_units: true,
        use_edge_units: true,
        use_shared_unit: true,
        pe: PosEncConfig::none(),
        geanet_reads_mpnn_nodes: false,
    };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let model = GEAETModel::build(config, info.clone(), &mut store, &mut r).expect("model");
    let b = batch(&split.train).expect("batch");
    let input = ModelInput::from_batch(&b, &info, None).expect("input");
    (model, store, input)
}

fn model_checks(out: &mut Vec<ComponentCheck>) -> Result<(), TensorError> {
    // Embedding + FFN through a single layer, then the full stack.
    {
        let (model, mut store, input) = small_model(42, 1);
        let report = grad_check_params(
            |t, store| {
                let (x0, e0) = model.embedding.forward(t, store, &input).map_err(model_err)?;
                let sel = Tensor::randn(input.n, 8, &mut rng(9));
                let (x1, _) = model.layers[0]
                    .forward(t, store, x0, e0, &input, None)
                    .map_err(model_err)?;
                let s = t.constant(sel);
                let p = t.mul(x1, s)?;
                Ok(t.sum_all(p))
            },
            &mut store,
            H,
        )?;
        out.push(ComponentCheck {
            name: "layer.geaet_full(embedding+ffn)".into(),
            max_rel_err: report.max_rel_err,
        });
    }
    {
        let (model, mut store, input) = small_model(43, 2);
        let report = grad_check_params(
            |t, store| {
                let (loss, _) = model.loss(t, store, &input).map_err(model_err)?;
                Ok(loss)
            },
            &mut store,
            H,
        )?;
        out.push(ComponentCheck {
            name: "model.end_to_end".into(),
            max_rel_err: report.max_rel_err,
        });
    }
    Ok(())
}

/// A negative control: a hand-coded, deliberately wrong analytic
/// gradient checked through the same finite-difference machinery. Used
/// to verify that failures are detected and reported.
fn corrupted_relu_check() -> ComponentCheck {
    let mut r = rng(999);
    let mut x = Tensor::randn(3, 3, &mut r);
    for v in x.data_mut() {
        if v.abs() < 0.2 {
            *v = 0.2;
        }
    }
    let sel = Tensor::randn(3, 3, &mut r);
    // f(x) = sum(relu(x) .* sel); the true gradient is sel .* [x > 0],
    // the corrupted one scales it by 1.1.
    let eval = |probe: &Tensor| {
        probe
            .data()
            .iter()
            .zip(sel.data())
            .map(|(v, s)| v.max(0.0) * s)
            .sum::<f64>()
    };
    let mut max_err: f64 = 0.0;
    for i in 0..x.data().len() {
        let wrong_analytic = if x.data()[i] > 0.0 { 1.1 * sel.data()[i] } else { 0.0 };
        let orig = x.data()[i];
        x.data_mut()[i] = orig + H;
        let up = eval(&x);
        x.data_mut()[i] = orig - H;
        let down = eval(&x);
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let err = (wrong_analytic - numeric).abs()
            / 1.0_f64.max(wrong_analytic.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    ComponentCheck {
        name: "negative_control.corrupted_relu".into(),
        max_rel_err: max_err,
    }
}

/// Runs the finite-difference suite over every op, every layer kind
/// (including all external-unit toggle combinations) and the end-to-end
/// model. With `include_corrupted_fixture`, appends a deliberately wrong
/// backward that must fail.
pub fn gradcheck_suite(include_corrupted_fixture: bool) -> Result<Vec<ComponentCheck>, TensorError> {
    let mut checks = Vec::new();
    op_checks(&mut checks)?;
    gea_toggle_checks(&mut checks)?;
    layer_checks(&mut checks)?;
    model_checks(&mut checks)?;
    if include_corrupted_fixture {
        checks.push(corrupted_relu_check());
    }
    Ok(checks)
}
