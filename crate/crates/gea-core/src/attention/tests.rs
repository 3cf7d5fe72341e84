use super::*;
use crate::tensor::grad_check_params;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

fn set_param(store: &mut ParamStore, id: ParamId, t: Tensor) {
    let dst = store.tensor_mut(id);
    assert_eq!(dst.shape(), t.shape());
    dst.data_mut().copy_from_slice(t.data());
}

/// Builds external units with explicitly chosen matrices.
fn units_with(
    store: &mut ParamStore,
    u_s: Tensor,
    u_nk: Tensor,
    u_nv: Tensor,
    toggles: UnitToggles,
) -> ExternalUnits {
    let (s, d) = u_nk.shape();
    let mut r = rng(0);
    let units = ExternalUnits::build(d, s, toggles, store, &mut r, "u").unwrap();
    set_param(store, units.u_s, u_s);
    set_param(store, units.u_nk, u_nk);
    set_param(store, units.u_nv, u_nv);
    units
}

// ---- double normalization ----

#[test]
fn double_normalize_single_node_is_uniform() {
    let mut t = Tape::new();
    let scores = t.leaf(Tensor::from_rows(&[vec![3.0, -1.0, 0.5, 2.0]]).unwrap());
    let a = double_normalize(&mut t, scores, &[0]).unwrap();
    assert_close(t.value(a).data(), &[0.25; 4], 1e-12);
}

#[test]
fn double_normalize_all_zero_scores() {
    let mut t = Tape::new();
    let scores = t.leaf(Tensor::zeros(2, 2));
    let a = double_normalize(&mut t, scores, &[0, 0]).unwrap();
    assert_close(t.value(a).data(), &[0.5, 0.5, 0.5, 0.5], 1e-12);
}

#[test]
fn double_normalize_hand_arithmetic() {
    // Stage 1 columns: [0.5, 0.5] and [0.75, 0.25];
    // stage 2 rows: [0.4, 0.6] and [2/3, 1/3].
    let mut t = Tape::new();
    let scores = t.leaf(Tensor::from_rows(&[vec![0.0, 3.0_f64.ln()], vec![0.0, 0.0]]).unwrap());
    let a = double_normalize(&mut t, scores, &[0, 0]).unwrap();
    assert_close(
        t.value(a).data(),
        &[0.4, 0.6, 2.0 / 3.0, 1.0 / 3.0],
        1e-9,
    );
}

#[test]
fn double_normalize_rows_sum_to_one_over_random_instances() {
    let mut r = rng(6);
    for case in 0..200 {
        let n = 1 + r.random_range(0..6);
        let s = 1 + r.random_range(0..5);
        let scores = if case % 7 == 0 {
            Tensor::zeros(n, s)
        } else {
            Tensor::randn(n, s, &mut r)
        };
        let seg: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let mut t = Tape::new();
        let sv = t.leaf(scores);
        let stage1 = t.segment_col_softmax(sv, &seg).unwrap();
        // Stage-1 columns sum to 1 within each segment.
        let v1 = t.value(stage1).clone();
        let mut lo = 0;
        while lo < n {
            let hi = (lo..n).take_while(|&i| seg[i] == seg[lo]).count() + lo;
            for j in 0..s {
                let sum: f64 = (lo..hi).map(|i| v1.get(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            lo = hi;
        }
        let a = double_normalize(&mut t, sv, &seg).unwrap();
        for i in 0..n {
            let sum: f64 = t.value(a).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

// ---- single-head GEA ----

/// Straight-line oracle: same math, plain loops, no tape.
fn gea_oracle(
    x: &Tensor,
    u_s: Option<&Tensor>,
    u_k: &Tensor,
    u_v: &Tensor,
    segments: &[usize],
) -> Tensor {
    let (n, d) = x.shape();
    let s_count = u_k.rows();
    let mut z = x.clone();
    if let Some(us) = u_s {
        z = Tensor::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += x.get(i, l) * us.get(l, j);
                }
                z.set(i, j, acc);
            }
        }
    }
    let mut scores = Tensor::zeros(n, s_count);
    for i in 0..n {
        for u in 0..s_count {
            let mut acc = 0.0;
            for l in 0..d {
                acc += z.get(i, l) * u_k.get(u, l);
            }
            scores.set(i, u, acc);
        }
    }
    let mut alpha = Tensor::zeros(n, s_count);
    let mut lo = 0;
    while lo < n {
        let hi = (lo..n).take_while(|&i| segments[i] == segments[lo]).count() + lo;
        for u in 0..s_count {
            let m = (lo..hi).map(|i| scores.get(i, u)).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (lo..hi).map(|i| (scores.get(i, u) - m).exp()).sum();
            for i in lo..hi {
                alpha.set(i, u, (scores.get(i, u) - m).exp() / total);
            }
        }
        lo = hi;
    }
    for i in 0..n {
        let denom: f64 = alpha.row(i).iter().sum::<f64>() + DOUBLE_NORM_EPS;
        for u in 0..s_count {
            alpha.set(i, u, alpha.get(i, u) / denom);
        }
    }
    let mut out = Tensor::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let mut acc = 0.0;
            for u in 0..s_count {
                acc += alpha.get(i, u) * u_v.get(u, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

#[test]
fn gea_single_node_receives_mean_value_row() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let (d, s) = (3, 4);
    let u_v = Tensor::randn(s, d, &mut r);
    let units = units_with(
        &mut store,
        Tensor::eye(d),
        Tensor::randn(s, d, &mut r),
        u_v.clone(),
        UnitToggles::default(),
    );
    let mut t = Tape::new();
    let x = t.leaf(Tensor::randn(1, d, &mut r));
    let out = gea_forward(&mut t, &store, x, &units, UnitStream::Node, &[0]).unwrap();
    let expect: Vec<f64> = (0..d)
        .map(|j| (0..s).map(|u| u_v.get(u, j)).sum::<f64>() / s as f64)
        .collect();
    assert_close(t.value(out).data(), &expect, 1e-9);
}

#[test]
fn gea_zero_keys_give_uniform_attention() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let (n, d, s) = (5, 3, 4);
    let u_v = Tensor::randn(s, d, &mut r);
    let units = units_with(
        &mut store,
        Tensor::eye(d),
        Tensor::zeros(s, d),
        u_v.clone(),
        UnitToggles::default(),
    );
    let mut t = Tape::new();
    let x = t.leaf(Tensor::randn(n, d, &mut r));
    let out = gea_forward(&mut t, &store, x, &units, UnitStream::Node, &[0; 5]).unwrap();
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..s).map(|u| u_v.get(u, j)).sum::<f64>() / s as f64)
        .collect();
    for i in 0..n {
        assert_close(t.value(out).row(i), &mean, 1e-9);
    }
}

#[test]
fn gea_matches_straight_line_oracle() {
    let mut r = rng(3);
    for seed in 0..10 {
        let mut rr = rng(100 + seed);
        let (n, d, s) = (4, 2, 3);
        let x = Tensor::randn(n, d, &mut rr);
        let u_s = Tensor::randn(d, d, &mut rr);
        let u_k = Tensor::randn(s, d, &mut rr);
        let u_v = Tensor::randn(s, d, &mut rr);
        let segments = [0, 0, 1, 1];

        let mut store = ParamStore::new();
        let units = units_with(
            &mut store,
            u_s.clone(),
            u_k.clone(),
            u_v.clone(),
            UnitToggles::default(),
        );
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let out = gea_forward(&mut t, &store, xv, &units, UnitStream::Node, &segments).unwrap();
        let oracle = gea_oracle(&x, Some(&u_s), &u_k, &u_v, &segments);
        assert_close(t.value(out).data(), oracle.data(), 1e-12);

        // Shared unit disabled: identity transform.
        let mut store2 = ParamStore::new();
        let toggles = UnitToggles {
            use_shared_unit: false,
            ..Default::default()
        };
        let units2 = units_with(&mut store2, u_s.clone(), u_k.clone(), u_v.clone(), toggles);
        let mut t2 = Tape::new();
        let xv2 = t2.leaf(x.clone());
        let out2 = gea_forward(&mut t2, &store2, xv2, &units2, UnitStream::Node, &segments).unwrap();
        let oracle2 = gea_oracle(&x, None, &u_k, &u_v, &segments);
        assert_close(t2.value(out2).data(), oracle2.data(), 1e-12);
    }
    let _ = &mut r;
}

#[test]
fn gea_flops_scale_linearly_in_nodes() {
    let mut r = rng(4);
    let (d, s) = (8, 6);
    let mut store = ParamStore::new();
    let units = units_with(
        &mut store,
        Tensor::randn(d, d, &mut r),
        Tensor::randn(s, d, &mut r),
        Tensor::randn(s, d, &mut r),
        UnitToggles::default(),
    );
    let flops_at = |n: usize| {
        let mut rr = rng(n as u64);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::randn(n, d, &mut rr));
        gea_forward(&mut t, &store, x, &units, UnitStream::Node, &vec![0; n]).unwrap();
        t.flops()
    };
    let (f1, f2) = (flops_at(64), flops_at(128));
    let ratio = f2 as f64 / f1 as f64;
    assert!((1.9..=2.1).contains(&ratio), "flop ratio {ratio}");
}

// ---- multi-head GEA ----

#[test]
fn multi_head_one_head_identity_wo_reduces_to_gea() {
    let mut r = rng(7);
    let (n, d, s) = (5, 4, 3);
    let mut store = ParamStore::new();
    let units = units_with(
        &mut store,
        Tensor::randn(d, d, &mut r),
        Tensor::randn(s, d, &mut r),
        Tensor::randn(s, d, &mut r),
        UnitToggles::default(),
    );
    let w_o = store.add("w_o", Tensor::eye(d)).unwrap();
    let x = Tensor::randn(n, d, &mut r);
    let seg = vec![0; n];

    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let multi = multi_head_gea(
        &mut t, &store, xv, &units, UnitStream::Node, 1, w_o, &seg, None,
    )
    .unwrap();
    let single = gea_forward(&mut t, &store, xv, &units, UnitStream::Node, &seg).unwrap();
    let (mv, sv) = (t.value(multi).data(), t.value(single).data());
    assert!(mv.iter().zip(sv).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn multi_head_two_heads_match_blockwise_oracle() {
    let mut r = rng(8);
    let (n, d, s, heads) = (4, 6, 3, 2);
    let dh = d / heads;
    let x = Tensor::randn(n, d, &mut r);
    let u_s = Tensor::randn(d, d, &mut r);
    let u_k = Tensor::randn(s, d, &mut r);
    let u_v = Tensor::randn(s, d, &mut r);
    let seg = [0, 0, 0, 1];

    let mut store = ParamStore::new();
    let units = units_with(&mut store, u_s.clone(), u_k.clone(), u_v.clone(), UnitToggles::default());
    let w_o = store.add("w_o", Tensor::eye(d)).unwrap();
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let multi = multi_head_gea(
        &mut t, &store, xv, &units, UnitStream::Node, heads, w_o, &seg, None,
    )
    .unwrap();

    // Oracle: full-width shared transform, then per-head slices through
    // the straight-line path, concatenated.
    let z = {
        let mut z = Tensor::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += x.get(i, l) * u_s.get(l, j);
                }
                z.set(i, j, acc);
            }
        }
        z
    };
    let slice = |t: &Tensor, lo: usize, hi: usize| {
        let mut out = Tensor::zeros(t.rows(), hi - lo);
        for i in 0..t.rows() {
            for j in lo..hi {
                out.set(i, j - lo, t.get(i, j));
            }
        }
        out
    };
    let mut expect = Tensor::zeros(n, d);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let part = gea_oracle(
            &slice(&z, lo, hi),
            None,
            &slice(&u_k, lo, hi),
            &slice(&u_v, lo, hi),
            &seg,
        );
        for i in 0..n {
            for j in lo..hi {
                expect.set(i, j, part.get(i, j - lo));
            }
        }
    }
    assert_close(t.value(multi).data(), expect.data(), 1e-12);
}

#[test]
fn multi_head_accepts_pattern_scale_hyperparameters() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let block = GEANetBlock::build(64, 16, 4, UnitToggles::default(), &mut store, &mut r, "g")
        .unwrap();
    let mut t = Tape::new();
    let x = t.leaf(Tensor::randn(10, 64, &mut r));
    let e = t.leaf(Tensor::randn(14, 64, &mut r));
    let (xg, eg) = block
        .forward(&mut t, &store, x, e, &vec![0; 10], &vec![0; 14], None)
        .unwrap();
    assert_eq!(t.value(xg).shape(), (10, 64));
    assert_eq!(t.value(eg).shape(), (14, 64));
}

#[test]
fn multi_head_rejects_indivisible_heads() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let err = GEANetBlock::build(6, 3, 4, UnitToggles::default(), &mut store, &mut r, "g")
        .unwrap_err();
    assert!(matches!(err, LayerError::HeadDivisibility { dim: 6, heads: 4 }));
}

// ---- GEANet block ----

#[test]
fn geanet_zero_values_id_wo_is_residual_identity() {
    let mut r = rng(11);
    let (d, s) = (4, 3);
    let mut store = ParamStore::new();
    let block = GEANetBlock::build(d, s, 2, UnitToggles::default(), &mut store, &mut r, "g")
        .unwrap();
    set_param(&mut store, block.units.u_nv, Tensor::zeros(s, d));
    set_param(&mut store, block.units.u_ev, Tensor::zeros(s, d));

    let x = Tensor::randn(3, d, &mut r);
    let e = Tensor::randn(4, d, &mut r);
    let mut t = Tape::new();
    let (xv, ev) = (t.leaf(x.clone()), t.leaf(e.clone()));
    let (xg, eg) = block
        .forward(&mut t, &store, xv, ev, &[0, 0, 0], &[0; 4], None)
        .unwrap();
    assert_eq!(t.value(xg).data(), x.data());
    assert_eq!(t.value(eg).data(), e.data());
}

#[test]
fn geanet_disabled_edge_stream_is_bit_exact_passthrough() {
    let mut r = rng(12);
    let toggles = UnitToggles {
        use_edge_units: false,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let block = GEANetBlock::build(4, 3, 2, toggles, &mut store, &mut r, "g").unwrap();
    let e = Tensor::randn(5, 4, &mut r);
    let mut t = Tape::new();
    let xv = t.leaf(Tensor::randn(3, 4, &mut r));
    let ev = t.leaf(e.clone());
    let (_, eg) = block
        .forward(&mut t, &store, xv, ev, &[0; 3], &[0; 5], None)
        .unwrap();
    assert!(t
        .value(eg)
        .data()
        .iter()
        .zip(e.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn geanet_matches_compositional_oracle() {
    let mut r = rng(13);
    let (d, s, heads) = (4, 3, 2);
    let mut store = ParamStore::new();
    let block = GEANetBlock::build(d, s, heads, UnitToggles::default(), &mut store, &mut r, "g")
        .unwrap();
    let x = Tensor::randn(4, d, &mut r);
    let e = Tensor::randn(6, d, &mut r);
    let (seg_n, seg_m) = ([0, 0, 1, 1], [0, 0, 0, 1, 1, 1]);

    let mut t = Tape::new();
    let (xv, ev) = (t.leaf(x.clone()), t.leaf(e.clone()));
    let (xg, eg) = block
        .forward(&mut t, &store, xv, ev, &seg_n, &seg_m, None)
        .unwrap();

    // Oracle: residual around the multi-head op, computed separately.
    let mut t2 = Tape::new();
    let xv2 = t2.leaf(x.clone());
    let ev2 = t2.leaf(e.clone());
    let mx = multi_head_gea(
        &mut t2, &store, xv2, &block.units, UnitStream::Node, heads, block.w_o_node, &seg_n, None,
    )
    .unwrap();
    let me = multi_head_gea(
        &mut t2, &store, ev2, &block.units, UnitStream::Edge, heads, block.w_o_edge, &seg_m, None,
    )
    .unwrap();
    let ex = t2.add(xv2, mx).unwrap();
    let ee = t2.add(ev2, me).unwrap();
    assert_close(t.value(xg).data(), t2.value(ex).data(), 1e-12);
    assert_close(t.value(eg).data(), t2.value(ee).data(), 1e-12);
}

// ---- self-attention ----

#[test]
fn self_attention_zero_queries_give_within_graph_mean() {
    let mut r = rng(14);
    let (n, d) = (6, 4);
    let mut store = ParamStore::new();
    let layer = SelfAttentionLayer::build(d, 2, &mut store, &mut r, "sa").unwrap();
    set_param(&mut store, layer.w_q, Tensor::zeros(d, d));
    set_param(&mut store, layer.w_k, Tensor::zeros(d, d));
    set_param(&mut store, layer.w_v, Tensor::eye(d));
    set_param(&mut store, layer.w_o, Tensor::eye(d));

    let x = Tensor::randn(n, d, &mut r);
    let seg = [0, 0, 0, 1, 1, 1];
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let out = layer.forward(&mut t, &store, xv, &seg, None).unwrap();
    for i in 0..n {
        let (lo, hi) = if i < 3 { (0, 3) } else { (3, 6) };
        let mean: Vec<f64> = (0..d)
            .map(|j| (lo..hi).map(|k| x.get(k, j)).sum::<f64>() / (hi - lo) as f64)
            .collect();
        assert_close(t.value(out).row(i), &mean, 1e-12);
    }
}

#[test]
fn self_attention_single_node_graph() {
    let mut r = rng(15);
    let d = 4;
    let mut store = ParamStore::new();
    let layer = SelfAttentionLayer::build(d, 2, &mut store, &mut r, "sa").unwrap();
    let x = Tensor::randn(1, d, &mut r);
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let out = layer.forward(&mut t, &store, xv, &[0], None).unwrap();

    // Attention over one node is weight 1, so out = (X W_V) W_O.
    let mut t2 = Tape::new();
    let xv2 = t2.leaf(x);
    let wv = t2.param(&store, layer.w_v);
    let v = t2.matmul(xv2, wv).unwrap();
    let wo = t2.param(&store, layer.w_o);
    let expect = t2.matmul(v, wo).unwrap();
    assert_close(t.value(out).data(), t2.value(expect).data(), 1e-12);
}

#[test]
fn attention_is_batch_independent() {
    // Graphs in a batch produce the same rows as when run alone.
    let mut r = rng(16);
    let (d, s, heads) = (6, 4, 2);
    let mut store = ParamStore::new();
    let block = GEANetBlock::build(d, s, heads, UnitToggles::default(), &mut store, &mut r, "g")
        .unwrap();
    let sa = SelfAttentionLayer::build(d, heads, &mut store, &mut r, "sa").unwrap();

    let x1 = Tensor::randn(3, d, &mut r);
    let x2 = Tensor::randn(4, d, &mut r);
    let mut xb = Tensor::zeros(7, d);
    for i in 0..3 {
        for j in 0..d {
            xb.set(i, j, x1.get(i, j));
        }
    }
    for i in 0..4 {
        for j in 0..d {
            xb.set(i + 3, j, x2.get(i, j));
        }
    }
    let seg_b = [0, 0, 0, 1, 1, 1, 1];

    let run_gea = |x: &Tensor, seg: &[usize]| {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let out = multi_head_gea(
            &mut t, &store, xv, &block.units, UnitStream::Node, heads, block.w_o_node, seg, None,
        )
        .unwrap();
        t.value(out).data().to_vec()
    };
    let batched = run_gea(&xb, &seg_b);
    let alone1 = run_gea(&x1, &[0, 0, 0]);
    let alone2 = run_gea(&x2, &[0, 0, 0, 0]);
    assert_close(&batched[..3 * d], &alone1, 1e-12);
    assert_close(&batched[3 * d..], &alone2, 1e-12);

    let run_sa = |x: &Tensor, seg: &[usize]| {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let out = sa.forward(&mut t, &store, xv, seg, None).unwrap();
        t.value(out).data().to_vec()
    };
    let batched = run_sa(&xb, &seg_b);
    let alone1 = run_sa(&x1, &[0, 0, 0]);
    let alone2 = run_sa(&x2, &[0, 0, 0, 0]);
    assert_close(&batched[..3 * d], &alone1, 1e-12);
    assert_close(&batched[3 * d..], &alone2, 1e-12);
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut r = rng(17);
    let (n, d, s, heads) = (6, 4, 3, 2);
    let mut store = ParamStore::new();
    let block = GEANetBlock::build(d, s, heads, UnitToggles::default(), &mut store, &mut r, "g")
        .unwrap();
    let sa = SelfAttentionLayer::build(d, heads, &mut store, &mut r, "sa").unwrap();
    let x = Tensor::randn(n, d, &mut r);
    let seg = vec![0; n];

    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..n).collect();
        crate::util::shuffle(&mut perm, &mut r);
        let mut px = Tensor::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                px.set(perm[i], j, x.get(i, j));
            }
        }
        let run = |input: &Tensor| {
            let mut t = Tape::new();
            let xv = t.leaf(input.clone());
            let g = multi_head_gea(
                &mut t, &store, xv, &block.units, UnitStream::Node, heads, block.w_o_node, &seg,
                None,
            )
            .unwrap();
            let a = sa.forward(&mut t, &store, xv, &seg, None).unwrap();
            (t.value(g).clone(), t.value(a).clone())
        };
        let (g0, a0) = run(&x);
        let (g1, a1) = run(&px);
        for i in 0..n {
            for j in 0..d {
                assert!((g1.get(perm[i], j) - g0.get(i, j)).abs() < 1e-10);
                assert!((a1.get(perm[i], j) - a0.get(i, j)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn geanet_and_self_attention_pass_grad_check() {
    let mut r = rng(18);
    let (d, s, heads) = (4, 3, 2);
    let mut store = ParamStore::new();
    let block = GEANetBlock::build(d, s, heads, UnitToggles::default(), &mut store, &mut r, "g")
        .unwrap();
    let sa = SelfAttentionLayer::build(d, heads, &mut store, &mut r, "sa").unwrap();

    let x = Tensor::randn(4, d, &mut r);
    let e = Tensor::randn(5, d, &mut r);
    let rx = Tensor::randn(4, d, &mut r);
    let re = Tensor::randn(5, d, &mut r);
    let seg_n = [0, 0, 1, 1];
    let seg_m = [0, 0, 0, 1, 1];

    let report = grad_check_params(
        |t, store| {
            let xv = t.constant(x.clone());
            let ev = t.constant(e.clone());
            let (xg, eg) = block
                .forward(t, store, xv, ev, &seg_n, &seg_m, None)
                .map_err(|e| match e {
                    LayerError::Tensor(te) => te,
                    other => panic!("unexpected {other}"),
                })?;
            let sx = sa.forward(t, store, xg, &seg_n, None).map_err(|e| match e {
                LayerError::Tensor(te) => te,
                other => panic!("unexpected {other}"),
            })?;
            let rxv = t.constant(rx.clone());
            let rev = t.constant(re.clone());
            let px = t.mul(sx, rxv)?;
            let pe = t.mul(eg, rev)?;
            let lx = t.sum_all(px);
            let le = t.sum_all(pe);
            Ok(t.add(lx, le)?)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    assert!(
        report.max_rel_err < 1e-4,
        "max rel err {:e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}
