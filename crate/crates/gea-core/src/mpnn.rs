//! Message-passing layers: GCN, GatedGCN and GINE.
//!
//! All three aggregate over in-arcs; undirected graphs store both
//! orientations, so this equals neighborhood aggregation. GCN ignores
//! edge features (its classical form); GatedGCN updates them residually;
//! GINE consumes them in its messages.

use crate::attention::LayerError;
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const GATE_EPS: f64 = 1e-6;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpnnKind {
    Gcn,
    GatedGcn,
    Gine,
}

/// Symmetric-normalized graph convolution with implicit self-loops.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GcnLayer {
    pub fn build<R: Rng>(
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, LayerError> {
        Ok(Self {
            weight: store.add(format!("{prefix}.w"), glorot(dim, dim, rng))?,
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(1, dim))?,
        })
    }

    /// `x_i' = relu(W sum_{j in N(i) + i} x_j / sqrt((deg_i+1)(deg_j+1)) + b)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        src: &[usize],
        dst: &[usize],
        n: usize,
    ) -> Result<Var, LayerError> {
        let mut deg_hat = vec![1.0f64; n];
        for &d in dst {
            deg_hat[d] += 1.0;
        }
        let arc_coeff: Vec<f64> = src
            .iter()
            .zip(dst)
            .map(|(&s, &d)| 1.0 / (deg_hat[s] * deg_hat[d]).sqrt())
            .collect();
        let self_coeff: Vec<f64> = deg_hat.iter().map(|&d| 1.0 / d).collect();

        let msgs = tape.gather_rows(x, src)?;
        let weighted = tape.scale_rows(msgs, &arc_coeff)?;
        let from_neighbors = tape.scatter_add_rows(weighted, dst, n)?;
        let from_self = tape.scale_rows(x, &self_coeff)?;
        let agg = tape.add(from_neighbors, from_self)?;

        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(agg, w)?;
        let h = tape.add(h, b)?;
        Ok(tape.relu(h))
    }
}

/// Edge-gated graph convolution with residual node and edge updates.
#[derive(Debug, Clone)]
pub struct GatedGcnLayer {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub u: ParamId,
    pub v: ParamId,
    pub node_ln_gamma: ParamId,
    pub node_ln_beta: ParamId,
    pub edge_ln_gamma: ParamId,
    pub edge_ln_beta: ParamId,
}

impl GatedGcnLayer {
    pub fn build<R: Rng>(
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, LayerError> {
        Ok(Self {
            a: store.add(format!("{prefix}.a"), glorot(dim, dim, rng))?,
            b: store.add(format!("{prefix}.b"), glorot(dim, dim, rng))?,
            c: store.add(format!("{prefix}.c"), glorot(dim, dim, rng))?,
            u: store.add(format!("{prefix}.u"), glorot(dim, dim, rng))?,
            v: store.add(format!("{prefix}.v"), glorot(dim, dim, rng))?,
            node_ln_gamma: store.add(format!("{prefix}.ln_n.g"), Tensor::filled(1, dim, 1.0))?,
            node_ln_beta: store.add(format!("{prefix}.ln_n.b"), Tensor::zeros(1, dim))?,
            edge_ln_gamma: store.add(format!("{prefix}.ln_e.g"), Tensor::filled(1, dim, 1.0))?,
            edge_ln_beta: store.add(format!("{prefix}.ln_e.b"), Tensor::zeros(1, dim))?,
        })
    }

    /// Gate logits per arc, sigmoid-normalized over each destination's
    /// in-arcs; nodes and edges both update through a residual.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        e: Var,
        src: &[usize],
        dst: &[usize],
        n: usize,
    ) -> Result<(Var, Var), LayerError> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let c = tape.param(store, self.c);
        let xa = tape.matmul(x, a)?;
        let xb = tape.matmul(x, b)?;
        let ec = tape.matmul(e, c)?;
        let xa_dst = tape.gather_rows(xa, dst)?;
        let xb_src = tape.gather_rows(xb, src)?;
        let pre = tape.add(xa_dst, xb_src)?;
        let e_hat = tape.add(pre, ec)?;

        let eg = tape.param(store, self.edge_ln_gamma);
        let eb = tape.param(store, self.edge_ln_beta);
        let e_norm = tape.layer_norm(e_hat, eg, eb, LN_EPS)?;
        let e_act = tape.relu(e_norm);
        let e_out = tape.add(e, e_act)?;

        let gates_raw = tape.sigmoid(e_hat);
        let gate_sums = tape.scatter_add_rows(gates_raw, dst, n)?;
        let sums_per_arc = tape.gather_rows(gate_sums, dst)?;
        let denom = tape.add_scalar(sums_per_arc, GATE_EPS);
        let gates = tape.div(gates_raw, denom)?;

        let v = tape.param(store, self.v);
        let vx = tape.matmul(x, v)?;
        let vx_src = tape.gather_rows(vx, src)?;
        let msgs = tape.mul(gates, vx_src)?;
        let agg = tape.scatter_add_rows(msgs, dst, n)?;

        let u = tape.param(store, self.u);
        let ux = tape.matmul(x, u)?;
        let h = tape.add(ux, agg)?;
        let ng = tape.param(store, self.node_ln_gamma);
        let nb = tape.param(store, self.node_ln_beta);
        let h_norm = tape.layer_norm(h, ng, nb, LN_EPS)?;
        let h_act = tape.relu(h_norm);
        let x_out = tape.add(x, h_act)?;
        Ok((x_out, e_out))
    }
}

/// Isomorphism-style layer with edge-aware messages:
/// `x_i' = mlp((1 + eps) x_i + sum relu(x_j + e_ij))`.
#[derive(Debug, Clone)]
pub struct GineLayer {
    pub eps: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GineLayer {
    pub fn build<R: Rng>(
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, LayerError> {
        Ok(Self {
            eps: store.add(format!("{prefix}.eps"), Tensor::zeros(1, 1))?,
            w1: store.add(format!("{prefix}.w1"), glorot(dim, dim, rng))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, dim))?,
            w2: store.add(format!("{prefix}.w2"), glorot(dim, dim, rng))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, dim))?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        e: Var,
        src: &[usize],
        dst: &[usize],
        n: usize,
    ) -> Result<Var, LayerError> {
        let x_src = tape.gather_rows(x, src)?;
        let pre = tape.add(x_src, e)?;
        let msgs = tape.relu(pre);
        let agg = tape.scatter_add_rows(msgs, dst, n)?;

        let eps = tape.param(store, self.eps);
        let one_plus = tape.add_scalar(eps, 1.0);
        let scaled_self = tape.scale_var(x, one_plus)?;
        let h = tape.add(scaled_self, agg)?;

        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h1 = tape.matmul(h, w1)?;
        let h1 = tape.add(h1, b1)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, w2)?;
        Ok(tape.add(h2, b2)?)
    }
}

/// Any of the supported message-passing layers.
#[derive(Debug, Clone)]
pub enum MpnnLayer {
    Gcn(GcnLayer),
    GatedGcn(GatedGcnLayer),
    Gine(GineLayer),
}

impl MpnnLayer {
    pub fn build<R: Rng>(
        kind: MpnnKind,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, LayerError> {
        Ok(match kind {
            MpnnKind::Gcn => MpnnLayer::Gcn(GcnLayer::build(dim, store, rng, prefix)?),
            MpnnKind::GatedGcn => {
                MpnnLayer::GatedGcn(GatedGcnLayer::build(dim, store, rng, prefix)?)
            }
            MpnnKind::Gine => MpnnLayer::Gine(GineLayer::build(dim, store, rng, prefix)?),
        })
    }

    /// Returns updated `(X, E)`; layers without an edge update pass `E`
    /// through unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        e: Var,
        src: &[usize],
        dst: &[usize],
        n: usize,
    ) -> Result<(Var, Var), LayerError> {
        match self {
            MpnnLayer::Gcn(layer) => Ok((layer.forward(tape, store, x, src, dst, n)?, e)),
            MpnnLayer::GatedGcn(layer) => layer.forward(tape, store, x, e, src, dst, n),
            MpnnLayer::Gine(layer) => Ok((layer.forward(tape, store, x, e, src, dst, n)?, e)),
        }
    }
}
