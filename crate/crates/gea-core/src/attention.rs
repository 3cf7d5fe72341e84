//! Self-attention and graph external attention.
//!
//! External attention scores every node (or edge) against a bank of
//! learnable memory units shared by all graphs, normalizes with a
//! two-stage scheme (softmax over each graph's nodes per unit, then L1
//! over units per node) and mixes the value units back. A residual on
//! both node and edge streams forms the GEANet block.

use crate::params::{eye_plus_noise, glorot, unit_normal_scaled, ParamError, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Epsilon guarding the second normalization stage against all-zero rows.
pub const DOUBLE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("hidden dim {dim} is not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Which external units participate in a forward pass. Disabled streams
/// pass their input through unchanged; a disabled shared unit becomes the
/// identity transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitToggles {
    pub use_node_units: bool,
    pub use_edge_units: bool,
    pub use_shared_unit: bool,
}

impl Default for UnitToggles {
    fn default() -> Self {
        Self {
            use_node_units: true,
            use_edge_units: true,
            use_shared_unit: true,
        }
    }
}

/// The learnable external memories: a `d x d` shared transform plus
/// `S x d` key/value banks for nodes and for edges. All five are
/// independent of any input graph.
#[derive(Debug, Clone)]
pub struct ExternalUnits {
    pub dim: usize,
    pub unit_count: usize,
    pub u_s: ParamId,
    pub u_nk: ParamId,
    pub u_nv: ParamId,
    pub u_ek: ParamId,
    pub u_ev: ParamId,
    pub toggles: UnitToggles,
}

impl ExternalUnits {
    /// All units are created regardless of toggles, so ablated and full
    /// configurations share identical initialization draws.
    pub fn build<R: Rng>(
        dim: usize,
        unit_count: usize,
        toggles: UnitToggles,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, ParamError> {
        let u_s = store.add(format!("{prefix}.u_s"), unit_normal_scaled(dim, dim, dim, rng))?;
        let u_nk = store.add(
            format!("{prefix}.u_nk"),
            unit_normal_scaled(unit_count, dim, dim, rng),
        )?;
        let u_nv = store.add(
            format!("{prefix}.u_nv"),
            unit_normal_scaled(unit_count, dim, dim, rng),
        )?;
        let u_ek = store.add(
            format!("{prefix}.u_ek"),
            unit_normal_scaled(unit_count, dim, dim, rng),
        )?;
        let u_ev = store.add(
            format!("{prefix}.u_ev"),
            unit_normal_scaled(unit_count, dim, dim, rng),
        )?;
        Ok(Self {
            dim,
            unit_count,
            u_s,
            u_nk,
            u_nv,
            u_ek,
            u_ev,
            toggles,
        })
    }
}

/// Selects the node or edge key/value bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitStream {
    Node,
    Edge,
}

/// Two-stage attention normalization: softmax over each graph segment's
/// rows per column, then L1 normalization across columns per row.
/// Output rows sum to one up to the epsilon guard.
pub fn double_normalize(
    tape: &mut Tape,
    scores: Var,
    segments: &[usize],
) -> Result<Var, TensorError> {
    let stage1 = tape.segment_col_softmax(scores, segments)?;
    Ok(tape.row_l1_normalize(stage1, DOUBLE_NORM_EPS))
}

/// Single-head external attention: `double_normalize((X U_s) U_k^T) U_v`.
///
/// Returns the mixed features; the attention matrix itself can be
/// captured via [`multi_head_gea`]'s trace argument.
pub fn gea_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    units: &ExternalUnits,
    which: UnitStream,
    segments: &[usize],
) -> Result<Var, LayerError> {
    let z = if units.toggles.use_shared_unit {
        let u_s = tape.param(store, units.u_s);
        tape.matmul(x, u_s)?
    } else {
        x
    };
    let (uk, uv) = match which {
        UnitStream::Node => (units.u_nk, units.u_nv),
        UnitStream::Edge => (units.u_ek, units.u_ev),
    };
    let uk = tape.param(store, uk);
    let ukt = tape.transpose(uk);
    let scores = tape.matmul(z, ukt)?;
    let alpha = double_normalize(tape, scores, segments)?;
    let uv = tape.param(store, uv);
    Ok(tape.matmul(alpha, uv)?)
}

/// Per-head attention matrices captured during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct AttnTrace {
    /// Node-stream external attention, one `n x S` matrix per head.
    pub gea_heads: Vec<Tensor>,
    /// Self-attention, one `n x n` matrix per head.
    pub self_heads: Vec<Tensor>,
}

/// Multi-head external attention. The shared transform is applied once
/// at full width; each head then works on its own column block of the
/// transformed input and of the (shared) key/value banks, and the
/// concatenated head outputs are mixed by `w_o`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_gea(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    units: &ExternalUnits,
    which: UnitStream,
    heads: usize,
    w_o: ParamId,
    segments: &[usize],
    mut trace: Option<&mut AttnTrace>,
) -> Result<Var, LayerError> {
    let d = units.dim;
    if heads == 0 || d % heads != 0 {
        return Err(LayerError::HeadDivisibility { dim: d, heads });
    }
    let dh = d / heads;
    let z = if units.toggles.use_shared_unit {
        let u_s = tape.param(store, units.u_s);
        tape.matmul(x, u_s)?
    } else {
        x
    };
    let (uk, uv) = match which {
        UnitStream::Node => (units.u_nk, units.u_nv),
        UnitStream::Edge => (units.u_ek, units.u_ev),
    };
    let uk = tape.param(store, uk);
    let uv = tape.param(store, uv);

    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let zh = tape.slice_cols(z, lo, hi)?;
        let ukh = tape.slice_cols(uk, lo, hi)?;
        let uvh = tape.slice_cols(uv, lo, hi)?;
        let ukt = tape.transpose(ukh);
        let scores = tape.matmul(zh, ukt)?;
        let alpha = double_normalize(tape, scores, segments)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.gea_heads.push(tape.value(alpha).clone());
        }
        parts.push(tape.matmul(alpha, uvh)?);
    }
    let cat = tape.concat_cols(&parts)?;
    let w_o = tape.param(store, w_o);
    Ok(tape.matmul(cat, w_o)?)
}

/// External attention applied to node and edge streams with residuals.
#[derive(Debug, Clone)]
pub struct GEANetBlock {
    pub units: ExternalUnits,
    pub heads: usize,
    pub w_o_node: ParamId,
    pub w_o_edge: ParamId,
}

impl GEANetBlock {
    pub fn build<R: Rng>(
        dim: usize,
        unit_count: usize,
        heads: usize,
        toggles: UnitToggles,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, LayerError> {
        if heads == 0 || dim % heads != 0 {
            return Err(LayerError::HeadDivisibility { dim, heads });
        }
        let units = ExternalUnits::build(dim, unit_count, toggles, store, rng, prefix)?;
        let w_o_node = store.add(format!("{prefix}.w_o_node"), eye_plus_noise(dim, 0.01, rng))?;
        let w_o_edge = store.add(format!("{prefix}.w_o_edge"), eye_plus_noise(dim, 0.01, rng))?;
        Ok(Self {
            units,
            heads,
            w_o_node,
            w_o_edge,
        })
    }

    /// `X_G = X + MultiHeadGEA(X)`, `E_G = E + MultiHeadGEA(E)`; a stream
    /// whose toggle is off passes through untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        e: Var,
        node_segments: &[usize],
        edge_segments: &[usize],
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<(Var, Var), LayerError> {
        let x_out = if self.units.toggles.use_node_units {
            let mixed = multi_head_gea(
                tape,
                store,
                x,
                &self.units,
                UnitStream::Node,
                self.heads,
                self.w_o_node,
                node_segments,
                trace.as_deref_mut(),
            )?;
            tape.add(x, mixed)?
        } else {
            x
        };
        let e_out = if self.units.toggles.use_edge_units {
            let mixed = multi_head_gea(
                tape,
                store,
                e,
                &self.units,
                UnitStream::Edge,
                self.heads,
                self.w_o_edge,
                edge_segments,
                None,
            )?;
            tape.add(e, mixed)?
        } else {
            e
        };
        Ok((x_out, e_out))
    }
}

/// Classic multi-head self-attention, masked to within-graph segments.
#[derive(Debug, Clone)]
pub struct SelfAttentionLayer {
    pub dim: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl SelfAttentionLayer {
    pub fn build<R: Rng>(
        dim: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, LayerError> {
        if heads == 0 || dim % heads != 0 {
            return Err(LayerError::HeadDivisibility { dim, heads });
        }
        let w_q = store.add(format!("{prefix}.w_q"), glorot(dim, dim, rng))?;
        let w_k = store.add(format!("{prefix}.w_k"), glorot(dim, dim, rng))?;
        let w_v = store.add(format!("{prefix}.w_v"), glorot(dim, dim, rng))?;
        let w_o = store.add(format!("{prefix}.w_o"), eye_plus_noise(dim, 0.01, rng))?;
        Ok(Self {
            dim,
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    /// Per head: `softmax(Q_h K_h^T / sqrt(d_out)) V_h` with cross-graph
    /// entries masked out, heads concatenated and projected by `W_O`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        segments: &[usize],
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<Var, LayerError> {
        let dh = self.dim / self.heads;
        let w_q = tape.param(store, self.w_q);
        let w_k = tape.param(store, self.w_k);
        let w_v = tape.param(store, self.w_v);
        let q = tape.matmul(x, w_q)?;
        let k = tape.matmul(x, w_k)?;
        let v = tape.matmul(x, w_v)?;

        let mut parts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.segment_row_softmax(scaled, segments)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.self_heads.push(tape.value(attn).clone());
            }
            parts.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&parts)?;
        let w_o = tape.param(store, self.w_o);
        Ok(tape.matmul(cat, w_o)?)
    }
}

#[cfg(test)]
mod tests;
