//! Execution tape recording differentiable ops for reverse-mode sweeps.
//!
//! Ops never mutate their inputs; each produces a fresh node. Backward
//! walks the records in exact reverse execution order, so a node's
//! gradient is complete before its own rule runs (consumers always sit
//! later on the tape).

use super::{FlopCounter, Tensor, TensorError};
use crate::params::{ParamId, ParamStore};
use ndarray::ArrayView2;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    ScaleVar { x: usize, s: usize },
    ScaleRows { x: usize, weights: Vec<f64> },
    RowSoftmax { x: usize },
    SegColSoftmax { x: usize, ranges: Vec<(usize, usize)> },
    SegRowSoftmax { x: usize, spans: Vec<(usize, usize)> },
    RowL1Norm { x: usize, eps: f64 },
    Gather { x: usize, idx: Vec<usize> },
    ScatterAdd { x: usize, idx: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { x: usize, from: usize },
    SumAll { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    L1Loss { pred: usize, target: usize },
}

/// Reverse-mode tape over dense 2-D tensors.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<ParamId>>,
    flops: FlopCounter,
}

/// `C = op(A) . op(B)` with optional transposes, via ndarray's matmul kernel.
fn dgemm(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
) -> Vec<f64> {
    let av = ArrayView2::from_shape((ar, ac), a).expect("dgemm lhs layout");
    let bv = ArrayView2::from_shape((br, bc), b).expect("dgemm rhs layout");
    let out = match (ta, tb) {
        (false, false) => av.dot(&bv),
        (false, true) => av.dot(&bv.t()),
        (true, false) => av.t().dot(&bv),
        (true, true) => av.t().dot(&bv.t()),
    };
    // dot() may hand back a column-major result for degenerate shapes;
    // the tape stores row-major only.
    let out = if out.is_standard_layout() {
        out
    } else {
        out.as_standard_layout().into_owned()
    };
    let (v, offset) = out.into_raw_vec_and_offset();
    debug_assert_eq!(offset.unwrap_or(0), 0);
    v
}

/// Splits sorted per-row segment ids into contiguous `[lo, hi)` ranges.
fn segment_ranges(seg: &[usize], rows: usize) -> Result<Vec<(usize, usize)>, TensorError> {
    if seg.len() != rows || seg.windows(2).any(|w| w[0] > w[1]) {
        return Err(TensorError::BadSegments {
            rows,
            got: seg.len(),
        });
    }
    let mut ranges = Vec::new();
    let mut lo = 0;
    while lo < rows {
        let mut hi = lo + 1;
        while hi < rows && seg[hi] == seg[lo] {
            hi += 1;
        }
        ranges.push((lo, hi));
        lo = hi;
    }
    Ok(ranges)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            flops: FlopCounter::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool, param: Option<ParamId>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        self.params.push(param);
        Var(self.values.len() - 1)
    }

    /// Registers a leaf; it participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs, None)
    }

    /// Registers a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    /// Registers a parameter value as a leaf linked back to its store slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.tensor(id).clone();
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient buffer of a node, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn reset_flops(&mut self) {
        self.flops.reset();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    // ---- differentiable ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(TensorError::MatmulShape {
                a_rows: ar,
                a_cols: ac,
                b_rows: br,
                b_cols: bc,
            });
        }
        self.flops.add((ar * ac * bc) as u64);
        let data = dgemm(
            self.values[a.0].data(),
            (ar, ac),
            false,
            self.values[b.0].data(),
            (br, bc),
            false,
        );
        let out = Tensor::new(ar, bc, data)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(out, Op::Matmul { a: a.0, b: b.0 }, needs, None))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.values[x.0].transposed();
        let needs = self.needs[x.0];
        self.push(out, Op::Transpose { x: x.0 }, needs, None)
    }

    /// Elementwise addition; a `1 x m` second operand broadcasts over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let broadcast = br == 1 && ar != 1 && bc == ac;
        if !broadcast && (ar != br || ac != bc) {
            return Err(TensorError::ElementwiseShape {
                op: "add",
                a_rows: ar,
                a_cols: ac,
                b_rows: br,
                b_cols: bc,
            });
        }
        let mut data = self.values[a.0].data().to_vec();
        let bd = self.values[b.0].data();
        if broadcast {
            for (row, chunk) in data.chunks_mut(ac.max(1)).enumerate() {
                let _ = row;
                for (v, w) in chunk.iter_mut().zip(bd) {
                    *v += w;
                }
            }
        } else {
            for (v, w) in data.iter_mut().zip(bd) {
                *v += w;
            }
        }
        let out = Tensor::new(ar, ac, data)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(
            out,
            Op::Add {
                a: a.0,
                b: b.0,
                broadcast,
            },
            needs,
            None,
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |a0, b0| Op::Sub { a: a0, b: b0 }, 0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |a0, b0| Op::Mul { a: a0, b: b0 }, 1)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "div", |x, y| x / y, |a0, b0| Op::Div { a: a0, b: b0 }, 1)
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
        flops_per_elem: u64,
    ) -> Result<Var, TensorError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br || ac != bc {
            return Err(TensorError::ElementwiseShape {
                op: name,
                a_rows: ar,
                a_cols: ac,
                b_rows: br,
                b_cols: bc,
            });
        }
        self.flops.add(flops_per_elem * (ar * ac) as u64);
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ar, ac, data)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(out, op(a.0, b.0), needs, None))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data = self.values[x.0].data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(r, c, data).expect("relu shape");
        let needs = self.needs[x.0];
        self.push(out, Op::Relu { x: x.0 }, needs, None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data = self.values[x.0]
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let out = Tensor::new(r, c, data).expect("sigmoid shape");
        let needs = self.needs[x.0];
        self.push(out, Op::Sigmoid { x: x.0 }, needs, None)
    }

    /// Multiplies by a compile-time constant scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.shape(x);
        self.flops.add((r * cols) as u64);
        let data = self.values[x.0].data().iter().map(|v| v * c).collect();
        let out = Tensor::new(r, cols, data).expect("scale shape");
        let needs = self.needs[x.0];
        self.push(out, Op::Scale { x: x.0, c }, needs, None)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.shape(x);
        let data = self.values[x.0].data().iter().map(|v| v + c).collect();
        let out = Tensor::new(r, cols, data).expect("add_scalar shape");
        let needs = self.needs[x.0];
        self.push(out, Op::AddScalar { x: x.0 }, needs, None)
    }

    /// Multiplies by a differentiable `1 x 1` scalar.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (sr, sc) = self.shape(s);
        if (sr, sc) != (1, 1) {
            return Err(TensorError::NotScalar {
                op: "scale_var",
                rows: sr,
                cols: sc,
            });
        }
        let (r, c) = self.shape(x);
        self.flops.add((r * c) as u64);
        let sv = self.values[s.0].item();
        let data = self.values[x.0].data().iter().map(|v| v * sv).collect();
        let out = Tensor::new(r, c, data)?;
        let needs = self.needs[x.0] || self.needs[s.0];
        Ok(self.push(out, Op::ScaleVar { x: x.0, s: s.0 }, needs, None))
    }

    /// Multiplies each row by a fixed (non-differentiable) weight.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if weights.len() != r {
            return Err(TensorError::BadSegments {
                rows: r,
                got: weights.len(),
            });
        }
        self.flops.add((r * c) as u64);
        let mut data = self.values[x.0].data().to_vec();
        for (row, chunk) in data.chunks_mut(c.max(1)).enumerate() {
            for v in chunk.iter_mut() {
                *v *= weights[row];
            }
        }
        let out = Tensor::new(r, c, data)?;
        let needs = self.needs[x.0];
        Ok(self.push(
            out,
            Op::ScaleRows {
                x: x.0,
                weights: weights.to_vec(),
            },
            needs,
            None,
        ))
    }

    /// Softmax over each row, stabilized by per-row max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        self.flops.add((r * c) as u64);
        let mut data = self.values[x.0].data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(r, c, data).expect("row_softmax shape");
        let needs = self.needs[x.0];
        self.push(out, Op::RowSoftmax { x: x.0 }, needs, None)
    }

    /// Softmax down each column, over all rows.
    pub fn col_softmax(&mut self, x: Var) -> Var {
        let rows = self.shape(x).0;
        let seg = vec![0usize; rows];
        self.segment_col_softmax(x, &seg).expect("uniform segments")
    }

    /// Softmax down each column, independently within each row segment.
    pub fn segment_col_softmax(&mut self, x: Var, seg: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        let ranges = segment_ranges(seg, r)?;
        self.flops.add((r * c) as u64);
        let xd = self.values[x.0].data();
        let mut data = vec![0.0; r * c];
        for &(lo, hi) in &ranges {
            for j in 0..c {
                let mut m = f64::NEG_INFINITY;
                for i in lo..hi {
                    m = m.max(xd[i * c + j]);
                }
                let mut sum = 0.0;
                for i in lo..hi {
                    let e = (xd[i * c + j] - m).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
                for i in lo..hi {
                    data[i * c + j] /= sum;
                }
            }
        }
        let out = Tensor::new(r, c, data)?;
        let needs = self.needs[x.0];
        Ok(self.push(out, Op::SegColSoftmax { x: x.0, ranges }, needs, None))
    }

    /// Row softmax over a square score matrix, masked to each row's own
    /// segment: entries outside the row's segment get weight zero.
    pub fn segment_row_softmax(&mut self, x: Var, seg: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if r != c {
            return Err(TensorError::NotSquare {
                op: "segment_row_softmax",
                rows: r,
                cols: c,
            });
        }
        let ranges = segment_ranges(seg, r)?;
        let mut spans = vec![(0usize, 0usize); r];
        for &(lo, hi) in &ranges {
            for s in spans.iter_mut().take(hi).skip(lo) {
                *s = (lo, hi);
            }
        }
        self.flops.add((r * c) as u64);
        let xd = self.values[x.0].data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let (lo, hi) = spans[i];
            let row = &xd[i * c + lo..i * c + hi];
            let slot = &mut data[i * c + lo..i * c + hi];
            slot.copy_from_slice(row);
            softmax_in_place(slot);
        }
        let out = Tensor::new(r, c, data)?;
        let needs = self.needs[x.0];
        Ok(self.push(out, Op::SegRowSoftmax { x: x.0, spans }, needs, None))
    }

    /// Divides each row by its sum plus `eps`; all-zero rows stay zero.
    pub fn row_l1_normalize(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        self.flops.add((r * c) as u64);
        let mut data = self.values[x.0].data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let denom = row.iter().sum::<f64>() + eps;
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let out = Tensor::new(r, c, data).expect("row_l1 shape");
        let needs = self.needs[x.0];
        self.push(out, Op::RowL1Norm { x: x.0, eps }, needs, None)
    }

    /// Copies rows of `x` selected by `idx` (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        for (position, &index) in idx.iter().enumerate() {
            if index >= r {
                return Err(TensorError::IndexOutOfRange {
                    index,
                    rows: r,
                    position,
                });
            }
        }
        let xd = self.values[x.0].data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(idx.len(), c, data)?;
        let needs = self.needs[x.0];
        Ok(self.push(
            out,
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
            },
            needs,
            None,
        ))
    }

    /// Sums rows of `x` into `n` target slots; accumulation runs in
    /// ascending row order so results are bit-reproducible.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if idx.len() != r {
            return Err(TensorError::BadSegments { rows: r, got: idx.len() });
        }
        for (position, &index) in idx.iter().enumerate() {
            if index >= n {
                return Err(TensorError::IndexOutOfRange {
                    index,
                    rows: n,
                    position,
                });
            }
        }
        let xd = self.values[x.0].data();
        let mut data = vec![0.0; n * c];
        for (row, &target) in idx.iter().enumerate() {
            let src = &xd[row * c..(row + 1) * c];
            let dst = &mut data[target * c..(target + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let out = Tensor::new(n, c, data)?;
        let needs = self.needs[x.0];
        Ok(self.push(
            out,
            Op::ScatterAdd {
                x: x.0,
                idx: idx.to_vec(),
            },
            needs,
            None,
        ))
    }

    /// Juxtaposes tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyInput { op: "concat_cols" })?;
        let rows = self.shape(*first).0;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if r != rows {
                return Err(TensorError::ConcatRows { first: rows, other: r });
            }
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let (_, c) = self.shape(*p);
            let pd = self.values[p.0].data();
            for i in 0..rows {
                data[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let out = Tensor::new(rows, total, data)?;
        let needs = parts.iter().any(|p| self.needs[p.0]);
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            needs,
            None,
        ))
    }

    /// Extracts the column range `from..to`.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if from >= to || to > c {
            return Err(TensorError::SliceBounds { from, to, cols: c });
        }
        let width = to - from;
        let xd = self.values[x.0].data();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + from..i * c + to]);
        }
        let out = Tensor::new(r, width, data)?;
        let needs = self.needs[x.0];
        Ok(self.push(out, Op::SliceCols { x: x.0, from }, needs, None))
    }

    /// Sums every entry into a `1 x 1` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.values[x.0].data().iter().sum();
        let out = Tensor::new(1, 1, vec![total]).expect("scalar");
        let needs = self.needs[x.0];
        self.push(out, Op::SumAll { x: x.0 }, needs, None)
    }

    /// Per-row layer normalization with learnable per-feature scale/shift.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        for (name, v) in [("layer_norm gamma", gamma), ("layer_norm beta", beta)] {
            let (vr, vc) = self.shape(v);
            if vr != 1 || vc != c {
                let _ = name;
                return Err(TensorError::ElementwiseShape {
                    op: "layer_norm",
                    a_rows: r,
                    a_cols: c,
                    b_rows: vr,
                    b_cols: vc,
                });
            }
        }
        self.flops.add((r * c) as u64);
        let xd = self.values[x.0].data();
        let gd = self.values[gamma.0].data();
        let bd = self.values[beta.0].data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let (mean, inv_std) = row_stats(row, eps);
            for j in 0..c {
                data[i * c + j] = gd[j] * (row[j] - mean) * inv_std + bd[j];
            }
        }
        let out = Tensor::new(r, c, data)?;
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            needs,
            None,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmaxed logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(logits);
        if r == 0 {
            return Err(TensorError::EmptyInput { op: "cross_entropy" });
        }
        if labels.len() != r {
            return Err(TensorError::BadSegments { rows: r, got: labels.len() });
        }
        for (position, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::LabelOutOfRange {
                    label,
                    classes: c,
                    position,
                });
            }
        }
        self.flops.add((r * c) as u64);
        let xd = self.values[logits.0].data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let out = Tensor::new(1, 1, vec![total / r as f64])?;
        let needs = self.needs[logits.0];
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            needs,
            None,
        ))
    }

    /// Mean absolute error over all entries.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (pr, pc) = self.shape(pred);
        let (tr, tc) = self.shape(target);
        if pr != tr || pc != tc {
            return Err(TensorError::ElementwiseShape {
                op: "l1_loss",
                a_rows: pr,
                a_cols: pc,
                b_rows: tr,
                b_cols: tc,
            });
        }
        if pr * pc == 0 {
            return Err(TensorError::EmptyInput { op: "l1_loss" });
        }
        let n = (pr * pc) as f64;
        let total: f64 = self.values[pred.0]
            .data()
            .iter()
            .zip(self.values[target.0].data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let out = Tensor::new(1, 1, vec![total / n])?;
        let needs = self.needs[pred.0] || self.needs[target.0];
        Ok(self.push(
            out,
            Op::L1Loss {
                pred: pred.0,
                target: target.0,
            },
            needs,
            None,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates gradient buffers for
    /// every grad-requiring node reachable from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: r, cols: c });
        }
        for i in 0..self.values.len() {
            self.grads[i] = if self.needs[i] {
                Some(vec![0.0; self.values[i].data().len()])
            } else {
                None
            };
        }
        if self.grads[loss.0].is_none() {
            // Loss independent of every trainable input: nothing to do.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            if !self.needs[idx] {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Accumulates `param`-linked leaf gradients into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for i in 0..self.values.len() {
            if let (Some(id), Some(g)) = (self.params[i], self.grads[i].as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn add_grad(&mut self, node: usize, update: impl FnOnce(&mut [f64])) {
        if !self.needs[node] {
            return;
        }
        if let Some(g) = self.grads[node].as_mut() {
            update(g);
        }
    }

    fn step_backward(&mut self, idx: usize, g: &[f64]) {
        let (out_rows, out_cols) = self.values[idx].shape();
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (ar, ac) = self.values[a].shape();
                let (br, bc) = self.values[b].shape();
                if self.needs[a] {
                    self.flops.add((ar * bc * br) as u64);
                    let da = dgemm(g, (out_rows, out_cols), false, self.values[b].data(), (br, bc), true);
                    self.add_grad(a, |buf| axpy(buf, &da));
                }
                if self.needs[b] {
                    self.flops.add((ar * ac * bc) as u64);
                    let db = dgemm(self.values[a].data(), (ar, ac), true, g, (out_rows, out_cols), false);
                    self.add_grad(b, |buf| axpy(buf, &db));
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let gt = Tensor::new(out_rows, out_cols, g.to_vec())
                    .expect("transpose grad shape")
                    .transposed();
                self.add_grad(x, |buf| axpy(buf, gt.data()));
            }
            Op::Add { a, b, broadcast } => {
                let (a, b, broadcast) = (*a, *b, *broadcast);
                self.add_grad(a, |buf| axpy(buf, g));
                if broadcast {
                    self.add_grad(b, |buf| {
                        for (i, gv) in g.iter().enumerate() {
                            buf[i % out_cols] += gv;
                        }
                    });
                } else {
                    self.add_grad(b, |buf| axpy(buf, g));
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |buf| axpy(buf, g));
                self.add_grad(b, |buf| {
                    for (bv, gv) in buf.iter_mut().zip(g) {
                        *bv -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs[a] {
                    let bd = self.values[b].data().to_vec();
                    self.add_grad(a, |buf| {
                        for ((av, gv), bv) in buf.iter_mut().zip(g).zip(&bd) {
                            *av += gv * bv;
                        }
                    });
                }
                if self.needs[b] {
                    let ad = self.values[a].data().to_vec();
                    self.add_grad(b, |buf| {
                        for ((bv, gv), av) in buf.iter_mut().zip(g).zip(&ad) {
                            *bv += gv * av;
                        }
                    });
                }
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs[a] {
                    let bd = self.values[b].data().to_vec();
                    self.add_grad(a, |buf| {
                        for ((av, gv), bv) in buf.iter_mut().zip(g).zip(&bd) {
                            *av += gv / bv;
                        }
                    });
                }
                if self.needs[b] {
                    let yd = self.values[idx].data().to_vec();
                    let bd = self.values[b].data().to_vec();
                    self.add_grad(b, |buf| {
                        for i in 0..buf.len() {
                            buf[i] -= g[i] * yd[i] / bd[i];
                        }
                    });
                }
            }
            Op::Relu { x } => {
                let x = *x;
                let xd = self.values[x].data().to_vec();
                self.add_grad(x, |buf| {
                    for ((bv, gv), xv) in buf.iter_mut().zip(g).zip(&xd) {
                        if *xv > 0.0 {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let yd = self.values[idx].data().to_vec();
                self.add_grad(x, |buf| {
                    for ((bv, gv), yv) in buf.iter_mut().zip(g).zip(&yd) {
                        *bv += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.add_grad(x, |buf| {
                    for (bv, gv) in buf.iter_mut().zip(g) {
                        *bv += gv * c;
                    }
                });
            }
            Op::AddScalar { x } => {
                let x = *x;
                self.add_grad(x, |buf| axpy(buf, g));
            }
            Op::ScaleVar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.values[s].item();
                self.add_grad(x, |buf| {
                    for (bv, gv) in buf.iter_mut().zip(g) {
                        *bv += gv * sv;
                    }
                });
                if self.needs[s] {
                    let xd = self.values[x].data();
                    let ds: f64 = xd.iter().zip(g).map(|(xv, gv)| xv * gv).sum();
                    self.add_grad(s, |buf| buf[0] += ds);
                }
            }
            Op::ScaleRows { x, weights } => {
                let x = *x;
                let weights = weights.clone();
                self.add_grad(x, |buf| {
                    for (row, chunk) in buf.chunks_mut(out_cols.max(1)).enumerate() {
                        for (bv, gv) in chunk.iter_mut().zip(&g[row * out_cols..]) {
                            *bv += gv * weights[row];
                        }
                    }
                });
            }
            Op::RowSoftmax { x } => {
                let x = *x;
                let yd = self.values[idx].data().to_vec();
                self.add_grad(x, |buf| {
                    for i in 0..out_rows {
                        let y = &yd[i * out_cols..(i + 1) * out_cols];
                        let gr = &g[i * out_cols..(i + 1) * out_cols];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let b = &mut buf[i * out_cols..(i + 1) * out_cols];
                        for j in 0..out_cols {
                            b[j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SegColSoftmax { x, ranges } => {
                let x = *x;
                let ranges = ranges.clone();
                let yd = self.values[idx].data().to_vec();
                self.add_grad(x, |buf| {
                    for &(lo, hi) in &ranges {
                        for j in 0..out_cols {
                            let mut dot = 0.0;
                            for i in lo..hi {
                                dot += yd[i * out_cols + j] * g[i * out_cols + j];
                            }
                            for i in lo..hi {
                                let p = i * out_cols + j;
                                buf[p] += yd[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::SegRowSoftmax { x, spans } => {
                let x = *x;
                let spans = spans.clone();
                let yd = self.values[idx].data().to_vec();
                self.add_grad(x, |buf| {
                    for i in 0..out_rows {
                        let (lo, hi) = spans[i];
                        let mut dot = 0.0;
                        for j in lo..hi {
                            dot += yd[i * out_cols + j] * g[i * out_cols + j];
                        }
                        for j in lo..hi {
                            let p = i * out_cols + j;
                            buf[p] += yd[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::RowL1Norm { x, eps } => {
                let (x, eps) = (*x, *eps);
                let xd = self.values[x].data().to_vec();
                let yd = self.values[idx].data().to_vec();
                self.add_grad(x, |buf| {
                    for i in 0..out_rows {
                        let xr = &xd[i * out_cols..(i + 1) * out_cols];
                        let yr = &yd[i * out_cols..(i + 1) * out_cols];
                        let gr = &g[i * out_cols..(i + 1) * out_cols];
                        let denom = xr.iter().sum::<f64>() + eps;
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let b = &mut buf[i * out_cols..(i + 1) * out_cols];
                        for j in 0..out_cols {
                            b[j] += (gr[j] - dot) / denom;
                        }
                    }
                });
            }
            Op::Gather { x, idx: rows } => {
                let x = *x;
                let rows = rows.clone();
                self.add_grad(x, |buf| {
                    for (r, &src_row) in rows.iter().enumerate() {
                        let gr = &g[r * out_cols..(r + 1) * out_cols];
                        let b = &mut buf[src_row * out_cols..(src_row + 1) * out_cols];
                        for (bv, gv) in b.iter_mut().zip(gr) {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::ScatterAdd { x, idx: targets } => {
                let x = *x;
                let targets = targets.clone();
                self.add_grad(x, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = &g[t * out_cols..(t + 1) * out_cols];
                        let b = &mut buf[r * out_cols..(r + 1) * out_cols];
                        for (bv, gv) in b.iter_mut().zip(gr) {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.values[p].shape();
                    let start = offset;
                    self.add_grad(p, |buf| {
                        for i in 0..pr {
                            let gr = &g[i * out_cols + start..i * out_cols + start + pc];
                            let b = &mut buf[i * pc..(i + 1) * pc];
                            for (bv, gv) in b.iter_mut().zip(gr) {
                                *bv += gv;
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols { x, from } => {
                let (x, from) = (*x, *from);
                let xc = self.values[x].shape().1;
                self.add_grad(x, |buf| {
                    for i in 0..out_rows {
                        let gr = &g[i * out_cols..(i + 1) * out_cols];
                        let b = &mut buf[i * xc + from..i * xc + from + out_cols];
                        for (bv, gv) in b.iter_mut().zip(gr) {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let x = *x;
                let gv = g[0];
                self.add_grad(x, |buf| {
                    for bv in buf.iter_mut() {
                        *bv += gv;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xd = self.values[x].data().to_vec();
                let gd = self.values[gamma].data().to_vec();
                let cols = out_cols;
                // Recompute per-row stats; cheaper than caching them forward.
                let mut xhat = vec![0.0; xd.len()];
                let mut inv_stds = vec![0.0; out_rows];
                for i in 0..out_rows {
                    let row = &xd[i * cols..(i + 1) * cols];
                    let (mean, inv_std) = row_stats(row, eps);
                    inv_stds[i] = inv_std;
                    for j in 0..cols {
                        xhat[i * cols + j] = (row[j] - mean) * inv_std;
                    }
                }
                if self.needs[gamma] {
                    self.add_grad(gamma, |buf| {
                        for i in 0..out_rows {
                            for j in 0..cols {
                                buf[j] += g[i * cols + j] * xhat[i * cols + j];
                            }
                        }
                    });
                }
                if self.needs[beta] {
                    self.add_grad(beta, |buf| {
                        for i in 0..out_rows {
                            for j in 0..cols {
                                buf[j] += g[i * cols + j];
                            }
                        }
                    });
                }
                if self.needs[x] {
                    self.add_grad(x, |buf| {
                        for i in 0..out_rows {
                            let ghat: Vec<f64> =
                                (0..cols).map(|j| g[i * cols + j] * gd[j]).collect();
                            let m1 = ghat.iter().sum::<f64>() / cols as f64;
                            let m2 = ghat
                                .iter()
                                .zip(&xhat[i * cols..(i + 1) * cols])
                                .map(|(gh, xh)| gh * xh)
                                .sum::<f64>()
                                / cols as f64;
                            for j in 0..cols {
                                buf[i * cols + j] += (ghat[j]
                                    - m1
                                    - xhat[i * cols + j] * m2)
                                    * inv_stds[i];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let (lr, lc) = self.values[logits].shape();
                let xd = self.values[logits].data().to_vec();
                let gv = g[0] / lr as f64;
                self.add_grad(logits, |buf| {
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &xd[i * lc..(i + 1) * lc];
                        let mut probs = row.to_vec();
                        softmax_in_place(&mut probs);
                        let b = &mut buf[i * lc..(i + 1) * lc];
                        for j in 0..lc {
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            b[j] += gv * (probs[j] - indicator);
                        }
                    }
                });
            }
            Op::L1Loss { pred, target } => {
                let (pred, target) = (*pred, *target);
                let n = self.values[pred].data().len() as f64;
                let signs: Vec<f64> = self.values[pred]
                    .data()
                    .iter()
                    .zip(self.values[target].data())
                    .map(|(p, t)| (p - t).signum() * if p == t { 0.0 } else { 1.0 })
                    .collect();
                let gv = g[0] / n;
                self.add_grad(pred, |buf| {
                    for (bv, s) in buf.iter_mut().zip(&signs) {
                        *bv += gv * s;
                    }
                });
                self.add_grad(target, |buf| {
                    for (bv, s) in buf.iter_mut().zip(&signs) {
                        *bv -= gv * s;
                    }
                });
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn axpy(buf: &mut [f64], g: &[f64]) {
    for (b, v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
