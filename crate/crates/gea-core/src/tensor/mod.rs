//! Dense 2-D float64 tensors with tape-based reverse-mode differentiation.
//!
//! Everything downstream (attention, message passing, the full model) is
//! built from the fixed op set on [`Tape`]. Gradients are validated against
//! central finite differences by [`grad_check`]; multiply-add work is
//! metered by [`FlopCounter`] for the complexity measurements.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use tape::{Tape, Var};

use rand::{Rng, RngExt};
use std::f64::consts::TAU;
use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match {rows}x{cols} = {expected}")]
    DataLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("matmul dimension mismatch: {a_rows}x{a_cols} by {b_rows}x{b_cols}")]
    MatmulShape {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("{op} shape mismatch: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    ElementwiseShape {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("row index {index} out of range for {rows} rows at position {position}")]
    IndexOutOfRange {
        index: usize,
        rows: usize,
        position: usize,
    },
    #[error("column slice {from}..{to} out of bounds for {cols} columns")]
    SliceBounds {
        from: usize,
        to: usize,
        cols: usize,
    },
    #[error("concat requires equal row counts, got {first} and {other}")]
    ConcatRows { first: usize, other: usize },
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("{op} requires a 1x1 tensor, got {rows}x{cols}")]
    NotScalar {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("segment ids for {rows} rows must be sorted and of equal length, got {got}")]
    BadSegments { rows: usize, got: usize },
    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("label {label} out of range for {classes} classes at item {position}")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        position: usize,
    },
    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },
    #[error("asymmetric input to {op}: |a[{i}][{j}] - a[{j}][{i}]| = {delta:e}")]
    Asymmetric {
        op: &'static str,
        i: usize,
        j: usize,
        delta: f64,
    },
}

/// Dense row-major 2-D tensor of `f64` values.
///
/// The optional gradient buffer is populated by [`Tape::backward`] for
/// leaves created with `requires_grad` set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from nested rows; every row must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::DataLength {
                    rows: r,
                    cols: c,
                    expected: r * c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    /// Standard-normal random tensor (Box-Muller over the given RNG).
    pub fn randn<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                (-2.0 * (1.0 - u1).ln()).sqrt() * (TAU * u2).cos()
            })
            .collect();
        Self {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Option<Vec<f64>> {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value-level transpose (not recorded on any tape).
    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Monotone multiply-add counter.
///
/// `matmul` of `n x k` by `k x m` adds exactly `n*k*m`. Elementwise
/// multiply/divide/scale ops and the normalizing division of the softmax
/// family add one per output element. Pure additions (add, sub, gather,
/// scatter, concat) are free.
#[derive(Debug, Default, Clone)]
pub struct FlopCounter {
    multiply_adds: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, n: u64) {
        self.multiply_adds += n;
    }

    pub fn get(&self) -> u64 {
        self.multiply_adds
    }

    pub fn reset(&mut self) {
        self.multiply_adds = 0;
    }
}
