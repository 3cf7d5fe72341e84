//! Positional encodings: Laplacian eigenvectors and random-walk return
//! probabilities, plus the dense symmetric eigensolver backing LapPE.

use crate::graph::Graph;
use crate::tensor::Tensor;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PosEncError {
    #[error("eigensolver needs a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("asymmetric input: |a[{i}][{j}] - a[{j}][{i}]| = {delta:e}")]
    Asymmetric { i: usize, j: usize, delta: f64 },
    #[error("laplacian encoding needs k < n, got k = {k} on {n} nodes")]
    KTooLarge { k: usize, n: usize },
    #[error("positional encoding dimension must be at least 1")]
    ZeroDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    #[default]
    None,
    Lappe,
    Rwpe,
}

/// Positional-encoding choice for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosEncConfig {
    pub kind: PeKind,
    /// Encoding width; ignored when kind is `none`.
    #[serde(default = "default_pe_dim")]
    pub dim: usize,
    /// Randomly flip eigenvector signs each training step (LapPE only).
    #[serde(default)]
    pub sign_flip: bool,
}

fn default_pe_dim() -> usize {
    8
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            kind: PeKind::None,
            dim: default_pe_dim(),
            sign_flip: false,
        }
    }
}

impl PosEncConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), PosEncError> {
        if self.kind != PeKind::None && self.dim == 0 {
            return Err(PosEncError::ZeroDim);
        }
        Ok(())
    }
}

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 64;

fn off_diagonal_norm(b: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += b[i * n + j] * b[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Iterates sweeps until the off-diagonal Frobenius norm drops below
/// 1e-12. Returns eigenvalues in ascending order with matching
/// orthonormal eigenvector columns.
pub fn sym_eig(a: &Tensor) -> Result<(Vec<f64>, Tensor), PosEncError> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(PosEncError::NotSquare { rows, cols });
    }
    let n = rows;
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (a.get(i, j) - a.get(j, i)).abs();
            if delta > 1e-10 {
                return Err(PosEncError::Asymmetric { i, j, delta });
            }
        }
    }

    let mut b = a.data().to_vec();
    // Symmetrize exactly so rotations preserve symmetry bit for bit.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (b[i * n + j] + b[j * n + i]);
            b[i * n + j] = v;
            b[j * n + i] = v;
        }
    }
    let mut v = Tensor::eye(n).data().to_vec();

    for _sweep in 0..MAX_SWEEPS {
        if off_diagonal_norm(&b, n) < JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = b[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = b[p * n + p];
                let aqq = b[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                b[p * n + p] = app - t * apq;
                b[q * n + q] = aqq + t * apq;
                b[p * n + q] = 0.0;
                b[q * n + p] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = b[i * n + p];
                        let aiq = b[i * n + q];
                        b[i * n + p] = c * aip - s * aiq;
                        b[p * n + i] = b[i * n + p];
                        b[i * n + q] = s * aip + c * aiq;
                        b[q * n + i] = b[i * n + q];
                    }
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| b[i * n + i].total_cmp(&b[j * n + j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| b[i * n + i]).collect();
    let mut vecs = Tensor::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vecs.set(i, new_col, v[i * n + old_col]);
        }
    }
    Ok((eigenvalues, vecs))
}

/// Dense 0/1 adjacency from the arc list (dedup over orientations).
fn dense_adjacency(g: &Graph) -> Tensor {
    let mut a = Tensor::zeros(g.n, g.n);
    for &(s, d) in &g.edges {
        a.set(s, d, 1.0);
        a.set(d, s, 1.0);
    }
    a
}

fn degrees(a: &Tensor) -> Vec<f64> {
    let n = a.rows();
    (0..n).map(|i| a.row(i).iter().sum()).collect()
}

/// Laplacian positional encoding: eigenvectors of the symmetric
/// normalized Laplacian for eigenvalue ranks `1..=k` (rank 0 skipped).
///
/// Columns are sign-canonicalized so the largest-magnitude entry is
/// positive; isolated nodes contribute zero rows to the normalized
/// adjacency.
pub fn lap_pe(g: &Graph, k: usize) -> Result<Tensor, PosEncError> {
    if k >= g.n {
        return Err(PosEncError::KTooLarge { k, n: g.n });
    }
    let a = dense_adjacency(g);
    let deg = degrees(&a);
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let n = g.n;
    let mut lap = Tensor::eye(n);
    for i in 0..n {
        for j in 0..n {
            if a.get(i, j) != 0.0 {
                let v = lap.get(i, j) - inv_sqrt[i] * a.get(i, j) * inv_sqrt[j];
                lap.set(i, j, v);
            }
        }
    }
    let (_vals, vecs) = sym_eig(&lap)?;
    let mut out = Tensor::zeros(n, k);
    for col in 0..k {
        let src = col + 1; // skip eigenvalue rank 0
        let mut best = 0;
        for i in 1..n {
            if vecs.get(i, src).abs() > vecs.get(best, src).abs() {
                best = i;
            }
        }
        let sign = if vecs.get(best, src) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.set(i, col, sign * vecs.get(i, src));
        }
    }
    Ok(out)
}

/// Random-walk positional encoding: diagonal return probabilities of the
/// column-normalized adjacency powers `M, M^2, ..., M^k`.
///
/// Every entry of each power is accumulated in value-sorted order, which
/// makes the encoding bitwise invariant under node permutations.
pub fn rwpe(g: &Graph, k: usize) -> Result<Tensor, PosEncError> {
    if k == 0 {
        return Err(PosEncError::ZeroDim);
    }
    let n = g.n;
    let a = dense_adjacency(g);
    let deg = degrees(&a);
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if a.get(i, j) != 0.0 && deg[j] > 0.0 {
                m.set(i, j, 1.0 / deg[j]);
            }
        }
    }

    let mut out = Tensor::zeros(n, k);
    let mut power = m.clone();
    for i in 0..n {
        out.set(i, 0, power.get(i, i));
    }
    let mut terms = Vec::with_capacity(n);
    for step in 1..k {
        let mut next = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                terms.clear();
                for l in 0..n {
                    let prod = power.get(i, l) * m.get(l, j);
                    if prod != 0.0 {
                        terms.push(prod);
                    }
                }
                terms.sort_by(|a, b| a.total_cmp(b));
                next.set(i, j, terms.iter().sum());
            }
        }
        power = next;
        for i in 0..n {
            out.set(i, step, power.get(i, i));
        }
    }
    Ok(out)
}

/// Computes the configured encoding for one graph (`None` when disabled).
pub fn compute_pe(g: &Graph, cfg: &PosEncConfig) -> Result<Option<Tensor>, PosEncError> {
    match cfg.kind {
        PeKind::None => Ok(None),
        PeKind::Lappe => lap_pe(g, cfg.dim).map(Some),
        PeKind::Rwpe => rwpe(g, cfg.dim).map(Some),
    }
}

/// Train-time sign augmentation: each column independently keeps or flips
/// its sign with probability one half.
pub fn random_sign_flips<R: Rng>(pe: &Tensor, rng: &mut R) -> Tensor {
    let (n, k) = pe.shape();
    let signs: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.5) { -1.0 } else { 1.0 })
        .collect();
    let mut out = pe.clone();
    for i in 0..n {
        for j in 0..k {
            out.set(i, j, pe.get(i, j) * signs[j]);
        }
    }
    out
}
