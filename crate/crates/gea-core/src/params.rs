//! Named trainable parameters, shared by model layers and the optimizer.
//!
//! Layers hold [`ParamId`] handles; each training step registers the
//! current values on a fresh tape, and gradients flow back here through
//! [`crate::tensor::Tape::write_param_grads`]. Checkpoints are a JSON
//! manifest of every named tensor; saving a loaded checkpoint reproduces
//! the file byte for byte.

use crate::tensor::Tensor;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name: {0}")]
    DuplicateName(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint parameter {name} has {got} values, expected {rows}x{cols}")]
    BadShape {
        name: String,
        rows: usize,
        cols: usize,
        got: usize,
    },
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable tensor under a unique name; insertion order is the
    /// canonical parameter order for the optimizer and checkpoints.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(ParamError::DuplicateName(name));
        }
        self.entries.push(Entry {
            name,
            tensor: tensor.with_grad(),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.data().len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let t = &mut self.entries[id.0].tensor;
        if t.grad().is_none() {
            t.zero_grad();
        }
        if let Some(buf) = t.grad_mut().as_mut() {
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    // ---- checkpointing ----

    pub fn to_manifest(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|e| CheckpointParam {
                    name: e.name.clone(),
                    rows: e.tensor.rows(),
                    cols: e.tensor.cols(),
                    data: e.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_manifest(manifest: Checkpoint) -> Result<Self, ParamError> {
        if manifest.version != CHECKPOINT_VERSION {
            return Err(ParamError::Version(manifest.version));
        }
        let mut store = ParamStore::new();
        for p in manifest.params {
            if p.data.len() != p.rows * p.cols {
                return Err(ParamError::BadShape {
                    name: p.name,
                    rows: p.rows,
                    cols: p.cols,
                    got: p.data.len(),
                });
            }
            let t = Tensor::new(p.rows, p.cols, p.data).expect("validated shape");
            store.add(p.name, t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let bytes = serde_json::to_vec(&self.to_manifest())?;
        crate::util::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let bytes = std::fs::read(path)?;
        let manifest: Checkpoint = serde_json::from_slice(&bytes)?;
        Self::from_manifest(manifest)
    }

    /// Copies values from another store with identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), ParamError> {
        if self.entries.len() != other.entries.len() {
            return Err(ParamError::Mismatch(format!(
                "{} parameters vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(ParamError::Mismatch(format!(
                    "parameter {} ({}x{}) vs {} ({}x{})",
                    mine.name,
                    mine.tensor.rows(),
                    mine.tensor.cols(),
                    theirs.name,
                    theirs.tensor.rows(),
                    theirs.tensor.cols()
                )));
            }
            let data = mine.tensor.data_mut();
            data.copy_from_slice(theirs.tensor.data());
        }
        Ok(())
    }
}

/// Serialized checkpoint: versioned manifest of named row-major tensors.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: Vec<CheckpointParam>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Glorot-uniform init for projection matrices.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::new(rows, cols, data).expect("glorot shape")
}

/// Gaussian init with standard deviation `1/sqrt(dim)`, used for the
/// external memory units.
pub fn unit_normal_scaled<R: Rng>(rows: usize, cols: usize, dim: usize, rng: &mut R) -> Tensor {
    let std = 1.0 / (dim as f64).sqrt();
    let mut t = Tensor::randn(rows, cols, rng);
    for v in t.data_mut() {
        *v *= std;
    }
    t
}

/// Identity plus small Gaussian noise, used for output projections.
pub fn eye_plus_noise<R: Rng>(n: usize, noise: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(n, n, rng);
    for v in t.data_mut() {
        *v *= noise;
    }
    for i in 0..n {
        let d = t.get(i, i) + 1.0;
        t.set(i, i, d);
    }
    t
}
