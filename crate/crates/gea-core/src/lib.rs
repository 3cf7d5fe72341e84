//! Desk-scale graph representation learning built around graph external
//! attention.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode
//!   differentiation, a finite-difference gradient checker and a
//!   multiply-add counter,
//! - [`graph`]: graph/batch data model, synthetic benchmark generators
//!   and a JSONL dataset format,
//! - [`posenc`]: Laplacian and random-walk positional encodings,
//! - [`attention`]: self-attention and graph external attention with
//!   double normalization and shared memory units,
//! - [`mpnn`]: GCN, GatedGCN and GINE message-passing layers,
//! - [`model`]: the embedding + feature-extraction-layer architecture
//!   with task heads,
//! - [`train`]: AdamW, warmup-cosine schedule, losses, metrics and the
//!   training loop,
//! - [`sweep`]: head-count / positional-encoding / unit-ablation drivers,
//! - [`verify`]: the end-to-end gradient-check suite,
//! - [`bench`]: forward-cost scaling measurements.

pub mod attention;
pub mod bench;
pub mod config;
pub mod graph;
pub mod model;
pub mod mpnn;
pub mod params;
pub mod posenc;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod util;
pub mod verify;
