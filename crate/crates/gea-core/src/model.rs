//! The full architecture: graph embedding, stacked feature-extraction
//! layers and a prediction head.
//!
//! Each layer sums three parallel streams -- message passing, masked
//! self-attention and external attention -- through a residual FFN. The
//! external block's node stream reads the layer input while its edge
//! stream reads the MPNN's updated edges; a config flag switches the node
//! stream to the MPNN output instead.

use crate::attention::{AttnTrace, GEANetBlock, LayerError, SelfAttentionLayer, UnitToggles};
use crate::graph::{Batch, DatasetInfo, Features, Target, TaskKind};
use crate::mpnn::{MpnnKind, MpnnLayer, LN_EPS};
use crate::params::{glorot, ParamError, ParamId, ParamStore};
use crate::posenc::PosEncConfig;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("feature schema mismatch: {0}")]
    Schema(String),
    #[error("model/task mismatch: {0}")]
    Task(String),
}

fn default_unit_size() -> usize {
    16
}

fn default_heads() -> usize {
    4
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    /// Number of external memory units (S).
    #[serde(default = "default_unit_size")]
    pub unit_size: usize,
    #[serde(default = "default_heads")]
    pub self_heads: usize,
    #[serde(default = "default_heads")]
    pub external_heads: usize,
    /// Message-passing layer kind; `None` disables the stream.
    #[serde(default)]
    pub mpnn: Option<MpnnKind>,
    /// Enables the masked self-attention stream.
    #[serde(default = "default_true")]
    pub self_attention: bool,
    /// Enables the external-attention block.
    #[serde(default = "default_true")]
    pub geanet: bool,
    #[serde(default = "default_true")]
    pub use_node_units: bool,
    #[serde(default = "default_true")]
    pub use_edge_units: bool,
    #[serde(default = "default_true")]
    pub use_shared_unit: bool,
    #[serde(default)]
    pub pe: PosEncConfig,
    /// Feed the external block's node stream from the MPNN output
    /// instead of the layer input.
    #[serde(default)]
    pub geanet_reads_mpnn_nodes: bool,
}

impl ModelConfig {
    pub fn toggles(&self) -> UnitToggles {
        UnitToggles {
            use_node_units: self.use_node_units,
            use_edge_units: self.use_edge_units,
            use_shared_unit: self.use_shared_unit,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 {
            return Err(ModelError::Config("hidden_dim must be positive".into()));
        }
        if self.mpnn.is_none() && !self.self_attention && !self.geanet {
            return Err(ModelError::Config(
                "at least one of mpnn, self_attention, geanet must be enabled".into(),
            ));
        }
        if self.self_attention && (self.self_heads == 0 || self.hidden_dim % self.self_heads != 0)
        {
            return Err(ModelError::Config(format!(
                "hidden_dim {} not divisible by self_heads {}",
                self.hidden_dim, self.self_heads
            )));
        }
        if self.geanet
            && (self.external_heads == 0 || self.hidden_dim % self.external_heads != 0)
        {
            return Err(ModelError::Config(format!(
                "hidden_dim {} not divisible by external_heads {}",
                self.hidden_dim, self.external_heads
            )));
        }
        if self.unit_size == 0 {
            return Err(ModelError::Config("unit_size must be positive".into()));
        }
        self.pe
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Numeric inputs for one forward pass, prepared from a [`Batch`].
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub n: usize,
    pub m: usize,
    pub num_graphs: usize,
    /// Categorical node ids, one vector per column.
    pub node_cat: Option<Vec<Vec<usize>>>,
    pub node_dense: Option<Tensor>,
    pub edge_cat: Option<Vec<Vec<usize>>>,
    pub edge_dense: Option<Tensor>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub node_seg: Vec<usize>,
    pub edge_seg: Vec<usize>,
    pub pe: Option<Tensor>,
    pub readout: ReadoutSpec,
    pub labels: LabelData,
}

#[derive(Debug, Clone)]
pub enum ReadoutSpec {
    /// Node-level outputs, one row per node.
    PerNode,
    /// One row per graph, taken from these global node indices.
    TargetNodes(Vec<usize>),
    /// One row per graph, mean-pooled over its nodes.
    MeanPool,
}

#[derive(Debug, Clone)]
pub enum LabelData {
    Classes(Vec<usize>),
    Values(Tensor),
}

fn cat_columns(f: &Features, what: &str, vocab: &[usize]) -> Result<Vec<Vec<usize>>, ModelError> {
    match f {
        Features::Categorical { cols, ids } => {
            if *cols != vocab.len() {
                return Err(ModelError::Schema(format!(
                    "{what}: {cols} categorical columns, embedding expects {}",
                    vocab.len()
                )));
            }
            let rows = f.rows();
            let mut out = vec![Vec::with_capacity(rows); *cols];
            for (i, &id) in ids.iter().enumerate() {
                let col = i % cols;
                if id < 0 || id as usize >= vocab[col] {
                    return Err(ModelError::Schema(format!(
                        "{what}: id {id} outside vocabulary of size {}",
                        vocab[col]
                    )));
                }
                out[col].push(id as usize);
            }
            Ok(out)
        }
        Features::Dense { .. } => Err(ModelError::Schema(format!(
            "{what}: expected categorical features"
        ))),
    }
}

fn dense_tensor(f: &Features, what: &str, dim: usize) -> Result<Tensor, ModelError> {
    match f {
        Features::Dense { cols, values } => {
            if *cols != dim {
                return Err(ModelError::Schema(format!(
                    "{what}: dense width {cols}, embedding expects {dim}"
                )));
            }
            Ok(Tensor::new(f.rows(), *cols, values.clone())?)
        }
        Features::Categorical { .. } => Err(ModelError::Schema(format!(
            "{what}: expected dense features"
        ))),
    }
}

impl ModelInput {
    /// Prepares a batch for the model; `pe` is the stacked positional
    /// encoding for all nodes (already concatenated across graphs).
    pub fn from_batch(
        batch: &Batch,
        info: &DatasetInfo,
        pe: Option<Tensor>,
    ) -> Result<Self, ModelError> {
        let (node_cat, node_dense) = if info.node_vocab.is_empty() {
            (None, Some(dense_tensor(&batch.node_feat, "nodes", info.node_dense_dim)?))
        } else {
            (Some(cat_columns(&batch.node_feat, "nodes", &info.node_vocab)?), None)
        };
        let (edge_cat, edge_dense) = match &batch.edge_feat {
            None => (None, None),
            Some(ef) => {
                if info.edge_vocab.is_empty() {
                    (None, Some(dense_tensor(ef, "edges", info.edge_dense_dim)?))
                } else {
                    (Some(cat_columns(ef, "edges", &info.edge_vocab)?), None)
                }
            }
        };
        if let Some(pe) = &pe {
            if pe.rows() != batch.n {
                return Err(ModelError::Schema(format!(
                    "positional encoding rows {} vs {} nodes",
                    pe.rows(),
                    batch.n
                )));
            }
        }

        let readout = match info.task {
            TaskKind::NodeClassify => ReadoutSpec::PerNode,
            TaskKind::GraphClassify | TaskKind::GraphRegress => {
                let targets: Option<Vec<usize>> = batch.target_nodes.iter().copied().collect();
                match targets {
                    Some(rows) => ReadoutSpec::TargetNodes(rows),
                    None => ReadoutSpec::MeanPool,
                }
            }
        };
        let labels = match info.task {
            TaskKind::NodeClassify => {
                let mut all = Vec::with_capacity(batch.n);
                for t in &batch.targets {
                    match t {
                        Target::NodeLabels(l) => all.extend_from_slice(l),
                        _ => return Err(ModelError::Task("expected node labels".into())),
                    }
                }
                LabelData::Classes(all)
            }
            TaskKind::GraphClassify => {
                let mut all = Vec::with_capacity(batch.num_graphs());
                for t in &batch.targets {
                    match t {
                        Target::GraphClass(c) => all.push(*c),
                        _ => return Err(ModelError::Task("expected graph classes".into())),
                    }
                }
                LabelData::Classes(all)
            }
            TaskKind::GraphRegress => {
                let mut rows = Vec::new();
                for t in &batch.targets {
                    match t {
                        Target::GraphValue(v) => {
                            if v.len() != info.out_dim {
                                return Err(ModelError::Task(format!(
                                    "regression target width {} vs {}",
                                    v.len(),
                                    info.out_dim
                                )));
                            }
                            rows.extend_from_slice(v);
                        }
                        _ => return Err(ModelError::Task("expected graph values".into())),
                    }
                }
                LabelData::Values(Tensor::new(batch.num_graphs(), info.out_dim, rows)?)
            }
        };

        Ok(ModelInput {
            n: batch.n,
            m: batch.m(),
            num_graphs: batch.num_graphs(),
            node_cat,
            node_dense,
            edge_cat,
            edge_dense,
            src: batch.edges.iter().map(|&(s, _)| s).collect(),
            dst: batch.edges.iter().map(|&(_, d)| d).collect(),
            node_seg: batch.graph_id.clone(),
            edge_seg: batch.edge_graph_id(),
            pe,
            readout,
            labels,
        })
    }
}

/// Linear projection (or categorical lookup) of raw node/edge features
/// into the hidden width, plus the positional-encoding projection.
#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub dim: usize,
    pub node_tables: Vec<ParamId>,
    pub node_proj: Option<ParamId>,
    pub node_bias: ParamId,
    pub edge_tables: Vec<ParamId>,
    pub edge_proj: Option<ParamId>,
    pub edge_bias: ParamId,
    /// `k x d` projection of the positional encoding; present iff a
    /// positional encoding is configured.
    pub pe_proj: Option<ParamId>,
}

impl EmbeddingLayer {
    fn build<R: Rng>(
        info: &DatasetInfo,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut node_tables = Vec::new();
        for (c, &vocab) in info.node_vocab.iter().enumerate() {
            node_tables.push(store.add(format!("emb.node_table{c}"), glorot(vocab, dim, rng))?);
        }
        let node_proj = if info.node_vocab.is_empty() {
            Some(store.add("emb.node_proj", glorot(info.node_dense_dim, dim, rng))?)
        } else {
            None
        };
        let node_bias = store.add("emb.node_bias", Tensor::zeros(1, dim))?;
        let mut edge_tables = Vec::new();
        for (c, &vocab) in info.edge_vocab.iter().enumerate() {
            edge_tables.push(store.add(format!("emb.edge_table{c}"), glorot(vocab, dim, rng))?);
        }
        let edge_proj = if info.has_edge_feat && info.edge_vocab.is_empty() {
            Some(store.add("emb.edge_proj", glorot(info.edge_dense_dim, dim, rng))?)
        } else {
            None
        };
        let edge_bias = store.add("emb.edge_bias", Tensor::zeros(1, dim))?;
        Ok(Self {
            dim,
            node_tables,
            node_proj,
            node_bias,
            edge_tables,
            edge_proj,
            edge_bias,
            pe_proj: None,
        })
    }

    /// `x_i = T p_i + (W alpha_i + u)`, `e_ij = W_e beta_ij + v`; graphs
    /// without edge features embed every arc as the bias row alone.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &ModelInput,
    ) -> Result<(Var, Var), ModelError> {
        let mut x = if let Some(cols) = &input.node_cat {
            let mut acc: Option<Var> = None;
            for (c, ids) in cols.iter().enumerate() {
                let table = tape.param(store, self.node_tables[c]);
                let looked = tape.gather_rows(table, ids)?;
                acc = Some(match acc {
                    None => looked,
                    Some(prev) => tape.add(prev, looked)?,
                });
            }
            acc.expect("categorical features have at least one column")
        } else {
            let feat = tape.constant(input.node_dense.clone().expect("dense node features"));
            let proj = tape.param(store, self.node_proj.expect("dense projection"));
            tape.matmul(feat, proj)?
        };
        let u = tape.param(store, self.node_bias);
        x = tape.add(x, u)?;
        if let Some(pe_proj) = self.pe_proj {
            let pe = input.pe.clone().ok_or_else(|| {
                ModelError::Schema("model expects a positional encoding".into())
            })?;
            let pe = tape.constant(pe);
            let t0 = tape.param(store, pe_proj);
            let projected = tape.matmul(pe, t0)?;
            x = tape.add(x, projected)?;
        }

        let e = if let Some(cols) = &input.edge_cat {
            let mut acc: Option<Var> = None;
            for (c, ids) in cols.iter().enumerate() {
                let table = tape.param(store, self.edge_tables[c]);
                let looked = tape.gather_rows(table, ids)?;
                acc = Some(match acc {
                    None => looked,
                    Some(prev) => tape.add(prev, looked)?,
                });
            }
            let v = tape.param(store, self.edge_bias);
            tape.add(acc.expect("categorical edge columns"), v)?
        } else if let Some(dense) = &input.edge_dense {
            let feat = tape.constant(dense.clone());
            let proj = tape.param(store, self.edge_proj.expect("dense edge projection"));
            let h = tape.matmul(feat, proj)?;
            let v = tape.param(store, self.edge_bias);
            tape.add(h, v)?
        } else {
            let zeros = tape.constant(Tensor::zeros(input.m, self.dim));
            let v = tape.param(store, self.edge_bias);
            tape.add(zeros, v)?
        };
        Ok((x, e))
    }
}

/// Residual two-layer FFN with trailing layer normalization.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl FeedForward {
    fn build<R: Rng>(
        dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
    ) -> Result<Self, ModelError> {
        let hidden = 2 * dim;
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), glorot(dim, hidden, rng))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden))?,
            w2: store.add(format!("{prefix}.w2"), glorot(hidden, dim, rng))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, dim))?,
            ln_gamma: store.add(format!("{prefix}.ln.g"), Tensor::filled(1, dim, 1.0))?,
            ln_beta: store.add(format!("{prefix}.ln.b"), Tensor::zeros(1, dim))?,
        })
    }

    /// `layernorm(z + W2 relu(W1 z + b1) + b2)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
    ) -> Result<Var, ModelError> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(z, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add(h, b2)?;
        let res = tape.add(z, h)?;
        let g = tape.param(store, self.ln_gamma);
        let b = tape.param(store, self.ln_beta);
        Ok(tape.layer_norm(res, g, b, LN_EPS)?)
    }
}

/// One feature-extraction layer: parallel MPNN / self-attention /
/// external-attention streams summed through the FFN.
#[derive(Debug, Clone)]
pub struct GEAETLayer {
    pub mpnn: Option<MpnnLayer>,
    pub tlayer: Option<SelfAttentionLayer>,
    pub tlayer_ln: Option<(ParamId, ParamId)>,
    pub geanet: Option<GEANetBlock>,
    pub ffn: FeedForward,
    pub reads_mpnn_nodes: bool,
}

impl GEAETLayer {
    fn build<R: Rng>(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
        index: usize,
    ) -> Result<Self, ModelError> {
        let prefix = format!("l{index}");
        let mpnn = match cfg.mpnn {
            Some(kind) => Some(MpnnLayer::build(
                kind,
                cfg.hidden_dim,
                store,
                rng,
                &format!("{prefix}.mpnn"),
            )?),
            None => None,
        };
        let (tlayer, tlayer_ln) = if cfg.self_attention {
            let sa = SelfAttentionLayer::build(
                cfg.hidden_dim,
                cfg.self_heads,
                store,
                rng,
                &format!("{prefix}.attn"),
            )?;
            let g = store.add(
                format!("{prefix}.attn.ln.g"),
                Tensor::filled(1, cfg.hidden_dim, 1.0),
            )?;
            let b = store.add(format!("{prefix}.attn.ln.b"), Tensor::zeros(1, cfg.hidden_dim))?;
            (Some(sa), Some((g, b)))
        } else {
            (None, None)
        };
        let geanet = if cfg.geanet {
            Some(GEANetBlock::build(
                cfg.hidden_dim,
                cfg.unit_size,
                cfg.external_heads,
                cfg.toggles(),
                store,
                rng,
                &format!("{prefix}.gea"),
            )?)
        } else {
            None
        };
        let ffn = FeedForward::build(cfg.hidden_dim, store, rng, &format!("{prefix}.ffn"))?;
        Ok(Self {
            mpnn,
            tlayer,
            tlayer_ln,
            geanet,
            ffn,
            reads_mpnn_nodes: cfg.geanet_reads_mpnn_nodes,
        })
    }

    /// Computes `(X^{l+1}, E^{l+1})`. Disabled streams contribute their
    /// identity: the MPNN passes inputs through, self-attention and the
    /// external block contribute nothing.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        e: Var,
        input: &ModelInput,
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<(Var, Var), ModelError> {
        let (x_m, e_m) = match &self.mpnn {
            Some(layer) => layer.forward(tape, store, x, e, &input.src, &input.dst, input.n)?,
            None => (x, e),
        };
        let x_t = match &self.tlayer {
            Some(sa) => {
                let attn = sa.forward(tape, store, x, &input.node_seg, trace.as_deref_mut())?;
                let res = tape.add(x, attn)?;
                let (g, b) = self.tlayer_ln.expect("ln exists with tlayer");
                let gv = tape.param(store, g);
                let bv = tape.param(store, b);
                Some(tape.layer_norm(res, gv, bv, LN_EPS)?)
            }
            None => None,
        };
        let (x_g, e_next) = match &self.geanet {
            Some(block) => {
                let node_input = if self.reads_mpnn_nodes { x_m } else { x };
                let (xg, eg) = block.forward(
                    tape,
                    store,
                    node_input,
                    e_m,
                    &input.node_seg,
                    &input.edge_seg,
                    trace.as_deref_mut(),
                )?;
                (Some(xg), eg)
            }
            None => (None, e_m),
        };

        let mut z = x_m;
        if let Some(xt) = x_t {
            z = tape.add(z, xt)?;
        }
        if let Some(xg) = x_g {
            z = tape.add(z, xg)?;
        }
        let x_next = self.ffn.forward(tape, store, z)?;
        Ok((x_next, e_next))
    }
}

/// Task head: optional pooling followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub task: TaskKind,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PredictionHead {
    fn build<R: Rng>(
        task: TaskKind,
        dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            task,
            w1: store.add("head.w1", glorot(dim, dim, rng))?,
            b1: store.add("head.b1", Tensor::zeros(1, dim))?,
            w2: store.add("head.w2", glorot(dim, out_dim, rng))?,
            b2: store.add("head.b2", Tensor::zeros(1, out_dim))?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        input: &ModelInput,
    ) -> Result<Var, ModelError> {
        let pooled = match &input.readout {
            ReadoutSpec::PerNode => x,
            ReadoutSpec::TargetNodes(rows) => tape.gather_rows(x, rows)?,
            ReadoutSpec::MeanPool => {
                let sums = tape.scatter_add_rows(x, &input.node_seg, input.num_graphs)?;
                let mut counts = vec![0.0f64; input.num_graphs];
                for &g in &input.node_seg {
                    counts[g] += 1.0;
                }
                let inv: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
                tape.scale_rows(sums, &inv)?
            }
        };
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        Ok(tape.add(h, b2)?)
    }
}

/// Embedding, stacked layers, head.
#[derive(Debug, Clone)]
pub struct GEAETModel {
    pub config: ModelConfig,
    pub info: DatasetInfo,
    pub embedding: EmbeddingLayer,
    pub layers: Vec<GEAETLayer>,
    pub head: PredictionHead,
}

impl GEAETModel {
    /// Creates all parameters in a deterministic order. Unit toggles gate
    /// only the forward pass, and the positional-encoding projection is
    /// drawn last, so sibling configurations share identical draws for
    /// the parameters they have in common.
    pub fn build<R: Rng>(
        config: ModelConfig,
        info: DatasetInfo,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if info.node_vocab.is_empty() && info.node_dense_dim == 0 {
            return Err(ModelError::Schema("dataset has no node features".into()));
        }
        let mut embedding = EmbeddingLayer::build(&info, config.hidden_dim, store, rng)?;
        let layers = (0..config.layers)
            .map(|i| GEAETLayer::build(&config, store, rng, i))
            .collect::<Result<Vec<_>, _>>()?;
        let head = PredictionHead::build(
            info.task,
            config.hidden_dim,
            info.out_dim,
            store,
            rng,
        )?;
        if config.pe.kind != crate::posenc::PeKind::None {
            embedding.pe_proj =
                Some(store.add("emb.t0", glorot(config.pe.dim, config.hidden_dim, rng))?);
        }
        Ok(Self {
            config,
            info,
            embedding,
            layers,
            head,
        })
    }

    /// Full forward pass to task outputs: `n x C` logits for node tasks,
    /// one row per graph otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &ModelInput,
        mut traces: Option<&mut Vec<AttnTrace>>,
    ) -> Result<Var, ModelError> {
        let (mut x, mut e) = self.embedding.forward(tape, store, input)?;
        for layer in &self.layers {
            let trace = traces.as_deref_mut().map(|ts| {
                ts.push(AttnTrace::default());
                ts.last_mut().expect("just pushed")
            });
            let (nx, ne) = layer.forward(tape, store, x, e, input, trace)?;
            x = nx;
            e = ne;
        }
        self.head.forward(tape, store, x, input)
    }

    /// Task loss on a prepared batch; returns `(loss, outputs)`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &ModelInput,
    ) -> Result<(Var, Var), ModelError> {
        let outputs = self.forward(tape, store, input, None)?;
        let loss = match (&self.info.task, &input.labels) {
            (TaskKind::NodeClassify | TaskKind::GraphClassify, LabelData::Classes(labels)) => {
                tape.cross_entropy(outputs, labels)?
            }
            (TaskKind::GraphRegress, LabelData::Values(target)) => {
                let t = tape.constant(target.clone());
                tape.l1_loss(outputs, t)?
            }
            _ => return Err(ModelError::Task("labels do not match the task".into())),
        };
        Ok((loss, outputs))
    }
}
