//! Decoupled-weight-decay Adam, the warmup-cosine schedule, metrics and
//! the training/evaluation loops.
//!
//! Runs are fully deterministic in `(config, seed)`: generation,
//! initialization, shuffling and sign flips all draw from seeded
//! streams, and every numeric kernel is single-threaded.

use crate::config::{ConfigError, RunConfig};
use crate::graph::{batch, DatasetInfo, Graph, GraphError, TaskKind};
use crate::model::{GEAETModel, LabelData, ModelError, ModelInput};
use crate::params::ParamStore;
use crate::posenc::{compute_pe, random_sign_flips, PeKind, PosEncError};
use crate::tensor::{Tensor, TensorError, Tape};
use crate::util::shuffle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    PosEnc(#[from] PosEncError),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("epoch {epoch} out of schedule range {total}")]
    EpochOutOfRange { epoch: usize, total: usize },
}

/// AdamW optimizer state: first/second moments per parameter plus the
/// shared step counter. Weight decay is decoupled, applied directly to
/// the parameters rather than folded into the gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: store
                .ids()
                .map(|id| {
                    let len = store.tensor(id).data().len();
                    (vec![0.0; len], vec![0.0; len])
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let tensor = store.tensor_mut(id);
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let (m, v) = &mut self.moments[pi];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, epoch: usize) -> Result<f64, TrainError> {
        if epoch >= self.total_epochs {
            return Err(TrainError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let progress =
            (epoch - self.warmup_epochs) as f64 / (self.total_epochs - self.warmup_epochs) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Fraction of rows whose argmax matches the label; ties resolve to the
/// lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len(), "one label per row");
    if labels.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Mean absolute error over all entries.
pub fn mae(pred: &Tensor, target: &Tensor) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    let n = pred.data().len();
    if n == 0 {
        return 0.0;
    }
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n as f64
}

/// One per-epoch record of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
}

/// Serialized run output: configuration, learning curves, final test
/// metric, total multiply-adds and wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub curves: Vec<EpochRecord>,
    pub test_metric: f64,
    pub flops: u64,
    pub seconds: f64,
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: GEAETModel,
    pub info: DatasetInfo,
    /// Parameters from the best-validation epoch (last epoch when there
    /// is no validation split).
    pub best_params: ParamStore,
    /// Parameters as of the final step.
    pub final_params: ParamStore,
    /// Running train metric per epoch (from pre-update step outputs).
    pub train_metrics: Vec<f64>,
}

struct Prepared {
    graphs: Vec<Graph>,
    pes: Vec<Option<Tensor>>,
}

fn prepare(graphs: &[Graph], model_pe: &crate::posenc::PosEncConfig) -> Result<Prepared, TrainError> {
    let pes = graphs
        .iter()
        .map(|g| compute_pe(g, model_pe))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prepared {
        graphs: graphs.to_vec(),
        pes,
    })
}

fn stack_pe(set: &Prepared, order: &[usize], flip: Option<&mut ChaCha8Rng>) -> Option<Tensor> {
    let first = set.pes.first()?.as_ref()?;
    let cols = first.cols();
    let mut rows = Vec::new();
    let mut n = 0;
    for &i in order {
        let pe = set.pes[i].as_ref().expect("uniform pe presence");
        rows.extend_from_slice(pe.data());
        n += pe.rows();
    }
    let stacked = Tensor::new(n, cols, rows).expect("pe stack");
    Some(match flip {
        Some(rng) => random_sign_flips(&stacked, rng),
        None => stacked,
    })
}

fn input_for(
    set: &Prepared,
    order: &[usize],
    info: &DatasetInfo,
    flip: Option<&mut ChaCha8Rng>,
) -> Result<ModelInput, TrainError> {
    let graphs: Vec<Graph> = order.iter().map(|&i| set.graphs[i].clone()).collect();
    let b = batch(&graphs)?;
    let pe = stack_pe(set, order, flip);
    Ok(ModelInput::from_batch(&b, info, pe)?)
}

/// Task metric on step outputs: accuracy for classification, negative
/// MAE for regression (so that larger is always better).
fn metric_of(info: &DatasetInfo, outputs: &Tensor, labels: &LabelData) -> (f64, usize) {
    match (info.task, labels) {
        (TaskKind::NodeClassify | TaskKind::GraphClassify, LabelData::Classes(l)) => {
            (accuracy(outputs, l), l.len())
        }
        (TaskKind::GraphRegress, LabelData::Values(t)) => (-mae(outputs, t), t.rows()),
        _ => unreachable!("labels checked at input construction"),
    }
}

/// Whole-split evaluation; `None` on an empty split. Returns the raw
/// metric (accuracy, or negative MAE for regression).
fn evaluate(
    model: &GEAETModel,
    store: &ParamStore,
    set: &Prepared,
    info: &DatasetInfo,
    batch_size: usize,
) -> Result<Option<f64>, TrainError> {
    if set.graphs.is_empty() {
        return Ok(None);
    }
    let order: Vec<usize> = (0..set.graphs.len()).collect();
    let mut weighted = 0.0;
    let mut total = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let input = input_for(set, chunk, info, None)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &input, None)?;
        let (metric, items) = metric_of(info, tape.value(out), &input.labels);
        weighted += metric * items as f64;
        total += items;
    }
    Ok(Some(weighted / total.max(1) as f64))
}

/// Convenience wrapper evaluating a raw graph list.
pub fn evaluate_graphs(
    model: &GEAETModel,
    store: &ParamStore,
    graphs: &[Graph],
    info: &DatasetInfo,
    batch_size: usize,
) -> Result<Option<f64>, TrainError> {
    let set = prepare(graphs, &model.config.pe)?;
    evaluate(model, store, &set, info, batch_size)
}

/// Runs a full training loop per the config. Keeps the best-validation
/// checkpoint; aborts with a diagnostic on non-finite loss.
pub fn train(config: &RunConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let wall = Instant::now();
    let split = config.data.build(config.seed)?;
    let info = DatasetInfo::from_split(&split)?;

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = GEAETModel::build(config.model.clone(), info.clone(), &mut store, &mut init_rng)?;

    let train_set = prepare(&split.train, &config.model.pe)?;
    let valid_set = prepare(&split.valid, &config.model.pe)?;
    let test_set = prepare(&split.test, &config.model.pe)?;

    let schedule = CosineSchedule {
        base_lr: config.train.base_lr,
        warmup_epochs: config.train.warmup_epochs,
        total_epochs: config.train.epochs,
    };
    let mut optimizer = AdamW::new(&store, config.train.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x51AB));
    let mut flip_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xF11B));
    let sign_flip = config.model.pe.sign_flip && config.model.pe.kind == PeKind::Lappe;

    let mut curves = Vec::new();
    let mut train_metrics = Vec::new();
    let mut best_params = store.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut total_flops = 0u64;

    for epoch in 0..config.train.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..train_set.graphs.len()).collect();
        shuffle(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut metric_sum = 0.0;
        let mut item_count = 0usize;
        for (step, chunk) in order.chunks(config.train.batch_size).enumerate() {
            let flip = sign_flip.then_some(&mut flip_rng);
            let input = input_for(&train_set, chunk, &info, flip)?;
            store.zero_grads();
            let mut tape = Tape::new();
            let (loss, outputs) = model.loss(&mut tape, &store, &input)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            let (metric, items) = metric_of(&info, tape.value(outputs), &input.labels);
            tape.backward(loss)?;
            tape.write_param_grads(&mut store);
            optimizer.step(&mut store, lr);
            total_flops += tape.flops();
            loss_sum += loss_val * items as f64;
            metric_sum += metric * items as f64;
            item_count += items;
        }
        let train_loss = loss_sum / item_count.max(1) as f64;
        let train_metric = metric_sum / item_count.max(1) as f64;
        train_metrics.push(train_metric);

        let val_metric = evaluate(&model, &store, &valid_set, &info, config.train.batch_size)?;
        match val_metric {
            Some(v) => {
                if v > best_val {
                    best_val = v;
                    best_params = store.clone();
                }
            }
            // No validation split: the latest parameters are the best.
            None => best_params = store.clone(),
        }
        curves.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_metric: val_metric.unwrap_or(f64::NAN),
        });

        if let Some(target) = config.train.early_stop_train_metric {
            if train_metric >= target {
                break;
            }
        }
    }

    let test_metric = evaluate(&model, &best_params, &test_set, &info, config.train.batch_size)?
        .unwrap_or(f64::NAN);

    Ok(TrainOutcome {
        report: RunReport {
            config: config.clone(),
            curves,
            test_metric,
            flops: total_flops,
            seconds: wall.elapsed().as_secs_f64(),
        },
        model,
        info,
        best_params,
        final_params: store,
        train_metrics,
    })
}
