//! Mini-batch SGD with momentum and weight decay, the epoch loop, the
//! plateau learning-rate schedule, snapshot capture, and fine-tuning.
//!
//! The update rule per scalar is
//!
//! ```text
//! v_w := alpha * v_w - beta * eta * w - eta * dE/dw ;  w := w + v_w
//! v_b := alpha * v_b                 - eta * dE/db ;  b := b + v_b
//! ```
//!
//! with learning rate `eta`, momentum coefficient `alpha`, and weight-decay
//! coefficient `beta`. The decay term applies to weights only, never biases.
//! With `alpha = 0` and `beta = 0` this is plain SGD, `w := w - eta * dE/dw`,
//! bit for bit.
//!
//! Batch gradients are averaged (not summed) over the mini-batch, so the
//! learning rate keeps its meaning across batch sizes.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{mix, LabeledImage};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, CurvePoint};
use crate::network::{
    self, DropoutConfig, Mode, NetworkParams, NetworkSpec, TensorRole,
};

/// Plateau rule for reducing the learning rate: reduce when the training
/// error rate stabilizes. The window and factor below make that rule
/// concrete and deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Multiplier applied on a plateau.
    pub factor: f64,
    /// Window length (epochs) that must show no improvement.
    pub patience: usize,
    /// Minimum absolute drop in training error rate that counts as
    /// improvement.
    pub min_improvement: f64,
    /// At most this many reductions per run.
    pub max_reductions: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            factor: 0.5,
            patience: 5,
            min_improvement: 0.001,
            max_reductions: 3,
        }
    }
}

/// Training hyperparameters. The defaults are the reference values:
/// learning rate 0.01, mini-batch 113, momentum 0.9, weight decay 0.0005,
/// dropout 0, 100 epochs, snapshots at epochs 75/85/95/100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub mini_batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_ratio: f64,
    pub max_epochs: usize,
    pub snapshot_epochs: Vec<usize>,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            mini_batch_size: 113,
            momentum: 0.9,
            weight_decay: 0.0005,
            dropout_ratio: 0.0,
            max_epochs: 100,
            snapshot_epochs: vec![75, 85, 95, 100],
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.mini_batch_size == 0 {
            return Err(Error::Config("mini-batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum coefficient must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay coefficient must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        DropoutConfig {
            ratio: self.dropout_ratio,
        }
        .validate()?;
        if !(0.0 < self.schedule.factor && self.schedule.factor < 1.0) {
            return Err(Error::Config(format!(
                "schedule factor must lie in (0, 1), got {}",
                self.schedule.factor
            )));
        }
        if self.schedule.patience == 0 {
            return Err(Error::Config("schedule patience must be positive".into()));
        }
        for &epoch in &self.snapshot_epochs {
            if epoch == 0 || epoch > self.max_epochs {
                return Err(Error::Config(format!(
                    "snapshot epoch {epoch} outside 1..={}",
                    self.max_epochs
                )));
            }
        }
        Ok(())
    }
}

/// All mutable training state: parameters, per-parameter velocities, the
/// current learning rate, and the per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: NetworkParams,
    pub spec: NetworkSpec,
    pub velocity: NetworkParams,
    pub learning_rate: f64,
    pub epoch: usize,
    pub history: Vec<CurvePoint>,
    pub reductions: u32,
    pub last_reduction_epoch: Option<usize>,
}

impl TrainState {
    /// Fresh state around the given parameters; velocities start at zero.
    pub fn new(params: NetworkParams, spec: NetworkSpec, config: &TrainConfig) -> Self {
        let velocity = params.zeros_like();
        TrainState {
            params,
            spec,
            velocity,
            learning_rate: config.learning_rate,
            epoch: 0,
            history: Vec::new(),
            reductions: 0,
            last_reduction_epoch: None,
        }
    }
}

/// A model captured mid-run: the serialized network plus the epoch it was
/// taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub data: Vec<u8>,
}

impl Snapshot {
    pub fn capture(state: &TrainState) -> Result<Snapshot> {
        Ok(Snapshot {
            epoch: state.epoch,
            data: network::serialize(&state.params, &state.spec)?,
        })
    }

    pub fn params_and_spec(&self) -> Result<(NetworkParams, NetworkSpec)> {
        network::deserialize(&self.data)
    }

    /// Writes the snapshot under `dir` as `snapshot-ep{epoch}.cnnm`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("snapshot-ep{:04}.cnnm", self.epoch));
        std::fs::write(&path, &self.data).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a snapshot file; the epoch is recovered from the
    /// `snapshot-ep{N}` file name when present, otherwise 0.
    pub fn read_from(path: &Path) -> Result<Snapshot> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        network::deserialize(&data)?;
        let epoch = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("snapshot-ep"))
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(0);
        Ok(Snapshot { epoch, data })
    }
}

/// Cross-entropy `-sum_j y_j ln(y_hat_j)` for a one-hot target, which reduces
/// to `-ln(y_hat_true)`. Probabilities are clamped below at 1e-12 before the
/// logarithm.
pub fn cross_entropy(probs: &[f64], label: &[f64]) -> Result<f64> {
    if probs.len() != label.len() {
        return Err(Error::ShapeMismatch {
            axis: "label length",
            expected: probs.len(),
            actual: label.len(),
        });
    }
    let mut true_index: Option<usize> = None;
    for (i, &y) in label.iter().enumerate() {
        if y == 1.0 {
            if true_index.is_some() {
                return Err(Error::InvalidInput("label is not one-hot: multiple ones".into()));
            }
            true_index = Some(i);
        } else if y != 0.0 {
            return Err(Error::InvalidInput(format!(
                "label is not one-hot: entry {i} is {y}"
            )));
        }
    }
    match true_index {
        Some(i) => Ok(cross_entropy_index(probs, i)),
        None => Err(Error::InvalidInput("label is not one-hot: no one".into())),
    }
}

/// Cross-entropy against a class index.
pub fn cross_entropy_index(probs: &[f64], true_class: usize) -> f64 {
    -probs[true_class].max(1e-12).ln()
}

/// One optimizer step over averaged batch gradients: the momentum update
/// with weight decay on weights and no decay on biases. Velocities persist
/// in the state across steps.
pub fn update_step(
    state: &mut TrainState,
    gradients: &NetworkParams,
    config: &TrainConfig,
) -> Result<()> {
    let eta = state.learning_rate;
    let alpha = config.momentum;
    let beta = config.weight_decay;
    let mut params = state.params.tensors_mut();
    let mut velocity = state.velocity.tensors_mut();
    let grads = gradients.tensors();
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            axis: "gradient tensors",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (((role, w), (_, v)), (_, g)) in params.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
        if w.len() != g.len() {
            return Err(Error::ShapeMismatch {
                axis: "gradient tensor length",
                expected: w.len(),
                actual: g.len(),
            });
        }
        match role {
            TensorRole::Weight => {
                for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *v = alpha * *v - beta * eta * *w - eta * g;
                    *w += *v;
                }
            }
            TensorRole::Bias => {
                for ((b, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *v = alpha * *v - eta * g;
                    *b += *v;
                }
            }
        }
    }
    Ok(())
}

/// What one epoch produced.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub train_mca: f64,
    pub update_steps: usize,
}

/// Per-sample gradients within a batch are computed in fixed-size chunks and
/// reduced in chunk order, so the result does not depend on how many threads
/// ran.
const REDUCTION_CHUNK: usize = 16;

struct ChunkResult {
    grads: NetworkParams,
    loss_sum: f64,
    predictions: Vec<(usize, usize)>, // (true label, predicted)
}

/// One full pass over the training set: shuffle with an epoch-derived seed,
/// partition into mini-batches (the final short batch is processed, not
/// dropped), average per-sample gradients, and apply one update per batch.
/// Records the epoch's mean loss and training MCA into the history.
pub fn train_epoch(
    state: &mut TrainState,
    train: &[LabeledImage],
    config: &TrainConfig,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let classes = state.spec.class_count()?;
    for sample in train {
        if sample.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: sample.label,
                classes,
            });
        }
    }
    state.epoch += 1;
    let epoch_seed = mix(config.seed, state.epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

    let dropout = DropoutConfig {
        ratio: config.dropout_ratio,
    };
    let mut confusion = ConfusionMatrix::new(classes)?;
    let mut loss_sum = 0.0;
    let mut update_steps = 0usize;

    for (batch_index, batch) in order.chunks(config.mini_batch_size).enumerate() {
        let chunk_results: Vec<Result<ChunkResult>> = batch
            .par_chunks(REDUCTION_CHUNK)
            .enumerate()
            .map(|(chunk_index, chunk)| {
                let mut grads = state.params.zeros_like();
                let mut loss_sum = 0.0;
                let mut predictions = Vec::with_capacity(chunk.len());
                for (offset, &sample_index) in chunk.iter().enumerate() {
                    let ordinal =
                        batch_index * config.mini_batch_size + chunk_index * REDUCTION_CHUNK + offset;
                    let sample = &train[sample_index];
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(epoch_seed, ordinal as u64));
                    let trace = network::forward(
                        &state.params,
                        &state.spec,
                        &sample.image,
                        &dropout,
                        Mode::Train,
                        &mut rng,
                    )?;
                    loss_sum += cross_entropy_index(&trace.probabilities, sample.label);
                    predictions.push((sample.label, argmax(&trace.probabilities)));
                    let mut label = vec![0.0; classes];
                    label[sample.label] = 1.0;
                    let sample_grads =
                        network::backward(&trace, &state.params, &state.spec, &label)?;
                    grads.add_in_place(&sample_grads)?;
                }
                Ok(ChunkResult {
                    grads,
                    loss_sum,
                    predictions,
                })
            })
            .collect();

        let mut batch_grads = state.params.zeros_like();
        for result in chunk_results {
            let chunk = result?;
            batch_grads.add_in_place(&chunk.grads)?;
            loss_sum += chunk.loss_sum;
            for (true_label, predicted) in chunk.predictions {
                confusion.accumulate(true_label, predicted)?;
            }
        }
        batch_grads.scale(1.0 / batch.len() as f64);
        update_step(state, &batch_grads, config)?;
        update_steps += 1;
    }

    let stats = EpochStats {
        mean_loss: loss_sum / train.len() as f64,
        train_mca: metrics::mca(&confusion)?,
        update_steps,
    };
    state.history.push(CurvePoint {
        epoch: state.epoch,
        learning_rate: state.learning_rate,
        train_loss: stats.mean_loss,
        train_mca: stats.train_mca,
        validation_mca: None,
    });
    Ok(stats)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Applies the plateau rule: if the best training error rate within the last
/// `patience` epochs did not undercut the best error rate as of the window
/// start by at least `min_improvement`, the learning rate is multiplied by
/// `factor`. At most `max_reductions` reductions fire per run, with a
/// `patience`-epoch cooldown after each.
pub fn lr_schedule_step(state: &mut TrainState, config: &TrainConfig) {
    let schedule = &config.schedule;
    if state.reductions >= schedule.max_reductions {
        return;
    }
    let n = state.history.len();
    if n < schedule.patience {
        return;
    }
    if let Some(last) = state.last_reduction_epoch {
        if state.epoch.saturating_sub(last) < schedule.patience {
            return;
        }
    }
    let errors: Vec<f64> = state.history.iter().map(|p| 1.0 - p.train_mca).collect();
    let window_start = n - schedule.patience;
    let baseline = errors[..=window_start]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let best_recent = errors[window_start + 1..]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if best_recent > baseline - schedule.min_improvement {
        state.learning_rate *= schedule.factor;
        state.reductions += 1;
        state.last_reduction_epoch = Some(state.epoch);
    }
}

/// Runs eval-mode predictions over a labeled set and returns the confusion
/// matrix and its MCA.
pub fn evaluate_model(
    params: &NetworkParams,
    spec: &NetworkSpec,
    set: &[LabeledImage],
) -> Result<(ConfusionMatrix, f64)> {
    let classes = spec.class_count()?;
    let mut confusion = ConfusionMatrix::new(classes)?;
    let predictions: Vec<Result<(usize, usize)>> = set
        .par_iter()
        .map(|sample| {
            let trace = network::forward(
                params,
                spec,
                &sample.image,
                &DropoutConfig::disabled(),
                Mode::Eval,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?;
            Ok((sample.label, argmax(&trace.probabilities)))
        })
        .collect();
    for p in predictions {
        let (true_label, predicted) = p?;
        confusion.accumulate(true_label, predicted)?;
    }
    let mca = metrics::mca(&confusion)?;
    Ok((confusion, mca))
}

/// Trains from a fresh initialization: runs `max_epochs` epochs, evaluates
/// validation MCA after each, applies the schedule, and captures snapshots
/// at the configured epochs.
pub fn fit(
    spec: &NetworkSpec,
    config: &TrainConfig,
    train: &[LabeledImage],
    validation: &[LabeledImage],
) -> Result<(TrainState, Vec<Snapshot>)> {
    config.validate()?;
    let params = network::init_params(spec, config.seed)?;
    fit_from(params, spec.clone(), config, train, validation)
}

/// The shared epoch loop behind [`fit`] and [`finetune`]; starts from the
/// given parameters with zeroed velocities.
pub fn fit_from(
    params: NetworkParams,
    spec: NetworkSpec,
    config: &TrainConfig,
    train: &[LabeledImage],
    validation: &[LabeledImage],
) -> Result<(TrainState, Vec<Snapshot>)> {
    config.validate()?;
    let mut state = TrainState::new(params, spec, config);
    let mut snapshots = Vec::new();
    for epoch in 1..=config.max_epochs {
        train_epoch(&mut state, train, config)?;
        if !validation.is_empty() {
            let (_, val_mca) = evaluate_model(&state.params, &state.spec, validation)?;
            if let Some(last) = state.history.last_mut() {
                last.validation_mca = Some(val_mca);
            }
        }
        lr_schedule_step(&mut state, config);
        if config.snapshot_epochs.contains(&epoch) {
            snapshots.push(Snapshot::capture(&state)?);
        }
    }
    Ok((state, snapshots))
}

/// Fine-tuning: restarts training from a pretrained snapshot on a new
/// training set, updating every layer. Velocities are zeroed; only the
/// weights transfer. The new dataset must have exactly as many classes as
/// the snapshot has outputs.
pub fn finetune(
    pretrained: &Snapshot,
    dataset_classes: usize,
    config: &TrainConfig,
    train: &[LabeledImage],
    validation: &[LabeledImage],
) -> Result<(TrainState, Vec<Snapshot>)> {
    let (params, spec) = pretrained.params_and_spec()?;
    let snapshot_classes = spec.class_count()?;
    if snapshot_classes != dataset_classes {
        return Err(Error::ClassCountMismatch {
            snapshot: snapshot_classes,
            dataset: dataset_classes,
        });
    }
    fit_from(params, spec, config, train, validation)
}
