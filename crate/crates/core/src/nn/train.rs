//! Seeded mini-batch training loop and the hyperparameter sweep.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{softmax_cross_entropy, Dataset, Mode, Model, Optimizer, OptimizerKind, Schedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// SGD momentum; ignored by Adam.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_schedule")]
    pub scheduler: Schedule,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            momentum: default_momentum(),
            scheduler: default_schedule(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

/// Accuracies are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub final_train_acc: f64,
    pub final_test_acc: Option<f64>,
    /// Sum of the epoch times.
    pub total_seconds: f64,
}

impl TrainLog {
    /// Test accuracy when a test set was given, train accuracy otherwise.
    pub fn final_acc(&self) -> f64 {
        self.final_test_acc.unwrap_or(self.final_train_acc)
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = logits.inner_len();
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Packed-kernel accuracy over `data` in chunks.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0.0;
    for chunk in idx.chunks(512) {
        let part = data.subset(chunk);
        let logits = model.forward(&part.x)?;
        hits += accuracy(&logits, &part.y) * chunk.len() as f64;
    }
    Ok(if data.is_empty() { 0.0 } else { hits / data.len() as f64 })
}

/// Trains `model` in place. The shuffle order is drawn from `cfg.seed`, so
/// equal seeds and initial models give identical logs (apart from timings).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.momentum);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in idx.chunks(cfg.batch_size) {
            let b = data.subset(batch);
            let (logits, tape) = model.forward_tape(&b.x, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &b.y)?;
            let l = loss.to_f64().unwrap_or(f64::NAN);
            if !l.is_finite() {
                return Err(Error::Diverged { step, loss: l });
            }
            loss_sum += l * batch.len() as f64;
            let grads = model.backward(&tape, &dlogits)?;
            let gs: Vec<Vec<T>> = grads.slots(model).into_iter().map(<[T]>::to_vec).collect();
            model.update_running(&tape);
            let lr = T::lit(cfg.scheduler.rate(cfg.learning_rate, step, total));
            opt.begin_step();
            for (slot, (p, g)) in model.param_slots_mut().into_iter().zip(&gs).enumerate() {
                if p.len() == g.len() {
                    opt.update(slot, lr, p, g);
                }
            }
            step += 1;
        }
        let train_acc = evaluate(model, data)?;
        let test_acc = test.map(|t| evaluate(model, t)).transpose()?;
        epochs.push(EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {:.4} train {:.3}", loss_sum / data.len() as f64, train_acc);
    }
    let last = epochs.last().expect("at least one epoch");
    Ok(TrainLog {
        final_train_acc: last.train_acc,
        final_test_acc: last.test_acc,
        total_seconds: epochs.iter().map(|e| e.seconds).sum(),
        epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub config: TrainConfig,
    pub accuracy: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Accuracies of the cells that finished, in grid order.
    pub accuracies: Vec<f64>,
    /// Sample standard deviation of `accuracies`; 0 for a single value.
    pub std: f64,
}

pub(crate) fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Trains a fresh copy of `template` per grid cell, in parallel. Failed
/// cells keep their error and are left out of the statistics.
pub fn hyper_sweep<T: Scalar>(
    template: &Model<T>,
    data: &Dataset<T>,
    test: Option<&Dataset<T>>,
    grid: &[TrainConfig],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|cfg| {
            let mut m = template.clone();
            match train(&mut m, data, test, cfg) {
                Ok(log) => SweepCell {
                    config: cfg.clone(),
                    accuracy: Some(log.final_acc()),
                    seconds: log.total_seconds,
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep cell {cfg:?} failed: {e}");
                    SweepCell {
                        config: cfg.clone(),
                        accuracy: None,
                        seconds: 0.0,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let accuracies: Vec<f64> = cells.iter().filter_map(|c| c.accuracy).collect();
    Ok(SweepResult {
        std: sample_std(&accuracies),
        accuracies,
        cells,
    })
}
