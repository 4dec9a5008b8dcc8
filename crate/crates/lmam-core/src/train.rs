//! Minibatch training on utterance labels: dialogues are shuffled into
//! batches, gradients accumulate across the dialogues of a batch, and one
//! optimizer step is taken per batch. Deterministic given the seed.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{Model, OptimizerKind};
use crate::nn::{argmax_rows, cross_entropy};
use crate::param::Param;
use crate::rng::Rng;
use crate::synth::Dialogue;

pub struct Sgd {
    pub learning_rate: f64,
}

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { learning_rate }),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(learning_rate)),
        }
    }

    /// Applies one update from the accumulated gradients. Parameter order is
    /// the model's stable visiting order, which keeps Adam state aligned.
    pub fn step(&mut self, model: &mut Model) {
        match self {
            Optimizer::Sgd(sgd) => {
                let lr = sgd.learning_rate;
                model.visit_params_mut(&mut |_, p: &mut Param| {
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                });
            }
            Optimizer::Adam(adam) => {
                adam.step += 1;
                let t = adam.step;
                let (b1, b2, eps, lr) = (adam.beta1, adam.beta2, adam.eps, adam.learning_rate);
                let bias1 = 1.0 - libm::pow(b1, t as f64);
                let bias2 = 1.0 - libm::pow(b2, t as f64);
                let mut idx = 0usize;
                let first = &mut adam.first;
                let second = &mut adam.second;
                model.visit_params_mut(&mut |_, p: &mut Param| {
                    if first.len() == idx {
                        first.push(alloc::vec![0.0; p.len()]);
                        second.push(alloc::vec![0.0; p.len()]);
                    }
                    let m = &mut first[idx];
                    let v = &mut second[idx];
                    for (k, (val, g)) in
                        p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate()
                    {
                        m[k] = b1 * m[k] + (1.0 - b1) * g;
                        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                        let m_hat = m[k] / bias1;
                        let v_hat = v[k] / bias2;
                        *val -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                    }
                    idx += 1;
                });
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_weighted_f1: f64,
    pub val_accuracy: Option<f64>,
    pub val_weighted_f1: Option<f64>,
}

/// Runs one epoch of minibatch training. Returns the mean per-utterance loss.
/// Aborts with a numeric error naming the epoch and learning rate if the loss
/// stops being finite.
pub fn train_epoch(
    model: &mut Model,
    dialogues: &[Dialogue],
    batch_size: usize,
    optimizer: &mut Optimizer,
    rng: &mut Rng,
    epoch: usize,
) -> Result<f64> {
    if dialogues.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    rng.shuffle(&mut order);

    let lr = match optimizer {
        Optimizer::Sgd(s) => s.learning_rate,
        Optimizer::Adam(a) => a.learning_rate,
    };
    let mut total_loss = 0.0;
    let mut total_utterances = 0usize;
    for batch in order.chunks(batch_size) {
        let batch_utterances: usize =
            batch.iter().map(|&i| dialogues[i].features.len()).sum();
        model.zero_grad();
        let mut batch_loss = 0.0;
        for &i in batch {
            let feats = &dialogues[i].features;
            let logits = model.forward(feats)?;
            let scale = 1.0 / batch_utterances as f64;
            let (loss, d_logits) = cross_entropy(&logits, &feats.labels, scale)?;
            batch_loss += loss;
            model.backward(&d_logits)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged (non-finite) at epoch {epoch} with learning rate {lr}"
            )));
        }
        optimizer.step(model);
        total_loss += batch_loss * batch_utterances as f64;
        total_utterances += batch_utterances;
    }
    Ok(total_loss / total_utterances as f64)
}

/// Accuracy and F1 of `model` over a split.
pub fn evaluate(model: &Model, dialogues: &[Dialogue]) -> Result<Metrics> {
    if dialogues.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for d in dialogues {
        let logits = model.infer(&d.features)?;
        let predictions = argmax_rows(&logits);
        cm.record_all(&d.features.labels, &predictions);
    }
    cm.metrics()
}

/// Dedicated shuffle stream derived from the run seed, decoupled from data
/// generation and weight initialization.
pub fn shuffle_rng(seed: u64) -> Rng {
    Rng::new(seed ^ 0x5851_f42d_4c95_7f2d)
}

/// Convenience end-to-end training loop (no wall-clock timing; the CLI layer
/// adds that).
pub fn train(
    model: &mut Model,
    train_split: &[Dialogue],
    val_split: Option<&[Dialogue]>,
    epochs: usize,
    batch_size: usize,
    optimizer: &mut Optimizer,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    let mut rng = shuffle_rng(seed);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = train_epoch(model, train_split, batch_size, optimizer, &mut rng, epoch)?;
        let train_metrics = evaluate(model, train_split)?;
        let val_metrics = val_split.map(|v| evaluate(model, v)).transpose()?;
        log.push(EpochStats {
            epoch,
            train_loss: loss,
            train_accuracy: train_metrics.accuracy,
            train_weighted_f1: train_metrics.weighted_f1,
            val_accuracy: val_metrics.as_ref().map(|m| m.accuracy),
            val_weighted_f1: val_metrics.as_ref().map(|m| m.weighted_f1),
        });
    }
    Ok(log)
}
