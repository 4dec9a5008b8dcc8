//! Timed training runs and the worker pool for experiment cells. Cells are
//! independent deterministic runs, so parallel execution (capped by the
//! LMAM_THREADS environment variable) cannot change any result, and outputs
//! are collected in cell order regardless of completion order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use lmam_core::metrics::Metrics;
use lmam_core::model::{assemble_model, ExperimentConfig, Model};
use lmam_core::rng::Rng;
use lmam_core::synth::Dialogue;
use lmam_core::train::{evaluate, shuffle_rng, train_epoch, Optimizer};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_weighted_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_weighted_f1: Option<f64>,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub train_seconds: f64,
    pub train_metrics: Metrics,
    pub val_metrics: Option<Metrics>,
    pub test_metrics: Option<Metrics>,
}

/// Trains a model described by `config` and reports per-epoch wall time.
pub fn run_training(
    config: &ExperimentConfig,
    num_classes: usize,
    train_split: &[Dialogue],
    val_split: Option<&[Dialogue]>,
    test_split: Option<&[Dialogue]>,
) -> Result<TrainOutcome, CliError> {
    let mut init_rng = Rng::new(config.seed);
    let mut model = assemble_model(config, num_classes, &mut init_rng)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = shuffle_rng(config.seed);

    let started = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let loss = train_epoch(&mut model, train_split, config.batch_size, &mut optimizer, &mut rng, epoch)?;
        let train_metrics = evaluate(&model, train_split)?;
        let val_metrics = val_split.map(|v| evaluate(&model, v)).transpose()?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss,
            train_accuracy: train_metrics.accuracy,
            train_weighted_f1: train_metrics.weighted_f1,
            val_accuracy: val_metrics.as_ref().map(|m| m.accuracy),
            val_weighted_f1: val_metrics.as_ref().map(|m| m.weighted_f1),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    let train_seconds = started.elapsed().as_secs_f64();

    let train_metrics = evaluate(&model, train_split)?;
    let val_metrics = val_split.map(|v| evaluate(&model, v)).transpose()?;
    let test_metrics = test_split.map(|t| evaluate(&model, t)).transpose()?;
    Ok(TrainOutcome { model, log, train_seconds, train_metrics, val_metrics, test_metrics })
}

/// Worker cap from LMAM_THREADS (default 1).
pub fn worker_threads() -> usize {
    std::env::var("LMAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, 64)
}

/// Runs `jobs` closures over a small worker pool; the output vector is in
/// job order. Jobs must not depend on each other.
pub fn parallel_map<T, F>(jobs: usize, worker: F) -> Vec<Result<T, CliError>>
where
    T: Send,
    F: Fn(usize) -> Result<T, CliError> + Sync,
{
    let threads = worker_threads().min(jobs.max(1));
    let results: Mutex<Vec<Option<Result<T, CliError>>>> =
        Mutex::new((0..jobs).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= jobs {
                    break;
                }
                let out = worker(idx);
                results.lock().expect("result lock").get_mut(idx).map(|slot| *slot = Some(out));
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|slot| slot.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::parallel_map;

    #[test]
    fn parallel_map_preserves_job_order() {
        let out = parallel_map(10, |i| Ok::<usize, crate::CliError>(i * i));
        let values: Vec<usize> = out.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(values, (0..10).map(|i| i * i).collect::<Vec<_>>());
    }
}
