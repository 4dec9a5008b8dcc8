//! `lmam train` / `lmam eval`: single training runs with a checkpoint, and
//! re-evaluation of saved checkpoints. Evaluating a checkpoint on the same
//! split reproduces the training report's metrics exactly.

use lmam_core::train::evaluate;

use crate::checkpoint::Checkpoint;
use crate::cli::{EvalArgs, TrainArgs};
use crate::dataset::load_dataset;
use crate::error::CliError;
use crate::report::{OutDir, RunReport};
use crate::runner::run_training;

pub const LOG_HEADER: &str =
    "epoch,train_loss,train_accuracy,train_weighted_f1,val_accuracy,val_weighted_f1,wall_ms";

pub fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset)?;
    let config = args.config.resolve(dataset.manifest.dims())?;
    let outcome = run_training(
        &config,
        dataset.manifest.num_classes,
        &dataset.train,
        Some(&dataset.val),
        Some(&dataset.test),
    )?;

    let out = OutDir::create(&args.out)?;
    let log_rows: Vec<String> = outcome
        .log
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.train_accuracy,
                e.train_weighted_f1,
                e.val_accuracy.map(|v| v.to_string()).unwrap_or_default(),
                e.val_weighted_f1.map(|v| v.to_string()).unwrap_or_default(),
                e.wall_ms
            )
        })
        .collect();
    out.write_csv("training_log.csv", LOG_HEADER, &log_rows)?;

    let checkpoint_dir = out.checkpoints()?;
    let checkpoint_path = checkpoint_dir.join("model.json");
    Checkpoint::capture(&outcome.model, config.epochs).save(&checkpoint_path)?;

    let mut report = RunReport::new("train").with_config(&config)?;
    report.seed = Some(config.seed);
    report.metric("train", &outcome.train_metrics);
    if let Some(val) = &outcome.val_metrics {
        report.metric("val", val);
    }
    if let Some(test) = &outcome.test_metrics {
        report.metric("test", test);
    }
    report.timings_ms.insert("train_total".into(), outcome.train_seconds * 1e3);
    report
        .parameter_counts
        .insert("fusion".into(), outcome.model.fusion().fusion_parameter_count() as u64);
    report
        .parameter_counts
        .insert("trainable_total".into(), outcome.model.trainable_parameter_count() as u64);
    report.artifacts = vec!["training_log.csv".into(), "checkpoints/model.json".into()];
    out.write_report(&report)?;

    let test = outcome.test_metrics.as_ref().expect("test split supplied");
    println!(
        "trained {} epochs (seed {}): test accuracy {:.4}, weighted F1 {:.4}",
        config.epochs, config.seed, test.accuracy, test.weighted_f1
    );
    println!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

pub fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let model = checkpoint.restore()?;
    let dataset = load_dataset(&args.dataset)?;
    let split = match args.split.as_str() {
        "train" => &dataset.train,
        "val" => &dataset.val,
        "test" => &dataset.test,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split '{other}' (expected train|val|test)"
            )))
        }
    };
    let metrics = evaluate(&model, split)?;
    println!(
        "split {}: accuracy {:.6}, weighted F1 {:.6}",
        args.split, metrics.accuracy, metrics.weighted_f1
    );

    if let Some(out_path) = &args.out {
        let out = OutDir::create(out_path)?;
        let mut report = RunReport::new("eval").with_config(&checkpoint.config)?;
        report.seed = Some(checkpoint.config.seed);
        report.metric(&args.split, &metrics);
        out.write_report(&report)?;
    }
    Ok(())
}
