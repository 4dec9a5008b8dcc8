//! `lmam compare`: trains every requested fusion method over several seeds
//! on one dataset and tabulates accuracy, weighted F1, fusion parameters and
//! training time. Unless overridden, the early embedding way is used so that
//! every method fits the same pipeline shape.

use lmam_core::model::EmbedWay;

use crate::cli::{parse_fusion_list, parse_u64_list, CompareArgs};
use crate::dataset::load_dataset;
use crate::error::CliError;
use crate::report::{OutDir, RunReport};
use crate::runner::{parallel_map, run_training};

pub const CSV_HEADER: &str = "method,params,mean_accuracy,mean_weighted_f1,mean_train_seconds,seeds";
pub const DETAIL_HEADER: &str = "method,seed,accuracy,weighted_f1,train_seconds";

pub struct CompareRow {
    pub method: String,
    pub params: usize,
    pub mean_accuracy: f64,
    pub mean_weighted_f1: f64,
    pub mean_train_seconds: f64,
}

pub fn run(args: CompareArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset)?;
    let methods = parse_fusion_list(&args.fusions)?;
    let seeds = parse_u64_list(&args.seeds)?;

    let mut base = args.config.resolve(dataset.manifest.dims())?;
    if args.config.embed_way.is_none() {
        base.embed_way = EmbedWay::Early;
    }

    let cells: Vec<(usize, u64)> = methods
        .iter()
        .enumerate()
        .flat_map(|(m, _)| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = parallel_map(cells.len(), |i| {
        let (m_idx, seed) = cells[i];
        let mut config = base.clone();
        config.fusion = methods[m_idx];
        config.seed = seed;
        let outcome = run_training(
            &config,
            dataset.manifest.num_classes,
            &dataset.train,
            Some(&dataset.val),
            Some(&dataset.test),
        )?;
        let test = outcome.test_metrics.expect("test split supplied");
        println!(
            "  {} seed {seed}: test accuracy {:.4}, weighted F1 {:.4} ({:.1}s)",
            methods[m_idx].name(),
            test.accuracy,
            test.weighted_f1,
            outcome.train_seconds
        );
        Ok((
            outcome.model.fusion().fusion_parameter_count(),
            test.accuracy,
            test.weighted_f1,
            outcome.train_seconds,
        ))
    });

    let mut detail_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut table = Vec::new();
    for (m_idx, method) in methods.iter().enumerate() {
        let mut params = 0usize;
        let mut acc_sum = 0.0;
        let mut f1_sum = 0.0;
        let mut time_sum = 0.0;
        for (cell, result) in cells.iter().zip(&results) {
            if cell.0 != m_idx {
                continue;
            }
            let (p, acc, f1, secs) = match result {
                Ok(v) => *v,
                Err(e) => return Err(CliError::Usage(e.to_string())),
            };
            params = p;
            acc_sum += acc;
            f1_sum += f1;
            time_sum += secs;
            detail_rows.push(format!("{},{},{},{},{}", method.name(), cell.1, acc, f1, secs));
        }
        let n = seeds.len() as f64;
        let row = CompareRow {
            method: method.name().to_string(),
            params,
            mean_accuracy: acc_sum / n,
            mean_weighted_f1: f1_sum / n,
            mean_train_seconds: time_sum / n,
        };
        summary_rows.push(format!(
            "{},{},{},{},{},{}",
            row.method,
            row.params,
            row.mean_accuracy,
            row.mean_weighted_f1,
            row.mean_train_seconds,
            args.seeds
        ));
        table.push(row);
    }

    println!();
    println!("  {:<10} {:>12} {:>10} {:>12} {:>10}", "method", "params", "acc", "weighted_f1", "time_s");
    for row in &table {
        println!(
            "  {:<10} {:>12} {:>10.4} {:>12.4} {:>10.1}",
            row.method, row.params, row.mean_accuracy, row.mean_weighted_f1, row.mean_train_seconds
        );
    }

    let out = OutDir::create(&args.out)?;
    out.write_csv("compare.csv", CSV_HEADER, &summary_rows)?;
    out.write_csv("compare_detail.csv", DETAIL_HEADER, &detail_rows)?;
    let mut report = RunReport::new("compare").with_config(&base)?;
    report.metric("methods", methods.iter().map(|m| m.name()).collect::<Vec<_>>());
    report.metric("seeds", &seeds);
    report.artifacts = vec!["compare.csv".into(), "compare_detail.csv".into()];
    out.write_report(&report)?;
    Ok(())
}
