//! `lmam bench`: wall-clock forward+backward timing per fusion method on
//! identical random data, median and IQR over the timed repetitions after
//! two warmups, plus the analytic multiply-accumulate count per forward.

use std::time::Instant;

use lmam_core::fusion::{build_fusion, FusionOptions};
use lmam_core::matrix::Matrix;
use lmam_core::rng::Rng;

use crate::cli::{parse_dims, parse_fusion_list, BenchArgs};
use crate::error::CliError;
use crate::report::{median_iqr, OutDir, RunReport};

pub const CSV_HEADER: &str = "method,d_t,d_a,d_v,seq_len,rank,params,madds,reps,median_us,iqr_us";

const WARMUPS: usize = 2;

pub struct BenchRow {
    pub method: String,
    pub params: usize,
    pub madds: u64,
    pub median_us: f64,
    pub iqr_us: f64,
}

pub fn run(args: BenchArgs) -> Result<(), CliError> {
    let rows = execute(&args)?;
    let dims = parse_dims(&args.dims)?;

    println!(
        "forward+backward timing at dims ({},{},{}), L = {}, rank {}, {} reps after {WARMUPS} warmups",
        dims.0, dims.1, dims.2, args.seq_len, args.rank, args.reps
    );
    println!("  {:<10} {:>12} {:>14} {:>12} {:>12}", "method", "params", "madds", "median_us", "iqr_us");
    let mut csv = Vec::new();
    for row in &rows {
        println!(
            "  {:<10} {:>12} {:>14} {:>12.1} {:>12.1}",
            row.method, row.params, row.madds, row.median_us, row.iqr_us
        );
        csv.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.method,
            dims.0,
            dims.1,
            dims.2,
            args.seq_len,
            args.rank,
            row.params,
            row.madds,
            args.reps,
            row.median_us,
            row.iqr_us
        ));
    }

    if let Some(out_path) = &args.out {
        let out = OutDir::create(out_path)?;
        out.write_csv("bench.csv", CSV_HEADER, &csv)?;
        let mut report = RunReport::new("bench").with_config(&serde_json::json!({
            "fusion": args.fusion,
            "dims": [dims.0, dims.1, dims.2],
            "seq_len": args.seq_len,
            "reps": args.reps,
            "rank": args.rank,
        }))?;
        report.seed = Some(args.seed);
        for row in &rows {
            report.timings_ms.insert(format!("{}_median", row.method), row.median_us / 1e3);
            report.parameter_counts.insert(row.method.clone(), row.params as u64);
        }
        report.artifacts = vec!["bench.csv".into()];
        out.write_report(&report)?;
    }
    Ok(())
}

/// Builds each requested layer, times `reps` forward+backward passes on the
/// same random inputs, and returns one row per method.
pub fn execute(args: &BenchArgs) -> Result<Vec<BenchRow>, CliError> {
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    if args.reps == 1 {
        eprintln!("warning: medians over a single repetition are unstable; use --reps >= 5");
    }
    let dims = parse_dims(&args.dims)?;
    let dims_vec = [dims.0, dims.1, dims.2];
    let methods = parse_fusion_list(&args.fusion)?;

    // Identical inputs for every method, drawn before any layer init.
    let mut data_rng = Rng::new(args.seed);
    let parts: Vec<Matrix> = dims_vec
        .iter()
        .map(|&d| Matrix::uniform_init(&mut data_rng, args.seq_len, d, 1))
        .collect();
    let refs: Vec<&Matrix> = parts.iter().collect();

    let mut rows = Vec::new();
    for (idx, method) in methods.iter().enumerate() {
        let opts = FusionOptions { rank: Some(args.rank), ..FusionOptions::default() };
        let mut init_rng = Rng::new(args.seed.wrapping_add(1));
        let _ = idx;
        let mut layer = build_fusion(&mut init_rng, *method, &dims_vec, &opts)?;
        let upstream = Matrix::ones(args.seq_len, layer.output_dim());

        let mut time_once = || -> Result<f64, CliError> {
            layer.zero_grad();
            let t0 = Instant::now();
            layer.forward(&refs)?;
            layer.backward(&upstream)?;
            Ok(t0.elapsed().as_secs_f64() * 1e6)
        };
        for _ in 0..WARMUPS {
            time_once()?;
        }
        let mut samples = Vec::with_capacity(args.reps);
        for _ in 0..args.reps {
            samples.push(time_once()?);
        }
        let (median_us, iqr_us) = median_iqr(&samples);
        rows.push(BenchRow {
            method: method.name().to_string(),
            params: layer.fusion_parameter_count(),
            madds: layer.forward_madds(args.seq_len),
            median_us,
            iqr_us,
        });
    }
    Ok(rows)
}
