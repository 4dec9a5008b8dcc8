//! `lmam param-count`: exact parameter formulas. The projection table uses
//! the first width as a square `d x d` weight; the fusion table charges each
//! method its own formula (for the attention methods: the attention
//! projections, which is the number quoted in comparisons).

use lmam_core::fusion::{fusion_parameter_count_formula, FusionMethod, FusionOptions};
use lmam_core::lowrank::{
    parameter_count_dense, parameter_count_lowrank, parameter_count_self_attention,
};

use crate::cli::{parse_dims, parse_fusion_list, ParamCountArgs};
use crate::error::CliError;
use crate::report::{OutDir, RunReport};

pub const CSV_HEADER: &str = "kind,name,d_t,d_a,d_v,rank,params,ratio_to_selfattn";

pub fn run(args: ParamCountArgs) -> Result<(), CliError> {
    let dims = parse_dims(&args.dims)?;
    let methods = parse_fusion_list(&args.fusion)?;
    let rank = args.rank;
    if rank == 0 {
        return Err(CliError::Usage("rank must be at least 1".into()));
    }

    let d = dims.0;
    let lowrank = parameter_count_lowrank(d, d, rank);
    let dense = parameter_count_dense(d, d);
    let selfattn = parameter_count_self_attention(d, d);
    let ratio = lowrank as f64 / selfattn as f64;

    let mut rows: Vec<String> = Vec::new();
    println!("projection weights at d_in = d_out = {d}, rank {rank}:");
    println!("  {:<22} {:>12} {:>14}", "name", "params", "ratio/selfattn");
    for (name, params) in [("lowrank", lowrank), ("dense", dense), ("selfattn", selfattn)] {
        let r = params as f64 / selfattn as f64;
        println!("  {name:<22} {params:>12} {r:>14.6}");
        rows.push(format!("projection,{name},{d},{d},{d},{rank},{params},{r}"));
    }

    let dims_vec = [dims.0, dims.1, dims.2];
    let opts = FusionOptions { rank: Some(rank), ..FusionOptions::default() };
    let selfattn_fusion = fusion_parameter_count_formula(FusionMethod::SelfAttn, &dims_vec, &opts);
    println!();
    println!(
        "fusion methods at dims ({}, {}, {}), rank {rank} (attention methods count their projections):",
        dims.0, dims.1, dims.2
    );
    println!("  {:<22} {:>12} {:>14}", "method", "params", "ratio/selfattn");
    for method in &methods {
        let params = fusion_parameter_count_formula(*method, &dims_vec, &opts);
        let r = params as f64 / selfattn_fusion as f64;
        println!("  {:<22} {params:>12} {r:>14.6}", method.name());
        rows.push(format!(
            "fusion,{},{},{},{},{rank},{params},{r}",
            method.name(),
            dims.0,
            dims.1,
            dims.2
        ));
    }
    println!();
    println!("lowrank/selfattn projection ratio: {ratio:.6} ({})", if ratio < 1.0 / 3.0 {
        "below 1/3"
    } else {
        "NOT below 1/3"
    });

    if let Some(out_path) = &args.out {
        let out = OutDir::create(out_path)?;
        out.write_csv("param_count.csv", CSV_HEADER, &rows)?;
        let mut report = RunReport::new("param-count").with_config(&serde_json::json!({
            "dims": [dims.0, dims.1, dims.2],
            "rank": rank,
            "fusion": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
        }))?;
        report.parameter_counts.insert("lowrank_projection".into(), lowrank as u64);
        report.parameter_counts.insert("dense_projection".into(), dense as u64);
        report.parameter_counts.insert("selfattn_projection".into(), selfattn as u64);
        report.metric("ratio_lowrank_to_selfattn", ratio);
        report.artifacts = vec!["param_count.csv".into()];
        out.write_report(&report)?;
    }
    Ok(())
}
