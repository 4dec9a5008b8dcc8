//! `lmam grad-check`: runs the finite-difference suite and prints one line
//! per parameter group with its maximum relative error. Any failing group
//! makes the process exit with status 3.

use lmam_core::gradcheck::{run_module, DEFAULT_STEP};

use crate::cli::GradCheckArgs;
use crate::error::CliError;
use crate::report::{OutDir, RunReport};

pub const CSV_HEADER: &str = "group,max_rel_err,checked,pass";

pub fn run(args: GradCheckArgs) -> Result<(), CliError> {
    if !(args.tol > 0.0) {
        return Err(CliError::Usage(format!("tolerance must be positive, got {}", args.tol)));
    }
    let reports = run_module(&args.module, args.seed, DEFAULT_STEP)?;

    let mut rows = Vec::with_capacity(reports.len());
    let mut failures = 0usize;
    println!("module {} seed {} tol {:e}", args.module, args.seed, args.tol);
    for r in &reports {
        let pass = r.passes(args.tol);
        if !pass {
            failures += 1;
        }
        println!(
            "{} {:<60} max_rel_err {:>12.3e} ({} elements)",
            if pass { "PASS" } else { "FAIL" },
            r.group,
            r.max_rel_err,
            r.checked
        );
        rows.push(format!("{},{},{},{}", r.group, r.max_rel_err, r.checked, pass));
    }
    println!(
        "{} groups, {} failures at tolerance {:e} (seed {})",
        reports.len(),
        failures,
        args.tol,
        args.seed
    );

    if let Some(out_path) = &args.out {
        let out = OutDir::create(out_path)?;
        out.write_csv("grad_check.csv", CSV_HEADER, &rows)?;
        let mut report = RunReport::new("grad-check").with_config(&serde_json::json!({
            "module": args.module,
            "tol": args.tol,
        }))?;
        report.seed = Some(args.seed);
        report.metric("groups", reports.len());
        report.metric("failures", failures);
        report.artifacts = vec!["grad_check.csv".into()];
        out.write_report(&report)?;
    }

    if failures > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failures} gradient group(s) exceeded tolerance {:e}",
            args.tol
        )));
    }
    Ok(())
}
