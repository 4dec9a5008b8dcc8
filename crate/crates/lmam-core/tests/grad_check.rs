//! Finite-difference verification of every backward pass: matching attention
//! (both value sources), the full module in all three modes, low-rank apply,
//! self-attention, tfn, lfm, add, the context encoder, the classifier head
//! and the assembled pipelines, across three seeds.

use lmam_core::gradcheck::{run_module, DEFAULT_STEP, DEFAULT_TOL, MODULES};

#[test]
fn every_layer_passes_finite_difference_checks_on_three_seeds() {
    for seed in [1u64, 2, 3] {
        let reports = run_module("all", seed, DEFAULT_STEP).unwrap();
        assert!(reports.len() > 100, "suite unexpectedly small: {}", reports.len());
        for r in &reports {
            assert!(
                r.passes(DEFAULT_TOL),
                "seed {seed}: group {} max relative error {} exceeds {DEFAULT_TOL}",
                r.group,
                r.max_rel_err
            );
        }
    }
}

#[test]
fn per_module_runs_cover_every_name() {
    for module in MODULES {
        let reports = run_module(module, 5, DEFAULT_STEP).unwrap();
        assert!(!reports.is_empty(), "module {module} produced no reports");
        for r in &reports {
            assert!(r.passes(DEFAULT_TOL), "{module}: {} err {}", r.group, r.max_rel_err);
        }
    }
}

#[test]
fn unreachable_tolerance_reports_failures() {
    let reports = run_module("all", 1, DEFAULT_STEP).unwrap();
    let failures = reports.iter().filter(|r| !r.passes(1e-12)).count();
    assert!(failures > 0, "a 1e-12 tolerance should be unreachable for finite differences");
}
