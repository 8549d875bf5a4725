use std::collections::HashSet;
use std::time::Instant;

use maos_core::gradcheck::{run_suite, SUITE_TOLERANCE};

#[test]
fn every_op_passes_once_and_quickly() {
    let start = Instant::now();
    let report = run_suite(0).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    for r in &report {
        println!("{:<22} {:.3e} ({} entries, {} at kinks)", r.op, r.max_relative_error, r.entries_checked, r.skipped_at_kinks);
    }
    let names: HashSet<_> = report.iter().map(|r| r.op).collect();
    assert_eq!(names.len(), report.len(), "an op is listed twice");
    for op in ["conv2d", "conv_transpose2d", "instance_norm", "crop_each", "composite_model_loss"] {
        assert!(names.contains(op), "{op} missing");
    }
    for r in &report {
        assert!(r.max_relative_error < SUITE_TOLERANCE, "{}: {}", r.op, r.max_relative_error);
        assert!(r.passed);
    }
    assert!(elapsed < 60.0, "suite took {elapsed:.1}s");
}

#[test]
fn deterministic_per_seed() {
    assert_eq!(run_suite(3).unwrap(), run_suite(3).unwrap());
}
