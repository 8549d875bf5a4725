//! Library side of the `maos` binary. Each `run_*` function is one
//! subcommand; `main.rs` only parses flags and maps errors to exit codes.

pub mod config;
pub mod error;
pub mod images;
pub mod train;

use std::path::Path;

use maos_core::data::synth::{synth_corpus, write_corpus, Manifest};
use maos_core::data::SUPPORTED_SIZES;
use maos_core::gradcheck::{run_suite, OpCheck, SUITE_TOLERANCE};

pub use config::{parse_embedding, RunConfig};
pub use error::{CliError, CliResult};
pub use images::{run_evaluate, run_translate, Direction};
pub use train::{run_sweep, run_train, RunReport, SweepAxis, SweepSummary, COLLAPSE_FRACTION};

/// Held-out pairs written next to the training split by default.
pub const DEFAULT_TEST_PAIRS: usize = 256;

/// Writes a synthetic corpus of `n` source images, one target and `n_test`
/// oracle-paired test images.
pub fn run_synth(out: &Path, n: usize, size: usize, seed: u64, n_test: usize) -> CliResult<Manifest> {
    if n < 2 {
        return Err(CliError::Usage(format!("need ≥ 2 source images, got {n}")));
    }
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(CliError::Usage(format!("size must be one of {SUPPORTED_SIZES:?}, got {size}")));
    }
    eprintln!("effective config: {{\"out\": {:?}, \"n\": {n}, \"size\": {size}, \"seed\": {seed}, \"n_test\": {n_test}}}", out.display().to_string());
    let corpus = synth_corpus::<f64>(n, size, seed)?;
    Ok(write_corpus(&corpus, n_test, out)?)
}

/// Runs the finite-difference suite; fails when any op misses the tolerance.
pub fn run_gradcheck(seed: u64) -> CliResult<Vec<OpCheck>> {
    eprintln!("effective config: {{\"seed\": {seed}, \"tolerance\": {SUITE_TOLERANCE}}}");
    let report = run_suite(seed)?;
    for r in &report {
        println!(
            "{:<22} {} max_rel_err {:.3e} entries {}{}",
            r.op,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_relative_error,
            r.entries_checked,
            if r.skipped_at_kinks > 0 { format!(" (skipped {} at kinks)", r.skipped_at_kinks) } else { String::new() }
        );
    }
    let failed: Vec<&str> = report.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
