//! `telemetry.csv`: one row per iteration, fixed column order, shortest
//! round-trip float formatting so equal runs produce equal bytes. Wall time
//! goes to the separate `timing.csv`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{StepReport, TELEMETRY_FILE, TIMING_FILE};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 14] = [
    "iteration",
    "g_total",
    "g_adv_global",
    "g_adv_part",
    "g_adv_source",
    "cycle_x",
    "cycle_y",
    "d_global",
    "d_part",
    "d_source",
    "grad_norm_generators",
    "grad_norm_d_global",
    "grad_norm_d_part",
    "grad_norm_d_source",
];

/// Fixed columns, then `d_global_t0..`, `d_part_t0..`, `d_source_t0..`.
pub fn telemetry_header(n_threads: usize) -> String {
    let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for d in ["d_global", "d_part", "d_source"] {
        cols.extend((0..n_threads).map(|t| format!("{d}_t{t}")));
    }
    cols.join(",")
}

pub fn telemetry_row(r: &StepReport) -> String {
    let mut cells = vec![r.iteration.to_string()];
    let fixed = [
        r.g_total,
        r.g_adv_global,
        r.g_adv_part,
        r.g_adv_source,
        r.cycle_x,
        r.cycle_y,
        r.d_global,
        r.d_part,
        r.d_source,
        r.grad_norm_generators,
        r.grad_norm_d_global,
        r.grad_norm_d_part,
        r.grad_norm_d_source,
    ];
    cells.extend(fixed.iter().map(f64::to_string));
    for per in [&r.per_thread_d_global, &r.per_thread_d_part, &r.per_thread_d_source] {
        cells.extend(per.iter().map(f64::to_string));
    }
    cells.join(",")
}

pub struct TelemetryWriter {
    rows: BufWriter<File>,
    timing: BufWriter<File>,
    paths: (PathBuf, PathBuf),
}

/// Opens `path` fresh when `start == 0`, otherwise keeps the header and
/// the rows up to iteration `start` and appends after them.
fn open(path: &Path, start: u64, header: &str) -> Result<BufWriter<File>> {
    let kept = match (start, std::fs::read_to_string(path)) {
        (0, _) => None,
        (_, Ok(text)) => Some(
            text.lines()
                .enumerate()
                .filter(|(i, line)| *i == 0 || line.split(',').next().and_then(|c| c.parse::<u64>().ok()).is_some_and(|it| it <= start))
                .map(|(_, line)| format!("{line}\n"))
                .collect::<String>(),
        ),
        (_, Err(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
        (_, Err(e)) => return Err(Error::io(path, e)),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match kept {
        Some(text) => w.write_all(text.as_bytes()),
        None => writeln!(w, "{header}"),
    }
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(path, e))?;
    Ok(w)
}

impl TelemetryWriter {
    /// Creates both files in `dir`. A run resumed at iteration `start`
    /// continues existing files, dropping rows written after `start`.
    pub fn create(dir: &Path, n_threads: usize, start: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (tp, sp) = (dir.join(TELEMETRY_FILE), dir.join(TIMING_FILE));
        let rows = open(&tp, start, &telemetry_header(n_threads))?;
        let timing = open(&sp, start, "iteration,seconds")?;
        Ok(TelemetryWriter { rows, timing, paths: (tp, sp) })
    }

    pub fn append(&mut self, r: &StepReport, seconds: f64) -> Result<()> {
        writeln!(self.rows, "{}", telemetry_row(r)).and_then(|_| self.rows.flush()).map_err(|e| Error::io(&self.paths.0, e))?;
        writeln!(self.timing, "{},{seconds}", r.iteration).and_then(|_| self.timing.flush()).map_err(|e| Error::io(&self.paths.1, e))
    }
}
