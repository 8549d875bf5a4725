use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use maos_core::data::synth::{load_dataset, load_test_pairs, Manifest};
use maos_core::data::OneShotDataset;
use maos_core::metrics::{diversity_score, evaluate, EvalReport};
use maos_core::trainer::load_checkpoint;
use maos_core::trainer::{continue_training, translate_with, LoopOutput, StepReport, Trainer, TrainingConfig};
use maos_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, EFFECTIVE_CONFIG_FILE};
use crate::error::{io_err, CliError, CliResult};

pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
/// A run whose outputs are less diverse than this fraction of its inputs is
/// flagged as collapsed onto the target.
pub const COLLAPSE_FRACTION: f64 = 0.05;

/// End-of-run summary written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations: u64,
    pub final_cycle_x: Option<f64>,
    pub final_cycle_y: Option<f64>,
    /// Translated held-out inputs against their oracle outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translated: Option<EvalReport>,
    /// Untranslated held-out inputs against the same oracle outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub untranslated: Option<EvalReport>,
    pub diversity: f64,
    pub input_diversity: f64,
    pub collapse: bool,
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> CliResult<String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))? + "\n";
    std::fs::write(path, &text).map_err(|e| io_err(path, e))?;
    Ok(text)
}

/// Fields of two configs that differ, by JSON key.
fn differing_fields(a: &TrainingConfig, b: &TrainingConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) = (serde_json::to_value(a), serde_json::to_value(b)) else {
        return vec!["<unserializable>".into()];
    };
    a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

fn resumed_trainer(path: &Path, cfg: &TrainingConfig) -> CliResult<Trainer<f64>> {
    let mut trainer = load_checkpoint(path)?.into_trainer::<f64>()?;
    let mut saved = trainer.cfg.clone();
    saved.iterations = cfg.iterations;
    saved.checkpoint_every = cfg.checkpoint_every;
    let diff = differing_fields(&saved, cfg);
    if !diff.is_empty() {
        return Err(CliError::Usage(format!("resume: {} was trained with different settings for {}", path.display(), diff.join(", "))));
    }
    trainer.cfg = saved;
    Ok(trainer)
}

fn run_report(trainer: &Trainer<f64>, manifest: &Manifest, dataset_dir: &Path, ds: &OneShotDataset<f64>, last: Option<&StepReport>, cfg: &RunConfig) -> CliResult<RunReport> {
    let has_test = manifest.images.iter().any(|e| e.split == maos_core::data::synth::Split::Test);
    let (translated, untranslated, outputs, inputs) = if has_test {
        let (xs, ys) = load_test_pairs::<f64>(manifest, dataset_dir)?;
        let outs = translate_with(&trainer.nets.f, &xs)?;
        let t = evaluate(&outs, &ys, Some(&ys), &cfg.embedding)?;
        let u = evaluate(&xs, &ys, Some(&ys), &cfg.embedding)?;
        (Some(t), Some(u), outs, xs)
    } else {
        let xs: Vec<Tensor<f64>> = ds.source_images.iter().map(|s| s.pixels.clone()).collect();
        (None, None, translate_with(&trainer.nets.f, &xs)?, xs)
    };
    let diversity = diversity_score(&outputs)?;
    let input_diversity = diversity_score(&inputs)?;
    Ok(RunReport {
        iterations: trainer.iteration,
        final_cycle_x: last.map(|r| r.cycle_x),
        final_cycle_y: last.map(|r| r.cycle_y),
        translated,
        untranslated,
        diversity,
        input_diversity,
        collapse: diversity < COLLAPSE_FRACTION * input_diversity,
    })
}

fn dataset_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    }
}

/// Trains per `cfg`, writing the effective config, telemetry, checkpoints
/// and (with `evaluate`) `report.json` under `cfg.output_dir`.
pub fn run_train(cfg: &RunConfig) -> CliResult<Option<RunReport>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let echo = write_json(cfg, &out.join(EFFECTIVE_CONFIG_FILE))?;
    eprint!("effective config:\n{echo}");
    let (manifest, ds) = load_dataset::<f64>(&cfg.dataset, cfg.training.augmentation)?;
    if ds.side() != cfg.training.image_size {
        return Err(CliError::Usage(format!("training.image_size is {} but the dataset images are {}x{}", cfg.training.image_size, ds.side(), ds.side())));
    }
    let trainer = match &cfg.resume {
        Some(path) => resumed_trainer(path, &cfg.training)?,
        None => Trainer::new(cfg.training.clone(), ds.source_images.len())?,
    };
    let outcome = continue_training(trainer, &ds, &LoopOutput { dir: Some(out.clone()) })?;
    if !cfg.evaluate {
        return Ok(None);
    }
    let report = run_report(&outcome.trainer, &manifest, &dataset_dir(&cfg.dataset), &ds, outcome.telemetry.last(), cfg)?;
    write_json(&report, &out.join(REPORT_FILE))?;
    Ok(Some(report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    NThreads,
    PartSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::NThreads => "n_threads",
            SweepAxis::PartSize => "part_size",
        }
    }

    fn apply(self, cfg: &mut TrainingConfig, value: &str) -> CliResult<()> {
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("sweep value `{value}` for {}: {e}", self.name()));
        match self {
            SweepAxis::Alpha => cfg.alpha = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::NThreads => cfg.n_threads = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::PartSize => cfg.part_size = value.parse().map_err(|e| bad(&e))?,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: Result<RunReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub csv: String,
}

const SUMMARY_HEADER: &str = "axis,value,seed,status,fid,fid_untranslated,ssim,ssim_untranslated,diversity,input_diversity,collapse,run_dir";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn summary_line(axis: SweepAxis, row: &SweepRow) -> String {
    let mut line = format!("{},{},{},", axis.name(), row.value, row.seed);
    match &row.outcome {
        Ok(r) => {
            let _ = write!(
                line,
                "ok,{},{},{},{},{},{},{}",
                opt(r.translated.as_ref().map(|e| e.fid)),
                opt(r.untranslated.as_ref().map(|e| e.fid)),
                opt(r.translated.as_ref().and_then(|e| e.ssim_mean)),
                opt(r.untranslated.as_ref().and_then(|e| e.ssim_mean)),
                r.diversity,
                r.input_diversity,
                r.collapse
            );
        }
        // keep the CSV one line per run
        Err(msg) => line.push_str(&format!("\"failed: {}\",,,,,,,", msg.replace('"', "'").replace('\n', " "))),
    }
    let _ = write!(line, ",{}", row.dir.display());
    line
}

/// One full run per value, sequentially, with child seed
/// `training.seed + index` and run directory `output_dir/<axis>_<value>`.
/// Failed children are recorded and the sweep continues.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[String]) -> CliResult<SweepSummary> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let mut children = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let mut child = base.clone();
        axis.apply(&mut child.training, v)?;
        child.training.seed = base.training.seed + i as u64;
        child.output_dir = base.output_dir.join(format!("{}_{v}", axis.name()));
        children.push(child);
    }
    let mut rows = Vec::new();
    for (child, value) in children.into_iter().zip(values) {
        let outcome = match run_train(&RunConfig { evaluate: true, ..child.clone() }) {
            Ok(Some(r)) => Ok(r),
            Ok(None) => Err("no report".to_string()),
            Err(e) => Err(e.to_string()),
        };
        if let Err(msg) = &outcome {
            eprintln!("sweep {}={value}: {msg}", axis.name());
        }
        rows.push(SweepRow { value: value.clone(), seed: child.training.seed, dir: child.output_dir, outcome });
    }
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for row in &rows {
        csv.push_str(&summary_line(axis, row));
        csv.push('\n');
    }
    std::fs::create_dir_all(&base.output_dir).map_err(|e| io_err(&base.output_dir, e))?;
    let path = base.output_dir.join(SWEEP_SUMMARY_FILE);
    std::fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
    Ok(SweepSummary { axis, rows, csv })
}
