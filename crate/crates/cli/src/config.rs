use std::path::{Path, PathBuf};

use maos_core::metrics::Embedding;
use maos_core::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

/// The `--config` document of `train` and `sweep`.
///
/// Relative paths are resolved against the directory holding the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus directory or its `manifest.json`.
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub training: TrainingConfig,
    /// Feature map for the end-of-run FID.
    pub embedding: Embedding,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Translate the held-out test split after training and write `report.json`.
    pub evaluate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            output_dir: PathBuf::new(),
            training: TrainingConfig::default(),
            embedding: Embedding::default(),
            resume: None,
            evaluate: true,
        }
    }
}

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.output_dir);
        if let Some(r) = cfg.resume.as_mut() {
            resolve(r);
        }
        Ok(cfg)
    }

    /// Every violation, each prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.training.problems(true).into_iter().map(|m| format!("training.{m}")).collect();
        if self.dataset.as_os_str().is_empty() {
            p.push("dataset is required".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            p.push("output_dir is required".into());
        }
        match &self.embedding {
            Embedding::ExternalFeatures { .. } => p.push("embedding external_features cannot embed translated images; use downsample_pixels or random_projection".into()),
            e => {
                if let Err(err) = e.output_dim() {
                    p.push(format!("embedding: {err}"));
                }
            }
        }
        p
    }

    pub fn validate(&self) -> CliResult<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("invalid configuration:\n  - {}", p.join("\n  - "))))
        }
    }
}

/// Parses `downsample[:K]`, `random:DIM:SEED` or `external[:FILE]`.
///
/// `external` reads precomputed features from `FILE` (default
/// `features.f32`) inside each evaluated directory.
pub fn parse_embedding(spec: &str) -> CliResult<Embedding> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| CliError::Usage(format!("embedding `{spec}`: {what} must be a non-negative integer, got `{s}`")));
    let emb = match parts.as_slice() {
        ["downsample"] => Embedding::default(),
        ["downsample", k] => Embedding::DownsamplePixels { k: num(k, "k")? as usize },
        ["random", dim, seed] => Embedding::RandomProjection { dim: num(dim, "dim")? as usize, seed: num(seed, "seed")? },
        ["external"] => Embedding::ExternalFeatures { path: PathBuf::from(DEFAULT_FEATURES_FILE) },
        ["external", file] => Embedding::ExternalFeatures { path: PathBuf::from(file) },
        _ => return Err(CliError::Usage(format!("unknown embedding `{spec}` (expected downsample[:K], random:DIM:SEED or external[:FILE])"))),
    };
    if !matches!(emb, Embedding::ExternalFeatures { .. }) {
        emb.output_dim()?;
    }
    Ok(emb)
}

pub const DEFAULT_FEATURES_FILE: &str = "features.f32";
