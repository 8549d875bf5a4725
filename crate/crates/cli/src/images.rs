use std::path::{Path, PathBuf};

use maos_core::data::io::{read_rgb8, save_image};
use maos_core::metrics::{diversity_score, fid_between_features, load_features, ssim, EvalReport, Embedding};
use maos_core::trainer::load_checkpoint;
use maos_core::trainer::{translate_with, NetId};
use maos_core::Tensor;

use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Source to target, through F.
    Xy,
    /// Target to source, through G.
    Yx,
}

/// Image files (`.ppm`, `.png`, any case) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("ppm" | "png")) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!("{}: no .ppm or .png images", dir.display())));
    }
    Ok(out)
}

/// Loads a square image of side `expected`.
fn load_exact(path: &Path, expected: Option<usize>) -> CliResult<Tensor<f64>> {
    let img = read_rgb8(path)?;
    let side = expected.unwrap_or(img.width);
    if img.width != side || img.height != side {
        return Err(CliError::Usage(format!("{}: expected a {side}x{side} image, got {}x{}", path.display(), img.width, img.height)));
    }
    Ok(img.to_tensor())
}

fn load_all(paths: &[PathBuf], expected: Option<usize>) -> CliResult<Vec<Tensor<f64>>> {
    let first = match expected {
        Some(s) => Some(s),
        None => Some(read_rgb8(&paths[0])?.width),
    };
    paths.iter().map(|p| load_exact(p, first)).collect()
}

/// Translates every image of `input` into `output` under the same file name.
/// Returns the written paths.
pub fn run_translate(ckpt: &Path, input: &Path, output: &Path, direction: Direction) -> CliResult<Vec<PathBuf>> {
    let ck = load_checkpoint(ckpt)?;
    let side = ck.meta.config.image_size;
    let net = ck.generator::<f64>(match direction {
        Direction::Xy => NetId::F,
        Direction::Yx => NetId::G,
    })?;
    eprintln!(
        "effective config: {{\"ckpt\": {:?}, \"in\": {:?}, \"out\": {:?}, \"direction\": \"{}\", \"image_size\": {side}, \"iteration\": {}}}",
        ckpt.display().to_string(),
        input.display().to_string(),
        output.display().to_string(),
        if direction == Direction::Xy { "xy" } else { "yx" },
        ck.meta.iteration
    );
    let paths = list_images(input)?;
    let images = load_all(&paths, Some(side))?;
    let translated = translate_with(&net, &images)?;
    std::fs::create_dir_all(output).map_err(|e| io_err(output, e))?;
    let mut written = Vec::with_capacity(paths.len());
    for (src, img) in paths.iter().zip(&translated) {
        let dst = output.join(src.file_name().expect("listed files have names"));
        save_image(img, &dst)?;
        written.push(dst);
    }
    Ok(written)
}

/// FID of `generated` against `reference`, paired SSIM against the
/// same-named files of `oracle` when given, and the diversity of `generated`.
pub fn run_evaluate(generated: &Path, reference: &Path, oracle: Option<&Path>, embedding: &Embedding) -> CliResult<EvalReport> {
    let gen_paths = list_images(generated)?;
    let ref_paths = list_images(reference)?;
    let gen = load_all(&gen_paths, None)?;
    let refs = load_all(&ref_paths, None)?;
    let fid = match embedding {
        Embedding::ExternalFeatures { path } => fid_between_features(&load_features(&generated.join(path))?, &load_features(&reference.join(path))?)?,
        e => fid_between_features(&e.embed(&gen)?, &e.embed(&refs)?)?,
    };
    let ssim_per_pair = match oracle {
        Some(dir) => gen_paths
            .iter()
            .zip(&gen)
            .map(|(p, g)| {
                let truth = load_exact(&dir.join(p.file_name().expect("listed files have names")), Some(g.shape()[1]))?;
                Ok(ssim(g, &truth)?)
            })
            .collect::<CliResult<Vec<f64>>>()?,
        None => Vec::new(),
    };
    let ssim_mean = (!ssim_per_pair.is_empty()).then(|| ssim_per_pair.iter().sum::<f64>() / ssim_per_pair.len() as f64);
    Ok(EvalReport {
        fid,
        ssim_mean,
        ssim_per_pair,
        diversity: diversity_score(&gen)?,
        embedding_descriptor: embedding.descriptor(),
        set_sizes: [gen.len(), refs.len()],
    })
}
