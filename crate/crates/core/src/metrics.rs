//! FID-style Fréchet distance over pluggable embeddings, SSIM and an output
//! diversity score.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const COVARIANCE_RIDGE: f64 = 1e-6;
pub const NEGATIVE_EIGEN_LIMIT: f64 = -1e-6;
pub const MAX_EMBEDDING_DIM: usize = 256;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n_samples: usize,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of equal-length rows.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::TooFew { what: "samples for covariance", need: 2, got: samples.len() });
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::shape("gaussian_stats", "feature length", d, bad.len()));
        }
        let n = samples.len();
        let data = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| data.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
        let mut covariance = centered.transpose() * &centered / (n as f64 - 1.0);
        symmetrize(&mut covariance);
        Ok(GaussianStats { mean, covariance, n_samples: n })
    }

    pub fn from_parts(mean: Vec<f64>, covariance: DMatrix<f64>, n_samples: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::shape("gaussian_stats", "covariance", format!("{d}x{d}"), format!("{:?}", covariance.shape())));
        }
        Ok(GaussianStats { mean: DVector::from_vec(mean), covariance, n_samples })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn add_ridge(&mut self, eps: f64) {
        for i in 0..self.dim() {
            self.covariance[(i, i)] += eps;
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn checked_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    if min < NEGATIVE_EIGEN_LIMIT {
        return Err(Error::Domain { op: "frechet_distance", detail: format!("{what} has eigenvalue {min:e} below {NEGATIVE_EIGEN_LIMIT:e}") });
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = checked_eigen(m.clone(), what)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// `tr sqrt(Σa Σb)` through the symmetric form `sqrt(Σa)·Σb·sqrt(Σa)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let s = sqrt_psd(a, "first covariance")?;
    let mut m = &s * b * &s;
    symmetrize(&mut m);
    let eig = checked_eigen(m, "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// `||μa - μb||² + tr Σa + tr Σb - 2 tr sqrt(Σa Σb)`.
///
/// The trace term is averaged over both argument orders, which makes the
/// result exactly symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", "embedding dimension", a.dim(), b.dim()));
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(&a.covariance, &b.covariance)? + trace_sqrt_product(&b.covariance, &a.covariance)?);
    Ok((dmu + a.covariance.trace() + b.covariance.trace() - 2.0 * cross).max(0.0))
}

/// Maps images to fixed-length feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Embedding {
    /// Per-channel `k x k` block means.
    DownsamplePixels { k: usize },
    /// Gaussian random projection of the raw pixels to `dim` features.
    RandomProjection { dim: usize, seed: u64 },
    /// Precomputed features: little-endian f32 rows plus a JSON sidecar.
    ExternalFeatures { path: PathBuf },
}

impl Default for Embedding {
    fn default() -> Self {
        Embedding::DownsamplePixels { k: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn descriptor(&self) -> String {
        match self {
            Embedding::DownsamplePixels { k } => format!("downsample_pixels({k})"),
            Embedding::RandomProjection { dim, seed } => format!("random_projection({dim}, seed={seed})"),
            Embedding::ExternalFeatures { path } => format!("external_features({})", path.display()),
        }
    }

    /// Feature length for `[3, S, S]` inputs.
    pub fn output_dim(&self) -> Result<usize> {
        let dim = match self {
            Embedding::DownsamplePixels { k } => 3 * k * k,
            Embedding::RandomProjection { dim, .. } => *dim,
            Embedding::ExternalFeatures { path } => read_sidecar(path)?.dim,
        };
        if dim == 0 || dim > MAX_EMBEDDING_DIM {
            return Err(Error::Config(format!("embedding {} has {dim} features (allowed 1..={MAX_EMBEDDING_DIM})", self.descriptor())));
        }
        Ok(dim)
    }

    pub fn embed<T: Scalar>(&self, images: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
        self.output_dim()?;
        let Some(first) = images.first() else { return Ok(Vec::new()) };
        let shape = first.shape().to_vec();
        if let Some(bad) = images.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::shape("embed", "image shape", format!("{shape:?}"), format!("{:?}", bad.shape())));
        }
        match self {
            Embedding::DownsamplePixels { k } => images.iter().map(|t| downsample(t, *k)).collect(),
            Embedding::RandomProjection { dim, seed } => {
                let d_in = first.numel();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let scale = 1.0 / (d_in as f64).sqrt();
                let proj: Vec<f64> = (0..dim * d_in).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z * scale).collect();
                Ok(images
                    .iter()
                    .map(|t| proj.chunks_exact(d_in).map(|row| row.iter().zip(t.data()).map(|(p, x)| p * x.as_f64()).sum()).collect())
                    .collect())
            }
            Embedding::ExternalFeatures { .. } => Err(Error::Config("external features are precomputed and cannot embed images; use load_features".into())),
        }
    }
}

fn downsample<T: Scalar>(img: &Tensor<T>, k: usize) -> Result<Vec<f64>> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("downsample_pixels", "image rank", "[C, H, W]", format!("{s:?}"))),
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape("downsample_pixels", "side divisible by k", format!("multiple of {k}"), format!("{h}x{w}")));
    }
    let (bh, bw) = (h / k, w / k);
    let norm = (bh * bw) as f64;
    let mut out = vec![0.0; c * k * k];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(ch * k + r / bh) * k + col / bw] += img.data()[(ch * h + r) * w + col].as_f64();
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_sidecar(path: &Path) -> Result<FeatureSidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads `count x dim` little-endian f32 features; the shape comes from
/// `<path>.json`.
pub fn load_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let meta = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let need = meta.count * meta.dim * 4;
    if bytes.len() < need {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if bytes.len() > need {
        return Err(Error::Corrupt { path: path.to_path_buf(), detail: format!("{} bytes, sidecar implies {need}", bytes.len()) });
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    Ok(values.chunks(meta.dim.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn save_features(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut bytes = Vec::with_capacity(rows.len() * dim * 4);
    for row in rows {
        if row.len() != dim {
            return Err(Error::shape("save_features", "row length", dim, row.len()));
        }
        row.iter().for_each(|&v| bytes.extend_from_slice(&(v as f32).to_le_bytes()));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string(&FeatureSidecar { count: rows.len(), dim })?).map_err(|e| Error::io(&side, e))
}

/// Fréchet distance between two feature sets, each with a ridge of
/// [`COVARIANCE_RIDGE`] on the covariance diagonal.
pub fn fid_between_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    for set in [a, b] {
        if set.len() < d + 1 {
            return Err(Error::TooFew { what: "images per FID set (embedding dim + 1)", need: d + 1, got: set.len() });
        }
    }
    let mut sa = GaussianStats::fit(a)?;
    let mut sb = GaussianStats::fit(b)?;
    sa.add_ridge(COVARIANCE_RIDGE);
    sb.add_ridge(COVARIANCE_RIDGE);
    frechet_distance(&sa, &sb)
}

pub fn fid_between_sets<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>], emb: &Embedding) -> Result<f64> {
    fid_between_features(&emb.embed(a)?, &emb.embed(b)?)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = g.iter().enumerate().map(|(i, gi)| gi * p[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = g.iter().enumerate().map(|(i, gi)| gi * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two `[C, H, W]` images in `[-1, 1]`, computed on
/// `[0, 1]` with dynamic range 1 and averaged over channels and positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", "image shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let (c, h, w) = match a.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("ssim", "image rank", "[C, H, W]", format!("{s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", "spatial size", format!(">= {SSIM_WINDOW}"), format!("{h}x{w}")));
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let g = gaussian_window();
    let unit = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| (v.as_f64() + 1.0) * 0.5).collect() };
    let (ua, ub) = (unit(a), unit(b));
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &ua[ch * plane..][..plane];
        let pb = &ub[ch * plane..][..plane];
        let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let e_aa = filter_valid(&prod(pa, pa), h, w, &g);
        let e_bb = filter_valid(&prod(pb, pb), h, w, &g);
        let e_ab = filter_valid(&prod(pa, pb), h, w, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean over unordered pairs of the mean absolute pixel difference.
pub fn diversity_score<T: Scalar>(outputs: &[Tensor<T>]) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::TooFew { what: "images for diversity", need: 2, got: outputs.len() });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            let (a, b) = (&outputs[i], &outputs[j]);
            if a.shape() != b.shape() {
                return Err(Error::shape("diversity_score", "image shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
            }
            let mad: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / a.numel() as f64;
            total += mad;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ssim_per_pair: Vec<f64>,
    pub diversity: f64,
    pub embedding_descriptor: String,
    pub set_sizes: [usize; 2],
}

/// FID of `outputs` against `reference`, SSIM against `ground_truth` when
/// pairs exist, and the diversity of `outputs`.
pub fn evaluate<T: Scalar>(outputs: &[Tensor<T>], reference: &[Tensor<T>], ground_truth: Option<&[Tensor<T>]>, emb: &Embedding) -> Result<EvalReport> {
    let fid = fid_between_sets(outputs, reference, emb)?;
    let ssim_per_pair = match ground_truth {
        Some(gt) => {
            if gt.len() != outputs.len() {
                return Err(Error::shape("evaluate", "ground-truth count", outputs.len(), gt.len()));
            }
            outputs.iter().zip(gt).map(|(o, g)| ssim(o, g)).collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    let ssim_mean = (!ssim_per_pair.is_empty()).then(|| ssim_per_pair.iter().sum::<f64>() / ssim_per_pair.len() as f64);
    Ok(EvalReport {
        fid,
        ssim_mean,
        ssim_per_pair,
        diversity: diversity_score(outputs)?,
        embedding_descriptor: emb.descriptor(),
        set_sizes: [outputs.len(), reference.len()],
    })
}
