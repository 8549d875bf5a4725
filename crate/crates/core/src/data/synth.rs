//! Procedural two-domain corpus with an exact oracle translation.
//!
//! Source images are red-ish shapes on a textured blue-ish background. The
//! oracle rotates every pixel's hue by half a turn (`c' = max + min - c`,
//! which keeps value and saturation) and draws a one-pixel black outline
//! along the inside of the shape boundary. The shape mask is recoverable
//! from any source image as the pixels whose red exceeds their blue, so the
//! oracle needs nothing but the image.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::AugmentFlags;
use super::io::{load_tensor, save_ppm, to_byte, to_unit};
use super::{Domain, ImageSample, OneShotDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_TEST: u64 = 3;

pub const TEXTURE_AMPLITUDE: f64 = 0.08;
pub const OUTLINE_VALUE: f64 = -1.0;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

/// Everything needed to render one source image at any resolution.
/// Positions and sizes are fractions of the side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: ShapeKind,
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub angle: f64,
    pub background_hsv: [f64; 3],
    pub shape_hsv: [f64; 3],
    pub texture_freq: f64,
    pub texture_angle: f64,
    pub texture_phase: f64,
}

impl Scene {
    pub fn sample(rng: &mut impl Rng) -> Scene {
        let shape = match rng.random_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        Scene {
            shape,
            center: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)],
            radii: [rng.random_range(0.18..0.35), rng.random_range(0.18..0.35)],
            angle: rng.random_range(0.0..TAU),
            background_hsv: [rng.random_range(0.55..0.68), rng.random_range(0.45..0.7), rng.random_range(0.6..0.85)],
            shape_hsv: [rng.random_range(-0.06..0.06), rng.random_range(0.7..0.95), rng.random_range(0.75..1.0)],
            texture_freq: rng.random_range(2.0..5.0),
            texture_angle: rng.random_range(0.0..TAU),
            texture_phase: rng.random_range(0.0..TAU),
        }
    }

    /// Whether the point `(v, u)` (row, column fractions) lies in the shape.
    pub fn contains(&self, v: f64, u: f64) -> bool {
        let (dy, dx) = (v - self.center[0], u - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
        match self.shape {
            ShapeKind::Ellipse => (a / self.radii[0]).powi(2) + (b / self.radii[1]).powi(2) <= 1.0,
            ShapeKind::Rectangle => a.abs() <= self.radii[0] && b.abs() <= self.radii[1],
            ShapeKind::Triangle => {
                let r = self.radii[0].max(self.radii[1]);
                let vert = |k: f64| {
                    let t = self.angle + k * TAU / 3.0;
                    (self.center[1] + r * t.cos(), self.center[0] + r * t.sin())
                };
                let (p0, p1, p2) = (vert(0.0), vert(1.0), vert(2.0));
                let edge = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
                let (e0, e1, e2) = (edge(p0, p1), edge(p1, p2), edge(p2, p0));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    pub fn mask(&self, side: usize) -> Vec<bool> {
        let px = |i: usize| (i as f64 + 0.5) / side as f64;
        (0..side * side).map(|i| self.contains(px(i / side), px(i % side))).collect()
    }
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders on the 8-bit grid, so saving and reloading as PPM is exact.
pub fn render_source<T: Scalar>(scene: &Scene, side: usize) -> Tensor<T> {
    let mask = scene.mask(side);
    let plane = side * side;
    let mut bytes = vec![0u8; 3 * plane];
    let (ts, tc) = scene.texture_angle.sin_cos();
    for (i, &inside) in mask.iter().enumerate() {
        let (v, u) = ((i / side) as f64 / side as f64, (i % side) as f64 / side as f64);
        let rgb = if inside {
            hsv_to_rgb(scene.shape_hsv)
        } else {
            let wave = (TAU * scene.texture_freq * (u * tc + v * ts) + scene.texture_phase).sin();
            let [h, s, val] = scene.background_hsv;
            hsv_to_rgb([h, s, (val + TEXTURE_AMPLITUDE * wave).clamp(0.0, 1.0)])
        };
        for (c, x) in rgb.iter().enumerate() {
            bytes[c * plane + i] = (x * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Tensor::from_fn([3, side, side], |i| to_unit(bytes[i]))
}

fn dims<T: Scalar>(img: &Tensor<T>) -> Result<usize> {
    match img.shape() {
        &[3, h, w] if h == w => Ok(h),
        s => Err(Error::shape("oracle", "image", "[3, S, S]", format!("{s:?}"))),
    }
}

/// Per-pixel half-turn hue rotation. An involution.
pub fn hue_flip<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let side = dims(img)?;
    let plane = side * side;
    let d = img.data();
    let mut out = img.clone();
    let o = out.data_mut();
    for i in 0..plane {
        let px = [d[i], d[plane + i], d[2 * plane + i]];
        let hi = px[0].max(px[1]).max(px[2]);
        let lo = px[0].min(px[1]).min(px[2]);
        for c in 0..3 {
            o[c * plane + i] = hi + lo - px[c];
        }
    }
    Ok(out)
}

/// Shape mask of a source-domain image: red strictly above blue.
pub fn source_mask<T: Scalar>(img: &Tensor<T>) -> Result<Vec<bool>> {
    let side = dims(img)?;
    let plane = side * side;
    let d = img.data();
    Ok((0..plane).map(|i| d[i] > d[2 * plane + i]).collect())
}

/// Mask pixels with a 4-neighbour outside the mask or the image.
pub fn inner_outline(mask: &[bool], side: usize) -> Vec<bool> {
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < side && (c as usize) < side && mask[r as usize * side + c as usize];
    (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as isize, (i % side) as isize);
            mask[i] && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1))
        })
        .collect()
}

/// Exact target-domain counterpart of a source image.
pub fn oracle<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let side = dims(img)?;
    let outline = inner_outline(&source_mask(img)?, side);
    let mut out = hue_flip(img)?;
    let plane = side * side;
    for (i, _) in outline.iter().enumerate().filter(|(_, &o)| o) {
        for c in 0..3 {
            out.data_mut()[c * plane + i] = T::lit(OUTLINE_VALUE);
        }
    }
    Ok(out)
}

/// Oracle of the rendered source, snapped back onto the 8-bit grid (the
/// half-turn of grid values lands within rounding error of the grid).
pub fn render_target<T: Scalar>(scene: &Scene, side: usize) -> Tensor<T> {
    let mut y = oracle(&render_source::<T>(scene, side)).expect("rendered images are square RGB");
    for v in y.data_mut() {
        *v = to_unit(to_byte(*v));
    }
    y
}

fn scene_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index);
    rng
}

/// Scenes of the `index`-th image in each split depend only on
/// `(seed, split, index)`.
pub fn source_scenes(n: usize, seed: u64) -> Vec<Scene> {
    (0..n as u64).map(|i| Scene::sample(&mut scene_rng(seed, STREAM_SOURCE, i))).collect()
}

pub fn target_scene(seed: u64) -> Scene {
    Scene::sample(&mut scene_rng(seed, STREAM_TARGET, 0))
}

pub fn test_scenes(n: usize, seed: u64) -> Vec<Scene> {
    (0..n as u64).map(|i| Scene::sample(&mut scene_rng(seed, STREAM_TEST, i))).collect()
}

/// Held-out `(input, ground truth)` pairs.
pub fn paired_test_set<T: Scalar>(n: usize, side: usize, seed: u64) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
    test_scenes(n, seed).iter().map(|s| (render_source(s, side), render_target(s, side))).unzip()
}

#[derive(Clone, Debug)]
pub struct SynthCorpus<T: Scalar> {
    pub dataset: OneShotDataset<T>,
    pub source_scenes: Vec<Scene>,
    pub target_scene: Scene,
    pub seed: u64,
}

pub fn synth_corpus<T: Scalar>(n_source: usize, side: usize, seed: u64) -> Result<SynthCorpus<T>> {
    if n_source < 2 {
        return Err(Error::TooFew { what: "synthetic source images", need: 2, got: n_source });
    }
    let scenes = source_scenes(n_source, seed);
    let sources = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| ImageSample::new(render_source(s, side), Domain::Source, format!("source_{i:04}")))
        .collect::<Result<Vec<_>>>()?;
    let target_scene = target_scene(seed);
    let target = ImageSample::new(render_target(&target_scene, side), Domain::Target, "target_0000")?;
    let dataset = OneShotDataset::new(sources, target, AugmentFlags::all())?;
    Ok(SynthCorpus { dataset, source_scenes: scenes, target_scene, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub domain: Domain,
    pub split: Split,
    /// Id of the ground-truth counterpart for test inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_with: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Scene>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub kind: String,
    pub mask_rule: String,
    pub outline_width: usize,
    pub outline_value: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            kind: "hue_half_turn_with_outline".into(),
            mask_rule: "red > blue".into(),
            outline_width: 1,
            outline_value: OUTLINE_VALUE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub oracle: OracleParams,
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn entries(&self, domain: Domain, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.images.iter().filter(move |e| e.domain == domain && e.split == split)
    }
}

/// Writes the corpus plus `n_test` held-out pairs as PPM files under `dir`
/// and returns the manifest (also written to `dir/manifest.json`).
pub fn write_corpus<T: Scalar>(corpus: &SynthCorpus<T>, n_test: usize, dir: &Path) -> Result<Manifest> {
    let side = corpus.dataset.side();
    for sub in ["source", "target", "test/source", "test/target"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut images = Vec::new();
    let mut put = |img: &Tensor<T>, rel: String, entry: ManifestEntry| -> Result<()> {
        save_ppm(img, &dir.join(&rel))?;
        images.push(ManifestEntry { path: rel.into(), ..entry });
        Ok(())
    };
    for (sample, scene) in corpus.dataset.source_images.iter().zip(&corpus.source_scenes) {
        let entry = ManifestEntry { id: sample.id.clone(), path: PathBuf::new(), domain: Domain::Source, split: Split::Train, paired_with: None, scene: Some(scene.clone()) };
        put(&sample.pixels, format!("source/{}.ppm", sample.id), entry)?;
    }
    let t = &corpus.dataset.target_image;
    let entry = ManifestEntry { id: t.id.clone(), path: PathBuf::new(), domain: Domain::Target, split: Split::Train, paired_with: None, scene: Some(corpus.target_scene.clone()) };
    put(&t.pixels, format!("target/{}.ppm", t.id), entry)?;
    for (i, scene) in test_scenes(n_test, corpus.seed).iter().enumerate() {
        let (xid, yid) = (format!("test_x_{i:04}"), format!("test_y_{i:04}"));
        let x = ManifestEntry { id: xid.clone(), path: PathBuf::new(), domain: Domain::Source, split: Split::Test, paired_with: Some(yid.clone()), scene: Some(scene.clone()) };
        put(&render_source(scene, side), format!("test/source/{i:04}.ppm"), x)?;
        let y = ManifestEntry { id: yid.clone(), path: PathBuf::new(), domain: Domain::Target, split: Split::Test, paired_with: Some(xid), scene: Some(scene.clone()) };
        put(&render_target(scene, side), format!("test/target/{i:04}.ppm"), y)?;
    }
    let manifest = Manifest { seed: corpus.seed, image_size: side, oracle: OracleParams::default(), images };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Training split of a corpus directory (or manifest file) as a dataset.
pub fn load_dataset<T: Scalar>(path: &Path, flags: AugmentFlags) -> Result<(Manifest, OneShotDataset<T>)> {
    let (dir, file) = if path.is_dir() { (path.to_path_buf(), path.join(MANIFEST_FILE)) } else { (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf()) };
    let manifest = Manifest::load(&file)?;
    let load = |e: &ManifestEntry| ImageSample::new(load_tensor(&dir.join(&e.path), true)?, e.domain, e.id.clone());
    let sources = manifest.entries(Domain::Source, Split::Train).map(load).collect::<Result<Vec<_>>>()?;
    let targets: Vec<&ManifestEntry> = manifest.entries(Domain::Target, Split::Train).collect();
    let target = match targets.as_slice() {
        [one] => load(one)?,
        [] => return Err(Error::TooFew { what: "target images in manifest", need: 1, got: 0 }),
        many => return Err(Error::Config(format!("one-shot corpus must hold exactly one target image, manifest lists {}", many.len()))),
    };
    let dataset = OneShotDataset::new(sources, target, flags)?;
    Ok((manifest, dataset))
}

/// Held-out `(input, ground truth)` pairs listed in a manifest.
pub fn load_test_pairs<T: Scalar>(manifest: &Manifest, dir: &Path) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for x in manifest.entries(Domain::Source, Split::Test) {
        let yid = x.paired_with.as_deref().ok_or_else(|| Error::Config(format!("test input `{}` has no pair", x.id)))?;
        let y = manifest.images.iter().find(|e| e.id == yid).ok_or_else(|| Error::Config(format!("pair `{yid}` missing from manifest")))?;
        xs.push(load_tensor(&dir.join(&x.path), true)?);
        ys.push(load_tensor(&dir.join(&y.path), true)?);
    }
    Ok((xs, ys))
}
