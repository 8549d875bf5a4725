//! Geometric augmentation of single `[3, S, S]` images.
//!
//! All resampling is bilinear with border replication, so every output pixel
//! is a convex combination of input pixels and the value range is preserved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const CENTER_CROP_FRACTION: f64 = 7.0 / 8.0;
pub const FLIP_PROBABILITY: f64 = 0.5;
pub const CROP_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    pub flip: bool,
    pub rotate: bool,
    pub center_crop: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        AugmentFlags { flip: true, rotate: true, center_crop: true }
    }

    pub fn none() -> Self {
        AugmentFlags { flip: false, rotate: false, center_crop: false }
    }
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self::all()
    }
}

fn planes<T: Scalar>(img: &Tensor<T>) -> (usize, usize, usize) {
    match img.shape() {
        &[c, h, w] => (c, h, w),
        s => panic!("augment expects a [C, H, W] image, got {s:?}"),
    }
}

/// Samples plane `p` at fractional `(y, x)`, clamping to the border.
fn bilinear<T: Scalar>(p: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| p[r * w + c].as_f64();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    T::lit(top * (1.0 - fy) + bot * fy)
}

/// Output pixel `(r, c)` reads the input at `map(r, c)`.
fn resample<T: Scalar>(img: &Tensor<T>, map: impl Fn(usize, usize) -> (f64, f64)) -> Tensor<T> {
    let (ch, h, w) = planes(img);
    let mut out = Vec::with_capacity(ch * h * w);
    for plane in img.data().chunks_exact(h * w) {
        for r in 0..h {
            for c in 0..w {
                let (y, x) = map(r, c);
                out.push(bilinear(plane, h, w, y, x));
            }
        }
    }
    Tensor::new([ch, h, w], out).expect("resample keeps the shape")
}

pub fn hflip<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (_, _, w) = planes(img);
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Rotation about the image center, counter-clockwise for positive `degrees`.
pub fn rotate<T: Scalar>(img: &Tensor<T>, degrees: f64) -> Tensor<T> {
    let (_, h, w) = planes(img);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    resample(img, |r, col| {
        let (dy, dx) = (r as f64 - cy, col as f64 - cx);
        (cy + c * dy + s * dx, cx - s * dy + c * dx)
    })
}

/// Center crop keeping `fraction` of the side, resized back to full size.
pub fn center_crop_resize<T: Scalar>(img: &Tensor<T>, fraction: f64) -> Tensor<T> {
    let (_, h, w) = planes(img);
    let side_h = (h as f64 * fraction).round().max(1.0);
    let side_w = (w as f64 * fraction).round().max(1.0);
    let (oy, ox) = ((h as f64 - side_h) / 2.0, (w as f64 - side_w) / 2.0);
    let (sy, sx) = (side_h / h as f64, side_w / w as f64);
    resample(img, |r, c| (oy + (r as f64 + 0.5) * sy - 0.5, ox + (c as f64 + 0.5) * sx - 0.5))
}

/// Random flip, small rotation and center crop, each gated by `flags`.
/// Disabled steps draw nothing from `rng`.
pub fn augment<T: Scalar>(img: &Tensor<T>, flags: AugmentFlags, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = img.clone();
    if flags.flip && rng.random_bool(FLIP_PROBABILITY) {
        out = hflip(&out);
    }
    if flags.rotate {
        let deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        out = rotate(&out, deg);
    }
    if flags.center_crop && rng.random_bool(CROP_PROBABILITY) {
        out = center_crop_resize(&out, CENTER_CROP_FRACTION);
    }
    out
}
