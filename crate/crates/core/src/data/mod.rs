//! Images, augmentation, part crops, one-shot batches and the synthetic corpus.

pub mod augment;
pub mod io;
pub mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment, center_crop_resize, hflip, rotate, AugmentFlags};

pub const SUPPORTED_SIZES: [usize; 3] = [32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug)]
pub struct ImageSample<T: Scalar> {
    pub pixels: Tensor<T>,
    pub domain: Domain,
    pub id: String,
}

impl<T: Scalar> ImageSample<T> {
    /// Checks shape `[3, S, S]` with `S` in [`SUPPORTED_SIZES`] and values in `[-1, 1]`.
    pub fn new(pixels: Tensor<T>, domain: Domain, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let side = match pixels.shape() {
            &[3, h, w] if h == w => h,
            s => return Err(Error::shape("image_sample", format!("image `{id}`"), "[3, S, S]", format!("{s:?}"))),
        };
        if !SUPPORTED_SIZES.contains(&side) {
            return Err(Error::shape("image_sample", format!("side of `{id}`"), "32, 64 or 128", side));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(v.abs() <= T::one())) {
            return Err(Error::Domain { op: "image_sample", detail: format!("pixel {v} of `{id}` outside [-1, 1]") });
        }
        Ok(ImageSample { pixels, domain, id })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Random square crops of a fixed size. Owns its random stream so crop
/// positions do not depend on how many draws other components make.
#[derive(Clone, Debug)]
pub struct CropSpec {
    pub part_size: usize,
    pub rng: ChaCha8Rng,
}

impl CropSpec {
    pub fn new(part_size: usize, seed: u64, stream: u64) -> Result<Self> {
        if part_size == 0 {
            return Err(Error::Config("part_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Ok(CropSpec { part_size, rng })
    }

    /// One `(row, col)` per sample, uniform over `{0..=side-p}^2`.
    pub fn sample_offsets(&mut self, n: usize, side: usize) -> Result<Vec<(usize, usize)>> {
        if self.part_size > side {
            return Err(Error::shape("random_part_crop", "part size", format!("<= {side}"), self.part_size));
        }
        let span = side - self.part_size;
        Ok((0..n).map(|_| (self.rng.random_range(0..=span), self.rng.random_range(0..=span))).collect())
    }
}

/// Crops every sample of `img` (`[N, 3, H, H]`) at a fresh random offset.
/// The crop is a tape op, so gradients reach only the cropped windows.
pub fn random_part_crop<T: Scalar>(tape: &mut Tape<T>, img: Var, spec: &mut CropSpec) -> Result<(Var, Vec<(usize, usize)>)> {
    let (n, _, h, w) = tape.value(img).dims4("random_part_crop")?;
    let offsets = spec.sample_offsets(n, h.min(w))?;
    let crops = tape.crop_each(img, &offsets, spec.part_size)?;
    Ok((crops, offsets))
}

#[derive(Clone, Debug)]
pub struct OneShotDataset<T: Scalar> {
    pub source_images: Vec<ImageSample<T>>,
    pub target_image: ImageSample<T>,
    pub augmentation: AugmentFlags,
}

impl<T: Scalar> OneShotDataset<T> {
    pub fn new(source_images: Vec<ImageSample<T>>, target_image: ImageSample<T>, augmentation: AugmentFlags) -> Result<Self> {
        if source_images.is_empty() {
            return Err(Error::TooFew { what: "source images", need: 1, got: 0 });
        }
        let side = target_image.side();
        if let Some(bad) = source_images.iter().find(|s| s.side() != side) {
            return Err(Error::shape("one_shot_dataset", format!("side of `{}`", bad.id), side, bad.side()));
        }
        Ok(OneShotDataset { source_images, target_image, augmentation })
    }

    pub fn side(&self) -> usize {
        self.target_image.side()
    }
}

/// Without-replacement sampling over source indices, reshuffled each epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSampler {
    pub order: Vec<usize>,
    pub pos: usize,
    pub epoch: u64,
}

impl EpochSampler {
    /// The first epoch is shuffled lazily on the first draw.
    pub fn new(len: usize) -> Self {
        EpochSampler { order: (0..len).collect(), pos: len, epoch: 0 }
    }

    /// Next `n` indices. A batch that runs past the end of an epoch continues
    /// into a freshly shuffled one.
    pub fn next_indices(&mut self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// `(source_batch, target_batch)`, both `[B, 3, S, S]`. Target rows are
/// independent augmentations of the single target image.
pub fn one_shot_batch<T: Scalar>(
    ds: &OneShotDataset<T>,
    sampler: &mut EpochSampler,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let idx = sampler.next_indices(batch_size, rng);
    let source: Vec<Tensor<T>> = idx.iter().map(|&i| ds.source_images[i].pixels.clone()).collect();
    let target: Vec<Tensor<T>> = (0..batch_size).map(|_| augment(&ds.target_image.pixels, ds.augmentation, rng)).collect();
    Ok((Tensor::stack(&source)?, Tensor::stack(&target)?))
}
