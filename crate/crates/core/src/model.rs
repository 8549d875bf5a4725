//! Generators (F: X->Y, G: Y->X) and the multi-thread discriminator family.
//!
//! A discriminator with `n_threads = N` is N weak learners packed into one
//! stack of grouped convolutions: the input is tiled N times along channels,
//! every convolution uses `groups = N`, and the head emits one score channel
//! per thread. Thread `t` owns output-channel block `t` of every weight and
//! bias, so no parameter is shared between threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_GLOBAL_DEPTH: usize = 4;
pub const DEFAULT_PART_DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    ConvTranspose {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    InstanceNorm,
    Act(Activation),
    /// conv-norm-relu-conv-norm with identity skip.
    Residual(ConvParams, ConvParams),
    TileChannels(usize),
}

fn run_layers<T: Scalar>(layers: &[Layer], tape: &mut Tape<T>, bound: &Bound, mut h: Var) -> Result<Var> {
    let conv = |tape: &mut Tape<T>, p: &ConvParams, x: Var| {
        tape.conv2d(x, bound.var(p.weight), p.bias.map(|b| bound.var(b)), p.spec)
    };
    for layer in layers {
        h = match layer {
            Layer::Conv(p) => conv(tape, p, h)?,
            &Layer::ConvTranspose { weight, bias, stride, padding, output_padding } => {
                tape.conv_transpose2d(h, bound.var(weight), bias.map(|b| bound.var(b)), stride, padding, output_padding)?
            }
            Layer::InstanceNorm => tape.instance_norm(h, NORM_EPS)?,
            Layer::Act(Activation::Relu) => tape.relu(h)?,
            &Layer::Act(Activation::LeakyRelu(s)) => tape.leaky_relu(h, s)?,
            Layer::Act(Activation::Tanh) => tape.tanh(h)?,
            Layer::Residual(a, b) => {
                let y = conv(tape, a, h)?;
                let y = tape.instance_norm(y, NORM_EPS)?;
                let y = tape.relu(y)?;
                let y = conv(tape, b, y)?;
                let y = tape.instance_norm(y, NORM_EPS)?;
                tape.add(h, y)?
            }
            &Layer::TileChannels(n) => tape.tile_channels(h, n)?,
        };
    }
    Ok(h)
}

/// Seeded parameter factory: one ChaCha stream per tensor.
struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    counter: u64,
}

impl<T: Scalar> Init<'_, T> {
    fn gaussian(&mut self, name: String, shape: [usize; 4]) -> ParamId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(normal.sample(&mut rng)));
        self.store.insert(name, t)
    }

    fn zeros(&mut self, name: String, len: usize) -> ParamId {
        self.counter += 1;
        self.store.insert(name, Tensor::zeros([len]))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> ConvParams {
        let weight = self.gaussian(format!("{name}.weight"), [cout, cin / spec.groups, k, k]);
        let bias = Some(self.zeros(format!("{name}.bias"), cout));
        ConvParams { weight, bias, spec }
    }
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet<T> {
    pub layers: Vec<Layer>,
    pub params: ParamStore<T>,
    pub io_channels: (usize, usize),
    pub base_width: usize,
    pub n_res_blocks: usize,
}

/// Encoder/residual/decoder translator: 7x7 stem, two stride-2 downsamplers,
/// `n_res_blocks` residual blocks, two stride-2 transposed upsamplers and a
/// 7x7 tanh head. Output size equals input size for sides divisible by 4.
pub fn build_generator<T: Scalar>(base_width: usize, n_res_blocks: usize, seed: u64) -> Result<GeneratorNet<T>> {
    if base_width < 4 {
        return Err(Error::Config(format!("generator base_width must be >= 4, got {base_width}")));
    }
    if n_res_blocks < 1 {
        return Err(Error::Config("generator needs at least one residual block".into()));
    }
    let w = base_width;
    let mut params = ParamStore::new();
    let mut init = Init { store: &mut params, seed, counter: 0 };
    let mut layers = vec![
        Layer::Conv(init.conv("stem", 3, w, 7, ConvSpec::new(1, 3, 1))),
        Layer::InstanceNorm,
        Layer::Act(Activation::Relu),
        Layer::Conv(init.conv("down1", w, 2 * w, 3, ConvSpec::new(2, 1, 1))),
        Layer::InstanceNorm,
        Layer::Act(Activation::Relu),
        Layer::Conv(init.conv("down2", 2 * w, 4 * w, 3, ConvSpec::new(2, 1, 1))),
        Layer::InstanceNorm,
        Layer::Act(Activation::Relu),
    ];
    for r in 0..n_res_blocks {
        let a = init.conv(&format!("res{r}.conv1"), 4 * w, 4 * w, 3, ConvSpec::new(1, 1, 1));
        let b = init.conv(&format!("res{r}.conv2"), 4 * w, 4 * w, 3, ConvSpec::new(1, 1, 1));
        layers.push(Layer::Residual(a, b));
    }
    for (i, (cin, cout)) in [(4 * w, 2 * w), (2 * w, w)].into_iter().enumerate() {
        let name = format!("up{}", i + 1);
        let weight = init.gaussian(format!("{name}.weight"), [cin, cout, 3, 3]);
        let bias = Some(init.zeros(format!("{name}.bias"), cout));
        layers.push(Layer::ConvTranspose { weight, bias, stride: 2, padding: 1, output_padding: 1 });
        layers.push(Layer::InstanceNorm);
        layers.push(Layer::Act(Activation::Relu));
    }
    layers.push(Layer::Conv(init.conv("head", w, 3, 7, ConvSpec::new(1, 3, 1))));
    layers.push(Layer::Act(Activation::Tanh));
    Ok(GeneratorNet { layers, params, io_channels: (3, 3), base_width, n_res_blocks })
}

impl<T: Scalar> GeneratorNet<T> {
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4("generator")?;
        if c != self.io_channels.0 {
            return Err(Error::shape("generator", "input channels", self.io_channels.0, c));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::shape("generator", "spatial size", "a multiple of 4, at least 8", format!("{h}x{w}")));
        }
        run_layers(&self.layers, tape, bound, x)
    }

    /// Inference without gradient bookkeeping.
    pub fn translate(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

// ---------------------------------------------------------------------------
// Discriminators

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    /// D_g: scores whole target-domain images.
    Global,
    /// D_p: shallower, scores random crops of target-domain images.
    Part,
    /// D_X: scores whole source-domain images.
    Source,
}

impl DiscriminatorKind {
    pub fn default_depth(self) -> usize {
        match self {
            DiscriminatorKind::Part => DEFAULT_PART_DEPTH,
            DiscriminatorKind::Global | DiscriminatorKind::Source => DEFAULT_GLOBAL_DEPTH,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DiscriminatorKind::Global => "d_global",
            DiscriminatorKind::Part => "d_part",
            DiscriminatorKind::Source => "d_source",
        }
    }
}

/// Deepest stack whose normalized blocks all stay at least 2x2 on a
/// `side x side` input.
pub fn max_discriminator_depth(side: usize) -> usize {
    let (mut side, mut depth) = (side, 0);
    while let Some(next) = (side + 2).checked_sub(4).map(|s| s / 2 + 1) {
        if depth > 0 && next < 2 {
            break;
        }
        side = next;
        depth += 1;
    }
    depth
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<T> {
    pub layers: Vec<Layer>,
    pub params: ParamStore<T>,
    pub n_threads: usize,
    pub kind: DiscriminatorKind,
    pub depth: usize,
    pub base_width: usize,
    /// Channel width after each strided block.
    pub widths: Vec<usize>,
}

/// Width multiplier is capped so the deepest blocks stay at `4 * base_width`.
fn block_width(base: usize, level: usize) -> usize {
    base << level.min(2)
}

/// PatchGAN-style stack: `depth` stride-2 4x4 blocks (instance norm on all
/// but the first, leaky ReLU 0.2 everywhere) and a 3x3 head producing one
/// logit map per thread.
pub fn build_discriminator<T: Scalar>(
    kind: DiscriminatorKind,
    n_threads: usize,
    base_width: usize,
    depth: usize,
    seed: u64,
) -> Result<DiscriminatorNet<T>> {
    if n_threads == 0 {
        return Err(Error::Config("discriminator needs at least one thread".into()));
    }
    if base_width == 0 || base_width % n_threads != 0 {
        return Err(Error::GroupDivisibility { op: "build_discriminator", what: "base_width", value: base_width, groups: n_threads });
    }
    if depth < 2 {
        return Err(Error::Config(format!("discriminator depth must be >= 2, got {depth}")));
    }
    let n = n_threads;
    let mut params = ParamStore::new();
    let mut init = Init { store: &mut params, seed, counter: 0 };
    let mut layers = Vec::new();
    if n > 1 {
        layers.push(Layer::TileChannels(n));
    }
    let mut widths = Vec::with_capacity(depth);
    let mut cin = 3 * n;
    for level in 0..depth {
        let cout = block_width(base_width, level);
        layers.push(Layer::Conv(init.conv(&format!("block{level}"), cin, cout, 4, ConvSpec::new(2, 1, n))));
        if level > 0 {
            layers.push(Layer::InstanceNorm);
        }
        layers.push(Layer::Act(Activation::LeakyRelu(LEAKY_SLOPE)));
        widths.push(cout);
        cin = cout;
    }
    layers.push(Layer::Conv(init.conv("head", cin, n, 3, ConvSpec::new(1, 1, n))));
    Ok(DiscriminatorNet { layers, params, n_threads, kind, depth, base_width, widths })
}

impl<T: Scalar> DiscriminatorNet<T> {
    /// Side length of the score map for a square input of side `input`, or
    /// an error if the stack would shrink it below what it can normalize.
    pub fn output_side(&self, input: usize) -> Result<usize> {
        let mut side = input;
        for level in 0..self.depth {
            side = (side + 2).checked_sub(4).map(|s| s / 2 + 1).filter(|&s| s > 0).ok_or_else(|| Error::SpatialUnderflow {
                detail: format!("{} of depth {} cannot process {input}x{input} input", self.kind.label(), self.depth),
            })?;
            if level > 0 && side * side < 2 {
                return Err(Error::SpatialUnderflow {
                    detail: format!(
                        "{} of depth {}: block {level} output is {side}x{side} for {input}x{input} input, need at least 2x2",
                        self.kind.label(),
                        self.depth
                    ),
                });
            }
        }
        Ok(side)
    }

    /// Raw logit map of every thread: `n_threads` tensors of shape `[B, 1, h', w']`.
    pub fn forward_threads(&self, tape: &mut Tape<T>, bound: &Bound, batch: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = tape.value(batch).dims4(self.kind.label())?;
        if c != 3 {
            return Err(Error::shape(self.kind.label(), "input channels", 3, c));
        }
        self.output_side(h.min(w))?;
        let scores = run_layers(&self.layers, tape, bound, batch)?;
        (0..self.n_threads).map(|t| tape.select_channels(scores, t, 1)).collect()
    }

    /// Parameter slice `[start, end)` of `tensor` owned by `thread`.
    ///
    /// Every tensor is laid out output-channel major, so thread ownership is a
    /// contiguous block.
    pub fn thread_range(&self, id: ParamId, thread: usize) -> std::ops::Range<usize> {
        let len = self.params.get(id).numel();
        let chunk = len / self.n_threads;
        thread * chunk..(thread + 1) * chunk
    }
}
