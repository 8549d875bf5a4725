//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] is a single reverse sweep.
//! Broadcasting is not supported; binary ops need equal shapes and scalar
//! constants go through [`Tape::scale`] / [`Tape::add_scalar`].

pub(crate) mod conv;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use conv::{ConvLayout, ConvTLayout, Geom};

/// Handle to a node on a [`Tape`]. Unique within the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Neg,
    Abs,
    Square,
    Scale(f64),
    AddScalar(f64),
    /// `max(x, floor)`; gradient passes only where `x > floor`.
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Reduce(Var, Reduce),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        layout: ConvLayout,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        layout: ConvTLayout,
    },
    /// Saved per-(sample, channel) inverse standard deviations.
    InstanceNorm(Var, Vec<f64>),
    /// Window `[start, start+len)` on each of the four axes.
    Slice(Var, [(usize, usize); 4]),
    TileChannels(Var, usize),
    /// Per-sample spatial window: one `(row, col)` per batch item, fixed size.
    CropEach(Var, Vec<(usize, usize)>, usize),
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded; build one per forward/backward cycle.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    adj: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`. `None` if `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.adj.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient flag is taken from the tensor.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        t.set_requires_grad(false);
        self.push(Op::Leaf, t, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.push(Op::Leaf, t, false)
    }

    /// Which side of its kink every input of a non-smooth elementwise op
    /// (ReLU, leaky ReLU, abs, clamp) lies on, in tape order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Unary(x, kind) = node.op {
                let at = match kind {
                    Unary::Relu | Unary::LeakyRelu(_) | Unary::Abs => 0.0,
                    Unary::ClampMin(floor) => floor,
                    _ => continue,
                };
                out.extend(self.nodes[x.0].value.data().iter().map(|v| v.as_f64() > at));
            }
        }
        out
    }

    /// Re-records the value of `v` as a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if kind == Unary::Log {
            if let Some((i, v)) = xv.data().iter().enumerate().find(|(_, v)| **v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {v} at flat index {i}"),
                });
            }
        }
        let f = unary_fn::<T>(kind);
        let out = Tensor::from_fn(xv.shape().to_vec(), |i| f(xv.data()[i]));
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Unary(x, kind), out, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, Unary::ClampMin(floor))
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                binary_name(kind),
                "operand shape",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let (ad, bd) = (av.data(), bv.data());
        let out = Tensor::from_fn(av.shape().to_vec(), |i| match kind {
            Binary::Add => ad[i] + bd[i],
            Binary::Sub => ad[i] - bd[i],
            Binary::Mul => ad[i] * bd[i],
        });
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Binary(a, b, kind), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    // ---- reductions --------------------------------------------------------

    pub fn reduce(&mut self, x: Var, kind: Reduce) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() == 0 {
            return Err(Error::EmptyTensor {
                op: match kind {
                    Reduce::Mean => "mean",
                    Reduce::Sum => "sum",
                },
            });
        }
        let s: T = xv.data().iter().copied().sum();
        let v = match kind {
            Reduce::Sum => s,
            Reduce::Mean => s / T::lit(xv.numel() as f64),
        };
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reduce(x, kind), Tensor::scalar(v), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Mean)
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Sum)
    }

    /// Sum of a list of same-shaped nodes.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items.split_first().ok_or(Error::EmptyTensor { op: "add_all" })?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Arithmetic mean of a list of same-shaped nodes.
    pub fn mean_of(&mut self, items: &[Var]) -> Result<Var> {
        let total = self.add_all(items)?;
        if items.len() == 1 {
            return Ok(total);
        }
        self.scale(total, 1.0 / items.len() as f64)
    }

    // ---- convolution -------------------------------------------------------

    /// Grouped 2-D cross-correlation with zero padding.
    ///
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin/groups, kH, kW]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = self.nodes[x.0].value.dims4(OP)?;
        let (cout, cin_g, kh, kw) = self.nodes[w.0].value.dims4(OP)?;
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 {
            return Err(Error::GroupDivisibility { op: OP, what: "input channels", value: cin, groups });
        }
        if cout % groups != 0 {
            return Err(Error::GroupDivisibility { op: OP, what: "output channels", value: cout, groups });
        }
        if cin_g != cin / groups {
            return Err(Error::shape(OP, "weight dim 1 (Cin/groups)", cin / groups, cin_g));
        }
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [cout] {
                return Err(Error::shape(OP, "bias length", cout, format!("{bs:?}")));
            }
        }
        let oh = conv::out_size(h, kh, spec.stride, spec.padding)
            .ok_or_else(|| Error::shape(OP, "kernel height vs padded input height", format!("<= {}", h + 2 * spec.padding), kh))?;
        let ow = conv::out_size(wd, kw, spec.stride, spec.padding)
            .ok_or_else(|| Error::shape(OP, "kernel width vs padded input width", format!("<= {}", wd + 2 * spec.padding), kw))?;
        let layout = ConvLayout {
            n,
            groups,
            cout,
            geom: Geom { c: cin_g, h, w: wd, kh, kw, stride: spec.stride, pad: spec.padding, oh, ow },
        };
        let out = conv::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            &layout,
        );
        let rg = [Some(x), Some(w), b].iter().flatten().any(|v| self.nodes[v.0].requires_grad);
        let t = Tensor::new([n, cout, oh, ow], out)?;
        Ok(self.push(Op::Conv2d { x, w, b, layout }, t, rg))
    }

    /// Ungrouped transposed convolution.
    ///
    /// `x: [N, Cin, H, W]`, `w: [Cin, Cout, kH, kW]`; output side is
    /// `(H-1)*stride - 2*padding + kH + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, cin, h, wd) = self.nodes[x.0].value.dims4(OP)?;
        let (wcin, cout, kh, kw) = self.nodes[w.0].value.dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, "weight dim 0 (Cin)", cin, wcin));
        }
        if output_padding >= stride.max(1) {
            return Err(Error::shape(OP, "output_padding", format!("< stride {stride}"), output_padding));
        }
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.shape();
            if bs != [cout] {
                return Err(Error::shape(OP, "bias length", cout, format!("{bs:?}")));
            }
        }
        let full_h = (h - 1) * stride + kh + output_padding;
        let full_w = (wd - 1) * stride + kw + output_padding;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::shape(OP, "padding", "smaller than output extent", padding));
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        let layout = ConvTLayout {
            n,
            cin,
            geom: Geom { c: cout, h: oh, w: ow, kh, kw, stride, pad: padding, oh: h, ow: wd },
        };
        let out = conv::conv_t_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            &layout,
        );
        let rg = [Some(x), Some(w), b].iter().flatten().any(|v| self.nodes[v.0].requires_grad);
        let t = Tensor::new([n, cout, oh, ow], out)?;
        Ok(self.push(Op::ConvT2d { x, w, b, layout }, t, rg))
    }

    // ---- normalization & layout -------------------------------------------

    /// Per-(sample, channel) normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4("instance_norm")?;
        let m = h * w;
        if m < 2 {
            return Err(Error::DegenerateSpatial { h, w });
        }
        let mf = T::lit(m as f64);
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (plane, dst) in xv.data().chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            let mean = plane.iter().copied().sum::<T>() / mf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let inv = T::one() / (var + T::lit(eps)).sqrt();
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv.as_f64());
        }
        let rg = self.nodes[x.0].requires_grad;
        let t = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(Op::InstanceNorm(x, inv_std), t, rg))
    }

    /// Window of a rank-4 tensor; `ranges[d] = (start, len)` per axis.
    pub fn slice4(&mut self, x: Var, ranges: [(usize, usize); 4]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let dims: [usize; 4] = {
            let (a, b, c, d) = xv.dims4("slice")?;
            [a, b, c, d]
        };
        for (axis, (&(s, l), &d)) in ranges.iter().zip(&dims).enumerate() {
            if l == 0 || s + l > d {
                return Err(Error::shape("slice", format!("axis {axis} window [{s}, {})", s + l), format!("within 0..{d}"), s + l));
            }
        }
        let shape: Vec<usize> = ranges.iter().map(|r| r.1).collect();
        let src = xv.data();
        let mut out = Vec::with_capacity(shape.iter().product());
        for i in 0..ranges[0].1 {
            for j in 0..ranges[1].1 {
                for r in 0..ranges[2].1 {
                    let base = (((ranges[0].0 + i) * dims[1] + ranges[1].0 + j) * dims[2] + ranges[2].0 + r) * dims[3] + ranges[3].0;
                    out.extend_from_slice(&src[base..base + ranges[3].1]);
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(Op::Slice(x, ranges), t, rg))
    }

    /// Spatial `size_h x size_w` window at `(row, col)` over all samples and channels.
    pub fn crop(&mut self, x: Var, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<Var> {
        let (n, c, _, _) = self.nodes[x.0].value.dims4("crop")?;
        self.slice4(x, [(0, n), (0, c), (row, size_h), (col, size_w)])
    }

    /// Channels `[start, start+len)`.
    pub fn select_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, _, h, w) = self.nodes[x.0].value.dims4("select_channels")?;
        self.slice4(x, [(0, n), (start, len), (0, h), (0, w)])
    }

    /// Square `size x size` crop of every sample at its own `(row, col)`.
    pub fn crop_each(&mut self, x: Var, offsets: &[(usize, usize)], size: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4("crop_each")?;
        if offsets.len() != n {
            return Err(Error::shape("crop_each", "offset count", n, offsets.len()));
        }
        if size == 0 || size > h || size > w {
            return Err(Error::shape("crop_each", "part size", format!("1..={}", h.min(w)), size));
        }
        let mut out = Vec::with_capacity(n * c * size * size);
        for (s, &(r0, c0)) in offsets.iter().enumerate() {
            if r0 + size > h || c0 + size > w {
                return Err(Error::shape("crop_each", format!("offset of sample {s}"), format!("<= ({}, {})", h - size, w - size), format!("({r0}, {c0})")));
            }
            for ch in 0..c {
                let plane = &xv.data()[(s * c + ch) * h * w..][..h * w];
                for r in r0..r0 + size {
                    out.extend_from_slice(&plane[r * w + c0..r * w + c0 + size]);
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let t = Tensor::new([n, c, size, size], out)?;
        Ok(self.push(Op::CropEach(x, offsets.to_vec(), size), t, rg))
    }

    /// Concatenates `times` copies of the input along the channel axis.
    pub fn tile_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4("tile_channels")?;
        if times == 0 {
            return Err(Error::shape("tile_channels", "repeat count", ">= 1", 0));
        }
        let plane = c * h * w;
        let mut out = Vec::with_capacity(n * plane * times);
        for s in xv.data().chunks_exact(plane) {
            for _ in 0..times {
                out.extend_from_slice(s);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let t = Tensor::new([n, c * times, h, w], out)?;
        Ok(self.push(Op::TileChannels(x, times), t, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires grad gets an adjoint; leaves the loss does not
    /// depend on get zeros. Calling this twice on the same tape is allowed and
    /// returns independent results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let (before, after) = adj.split_at_mut(i);
            let Some(g) = after[0].as_deref() else { continue };
            self.propagate(i, g, before);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && adj[i].is_none() {
                adj[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { adj })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(x, kind) => {
                if !self.wants(x) {
                    return;
                }
                let xd = self.nodes[x.0].value.data();
                let yd = node.value.data();
                let d = unary_grad::<T>(kind);
                let gx: Vec<T> = (0..g.len()).map(|k| g[k] * d(xd[k], yd[k])).collect();
                accumulate(adj, x, gx);
            }
            &Op::Binary(a, b, kind) => {
                let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.wants(a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().zip(bd).map(|(&g, &b)| g * b).collect(),
                    };
                    accumulate(adj, a, ga);
                }
                if self.wants(b) {
                    let gb = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&g| -g).collect(),
                        Binary::Mul => g.iter().zip(ad).map(|(&g, &a)| g * a).collect(),
                    };
                    accumulate(adj, b, gb);
                }
            }
            &Op::Reduce(x, kind) => {
                if !self.wants(x) {
                    return;
                }
                let k = self.nodes[x.0].value.numel();
                let v = match kind {
                    Reduce::Sum => g[0],
                    Reduce::Mean => g[0] / T::lit(k as f64),
                };
                accumulate(adj, x, vec![v; k]);
            }
            &Op::Conv2d { x, w, b, ref layout } => {
                let need = (self.wants(x), self.wants(w), b.is_some_and(|b| self.wants(b)));
                let grads = conv::conv2d_backward(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), g, layout, need);
                self.scatter_conv(adj, x, w, b, grads);
            }
            &Op::ConvT2d { x, w, b, ref layout } => {
                let need = (self.wants(x), self.wants(w), b.is_some_and(|b| self.wants(b)));
                let grads = conv::conv_t_backward(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), g, layout, need);
                self.scatter_conv(adj, x, w, b, grads);
            }
            Op::InstanceNorm(x, inv_std) => {
                let x = *x;
                if !self.wants(x) {
                    return;
                }
                let (_, _, h, w) = node.value.dims4("instance_norm").expect("rank checked at record time");
                let m = h * w;
                let mf = T::lit(m as f64);
                let yd = node.value.data();
                let mut gx = vec![T::zero(); yd.len()];
                for (p, &inv) in inv_std.iter().enumerate() {
                    let (gy, y) = (&g[p * m..(p + 1) * m], &yd[p * m..(p + 1) * m]);
                    let sum_g: T = gy.iter().copied().sum();
                    let sum_gy: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    let inv = T::lit(inv) / mf;
                    for k in 0..m {
                        gx[p * m + k] = inv * (mf * gy[k] - sum_g - y[k] * sum_gy);
                    }
                }
                accumulate(adj, x, gx);
            }
            &Op::Slice(x, ranges) => {
                if !self.wants(x) {
                    return;
                }
                let xs = self.nodes[x.0].value.shape();
                let dims = [xs[0], xs[1], xs[2], xs[3]];
                let mut gx = vec![T::zero(); dims.iter().product()];
                let mut src = g.chunks_exact(ranges[3].1);
                for i in 0..ranges[0].1 {
                    for j in 0..ranges[1].1 {
                        for r in 0..ranges[2].1 {
                            let base = (((ranges[0].0 + i) * dims[1] + ranges[1].0 + j) * dims[2] + ranges[2].0 + r) * dims[3] + ranges[3].0;
                            let row = src.next().expect("slice gradient length");
                            gx[base..base + ranges[3].1].copy_from_slice(row);
                        }
                    }
                }
                accumulate(adj, x, gx);
            }
            &Op::TileChannels(x, times) => {
                if !self.wants(x) {
                    return;
                }
                let plane = self.nodes[x.0].value.numel() / self.nodes[x.0].value.shape()[0];
                let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (s, dst) in gx.chunks_exact_mut(plane).enumerate() {
                    for t in 0..times {
                        let src = &g[(s * times + t) * plane..][..plane];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
                accumulate(adj, x, gx);
            }
            Op::CropEach(x, offsets, size) => {
                let (x, size) = (*x, *size);
                if !self.wants(x) {
                    return;
                }
                let xs = self.nodes[x.0].value.shape();
                let (c, h, w) = (xs[1], xs[2], xs[3]);
                let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                let mut rows = g.chunks_exact(size);
                for (s, &(r0, c0)) in offsets.iter().enumerate() {
                    for ch in 0..c {
                        let plane = &mut gx[(s * c + ch) * h * w..][..h * w];
                        for r in r0..r0 + size {
                            plane[r * w + c0..r * w + c0 + size].copy_from_slice(rows.next().expect("crop gradient length"));
                        }
                    }
                }
                accumulate(adj, x, gx);
            }
        }
    }

    fn scatter_conv(&self, adj: &mut [Option<Vec<T>>], x: Var, w: Var, b: Option<Var>, grads: conv::ConvGrads<T>) {
        if let Some(dx) = grads.dx {
            accumulate(adj, x, dx);
        }
        if let Some(dw) = grads.dw {
            accumulate(adj, w, dw);
        }
        if let (Some(b), Some(db)) = (b, grads.db) {
            accumulate(adj, b, db);
        }
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut adj[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    }
}

fn unary_fn<T: Scalar>(kind: Unary) -> impl Fn(T) -> T {
    move |x: T| match kind {
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                x * T::lit(s)
            }
        }
        // `max` would turn NaN into the bound and hide a diverged input
        Unary::Relu if x.is_nan() => x,
        Unary::ClampMin(_) if x.is_nan() => x,
        Unary::Relu => x.max(T::zero()),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Log => x.ln(),
        Unary::Neg => -x,
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Scale(c) => x * T::lit(c),
        Unary::AddScalar(c) => x + T::lit(c),
        Unary::ClampMin(f) => x.max(T::lit(f)),
    }
}

/// Local derivative as a function of (input, output).
fn unary_grad<T: Scalar>(kind: Unary) -> impl Fn(T, T) -> T {
    move |x: T, y: T| match kind {
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                T::lit(s)
            }
        }
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Log => T::one() / x,
        Unary::Neg => -T::one(),
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Square => x + x,
        Unary::Scale(c) => T::lit(c),
        Unary::AddScalar(_) => T::one(),
        Unary::ClampMin(f) => {
            if x > T::lit(f) {
                T::one()
            } else {
                T::zero()
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
