//! Patch-gather convolution kernels.
//!
//! Every convolution is lowered to one matrix product per (sample, group):
//! `out[cout_g, P] = W[cout_g, K] * cols[K, P]` where `cols` is the im2col
//! matrix of the input plane (`K = cin_g * kh * kw`, `P = oh * ow`). The
//! transposed convolution reuses the same geometry with the roles of input
//! and output swapped.

use crate::scalar::Scalar;

/// Geometry of a single-group correlation from a `c x h x w` plane to an
/// `oh x ow` output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Gathers patches of `src` (`c*h*w`) into `cols` (`K x P`, row-major).
pub(crate) fn im2col<T: Scalar>(src: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.p();
    debug_assert_eq!(cols.len(), g.k() * p);
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` (`K x P`) back onto `dst` (`c*h*w`); adjoint of [`im2col`].
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geom, dst: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Layout of a grouped convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayout {
    pub n: usize,
    pub groups: usize,
    pub cout: usize,
    /// Per-group geometry (input channels = `cin / groups`).
    pub geom: Geom,
}

impl ConvLayout {
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn in_plane(&self) -> usize {
        self.geom.c * self.geom.h * self.geom.w
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    l: &ConvLayout,
) -> Vec<T> {
    let g = &l.geom;
    let (k, p, cout_g) = (g.k(), g.p(), l.cout_g());
    let cin = g.c * l.groups;
    let mut out = vec![T::zero(); l.n * l.cout * p];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..l.n {
        for grp in 0..l.groups {
            let src = &x[(n * cin + grp * g.c) * g.h * g.w..][..l.in_plane()];
            im2col(src, g, &mut cols);
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let dst = &mut out[(n * l.cout + grp * cout_g) * p..][..cout_g * p];
            T::gemm(cout_g, k, p, T::one(), wg, k as isize, 1, &cols, p as isize, 1, T::zero(), dst, p as isize, 1);
        }
        if let Some(b) = b {
            for co in 0..l.cout {
                let bias = b[co];
                out[(n * l.cout + co) * p..][..p].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    l: &ConvLayout,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = &l.geom;
    let (k, p, cout_g) = (g.k(), g.p(), l.cout_g());
    let cin = g.c * l.groups;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); l.cout];
        for n in 0..l.n {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dout[(n * l.cout + co) * p..][..p].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); k * p];
    for n in 0..l.n {
        for grp in 0..l.groups {
            let src_off = (n * cin + grp * g.c) * g.h * g.w;
            let dog = &dout[(n * l.cout + grp * cout_g) * p..][..cout_g * p];
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            if let Some(dw) = dw.as_mut() {
                im2col(&x[src_off..][..l.in_plane()], g, &mut cols);
                // dW[cout_g, K] += dOut[cout_g, P] * cols^T
                let dwg = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                T::gemm(cout_g, p, k, T::one(), dog, p as isize, 1, &cols, 1, p as isize, T::one(), dwg, k as isize, 1);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[K, P] = W^T * dOut
                T::gemm(k, cout_g, p, T::one(), wg, 1, k as isize, dog, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
                col2im(&cols, g, &mut dx[src_off..][..l.in_plane()]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Layout of an ungrouped transposed convolution. `geom` describes the
/// forward correlation from the *output* plane (`cout x oh x ow`) down to the
/// input grid (`h x w`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvTLayout {
    pub n: usize,
    pub cin: usize,
    pub geom: Geom,
}

pub(crate) fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, l: &ConvTLayout) -> Vec<T> {
    let g = &l.geom;
    let (k, hw) = (g.k(), g.p());
    let out_plane = g.c * g.h * g.w;
    let mut out = vec![T::zero(); l.n * out_plane];
    let mut cols = vec![T::zero(); k * hw];
    for n in 0..l.n {
        let xn = &x[n * l.cin * hw..][..l.cin * hw];
        // cols[K, HW] = W^T[K, cin] * x[cin, HW]
        T::gemm(k, l.cin, hw, T::one(), w, 1, k as isize, xn, hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
        let dst = &mut out[n * out_plane..][..out_plane];
        col2im(&cols, g, dst);
        if let Some(b) = b {
            for (co, &bias) in b.iter().enumerate() {
                dst[co * g.h * g.w..][..g.h * g.w].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub(crate) fn conv_t_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    l: &ConvTLayout,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = &l.geom;
    let (k, hw) = (g.k(), g.p());
    let out_plane = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.c];
        for n in 0..l.n {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dout[n * out_plane + co * g.h * g.w..][..g.h * g.w].iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return ConvGrads { dx, dw, db };
    }
    let mut cols = vec![T::zero(); k * hw];
    for n in 0..l.n {
        im2col(&dout[n * out_plane..][..out_plane], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            // dx[cin, HW] = W[cin, K] * dcols[K, HW]
            let dxn = &mut dx[n * l.cin * hw..][..l.cin * hw];
            T::gemm(l.cin, k, hw, T::one(), w, k as isize, 1, &cols, hw as isize, 1, T::zero(), dxn, hw as isize, 1);
        }
        if let Some(dw) = dw.as_mut() {
            // dW[cin, K] += x[cin, HW] * dcols^T
            let xn = &x[n * l.cin * hw..][..l.cin * hw];
            T::gemm(l.cin, hw, k, T::one(), xn, hw as isize, 1, &cols, 1, hw as isize, T::one(), dw, k as isize, 1);
        }
    }
    ConvGrads { dx, dw, db }
}
