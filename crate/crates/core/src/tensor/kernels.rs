//! Forward and backward kernels on raw buffers in `[C, H, W]` layout.
//!
//! These carry no autodiff bookkeeping; [`super::Tape`] and
//! [`super::Eager`] both call into them.

use crate::error::{Error, Result};

use super::{Element, Tensor};

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Mirror without repeating the edge pixel (`[2 1 | 0 1 2 | 1 0]`).
    Reflect,
    Zero,
}

/// Upper bound on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 18;

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Validated geometry of one convolution call.
#[derive(Clone, Debug)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub padding: Padding,
}

/// Convolutions with at most this many output channels (and stride 1) skip
/// im2col: a gemm with so few rows is dominated by packing.
const DIRECT_MAX_COUT: usize = 4;

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let &[c_in, h, w] = input else {
            return Err(Error::shape(OP, "input rank", 3, input.len()));
        };
        let &[c_out, wc_in, kh, kw] = weight else {
            return Err(Error::shape(OP, "weight rank", 4, weight.len()));
        };
        if wc_in != c_in {
            return Err(Error::shape(OP, "input channels (weight dim 1)", c_in, wc_in));
        }
        if kh != kw {
            return Err(Error::invalid(OP, format!("non-square kernel {kh}x{kw}")));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(Error::invalid(OP, format!("even kernel size {k} is not supported")));
        }
        if bias != [c_out] {
            return Err(Error::shape(OP, "bias", [c_out], bias));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(OP, format!("stride {stride} not in {{1, 2}}")));
        }
        let pad = (k - 1) / 2;
        if padding == Padding::Reflect && (h <= pad || w <= pad) {
            return Err(Error::invalid(
                OP,
                format!("input {h}x{w} too small for reflection padding of {pad}"),
            ));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid(OP, "empty spatial extent"));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h - 1) / stride + 1,
            w_out: (w - 1) / stride + 1,
            padding,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.c_out, self.h_out, self.w_out]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    fn direct(&self) -> bool {
        self.stride == 1 && self.c_out <= DIRECT_MAX_COUT
    }

    /// Source index for padded coordinate `p` along an axis of length `n`.
    fn source(&self, p: usize, n: usize) -> Option<usize> {
        let i = p as isize - self.pad as isize;
        match self.padding {
            Padding::Reflect => Some(reflect_index(i, n)),
            Padding::Zero if i < 0 || i >= n as isize => None,
            Padding::Zero => Some(i as usize),
        }
    }

    fn pad_input<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (hp, wp) = self.padded();
        let (h, w, p) = (self.h, self.w, self.pad);
        let mut out = vec![T::zero(); self.c_in * hp * wp];
        let cols: Vec<Option<usize>> = (0..wp).map(|px| self.source(px, w)).collect();
        for ci in 0..self.c_in {
            for py in 0..hp {
                let Some(iy) = self.source(py, h) else { continue };
                let src = &x[(ci * h + iy) * w..][..w];
                let dst = &mut out[(ci * hp + py) * wp..][..wp];
                dst[p..p + w].copy_from_slice(src);
                for px in (0..p).chain(p + w..wp) {
                    if let Some(ix) = cols[px] {
                        dst[px] = src[ix];
                    }
                }
            }
        }
        out
    }

    /// Adds a gradient on the padded input back onto the source pixels.
    fn fold_padded<T: Element>(&self, dpad: &[T]) -> Vec<T> {
        let (hp, wp) = self.padded();
        let (h, w, p) = (self.h, self.w, self.pad);
        let mut dx = vec![T::zero(); self.c_in * h * w];
        let cols: Vec<Option<usize>> = (0..wp).map(|px| self.source(px, w)).collect();
        for ci in 0..self.c_in {
            for py in 0..hp {
                let Some(iy) = self.source(py, h) else { continue };
                let src = &dpad[(ci * hp + py) * wp..][..wp];
                let dst = &mut dx[(ci * h + iy) * w..][..w];
                for (d, &s) in dst.iter_mut().zip(&src[p..p + w]) {
                    *d += s;
                }
                for px in (0..p).chain(p + w..wp) {
                    if let Some(ix) = cols[px] {
                        dst[ix] += src[px];
                    }
                }
            }
        }
        dx
    }

    fn rows_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.patch_len() * self.w_out).max(1)).clamp(1, self.h_out)
    }

    /// Output row ranges processed together.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let step = self.rows_per_chunk();
        (0..self.h_out)
            .step_by(step)
            .map(move |r0| (r0, (r0 + step).min(self.h_out)))
    }

    /// Row `r` of the patch matrix for output row `oy`, as a slice of the
    /// padded input plus its element stride.
    #[inline]
    fn patch_row<'a, T>(&self, xp: &'a [T], ci: usize, ky: usize, kx: usize, oy: usize) -> &'a [T] {
        let (hp, wp) = self.padded();
        &xp[(ci * hp + oy * self.stride + ky) * wp + kx..]
    }

    fn im2col<T: Element>(&self, xp: &[T], r0: usize, r1: usize, cols: &mut [T]) {
        let n = (r1 - r0) * self.w_out;
        let (k, w_out, s) = (self.k, self.w_out, self.stride);
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    for oy in r0..r1 {
                        let dst = &mut cols[r * n + (oy - r0) * w_out..][..w_out];
                        let src = self.patch_row(xp, ci, ky, kx, oy);
                        if s == 1 {
                            dst.copy_from_slice(&src[..w_out]);
                        } else {
                            for (d, v) in dst.iter_mut().zip(src.iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], r0: usize, r1: usize, dpad: &mut [T]) {
        let n = (r1 - r0) * self.w_out;
        let (k, w_out, s) = (self.k, self.w_out, self.stride);
        let (hp, wp) = self.padded();
        for ci in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    for oy in r0..r1 {
                        let src = &cols[r * n + (oy - r0) * w_out..][..w_out];
                        let dst = &mut dpad[(ci * hp + oy * s + ky) * wp + kx..];
                        for (d, &g) in dst.iter_mut().step_by(s).zip(src) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    if g.direct() {
        forward_direct(g, x, weight, bias)
    } else {
        forward_im2col(g, x, weight, bias)
    }
}

fn forward_im2col<T: Element>(g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let hw_out = g.h_out * g.w_out;
    let kk = g.patch_len();
    let xp = g.pad_input(x);
    let mut out = vec![T::zero(); g.c_out * hw_out];
    for (co, b) in bias.iter().enumerate() {
        out[co * hw_out..(co + 1) * hw_out].fill(*b);
    }
    let mut cols = vec![T::zero(); kk * g.rows_per_chunk() * g.w_out];
    for (r0, r1) in g.chunks() {
        let n = (r1 - r0) * g.w_out;
        g.im2col(&xp, r0, r1, &mut cols);
        // SAFETY: weight is c_out x kk, cols is kk x n, the output view is
        // c_out x n with row stride hw_out inside `out`.
        unsafe {
            T::gemm(
                g.c_out,
                kk,
                n,
                T::one(),
                weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                T::one(),
                out.as_mut_ptr().add(r0 * g.w_out),
                hw_out as isize,
                1,
            );
        }
    }
    out
}

fn forward_direct<T: Element>(g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (w_out, hw_out, k) = (g.w_out, g.h_out * g.w_out, g.k);
    let xp = g.pad_input(x);
    let mut out = vec![T::zero(); g.c_out * hw_out];
    for co in 0..g.c_out {
        let plane = &mut out[co * hw_out..(co + 1) * hw_out];
        plane.fill(bias[co]);
        for ci in 0..g.c_in {
            for ky in 0..k {
                let wrow = &weight[((co * g.c_in + ci) * k + ky) * k..][..k];
                for oy in 0..g.h_out {
                    let dst = &mut plane[oy * w_out..(oy + 1) * w_out];
                    let src = g.patch_row(&xp, ci, ky, 0, oy);
                    for (kx, &wv) in wrow.iter().enumerate() {
                        T::axpy(wv, &src[kx..kx + w_out], dst);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. `dx` is only computed when requested.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
) -> ConvGrads<T> {
    let hw_out = g.h_out * g.w_out;
    let dbias = (0..g.c_out)
        .map(|co| dy[co * hw_out..(co + 1) * hw_out].iter().copied().sum())
        .collect();
    let xp = g.pad_input(x);
    let (dweight, dpad) = if g.direct() {
        backward_direct(g, &xp, weight, dy, want_dx)
    } else if g.stride == 1 && g.c_in > DIRECT_MAX_COUT {
        let (dw, _) = backward_im2col(g, &xp, weight, dy, false);
        (dw, want_dx.then(|| padded_input_grad(g, weight, dy)))
    } else {
        backward_im2col(g, &xp, weight, dy, want_dx)
    };
    ConvGrads {
        dx: dpad.map(|d| g.fold_padded(&d)),
        dweight,
        dbias,
    }
}

fn backward_im2col<T: Element>(
    g: &ConvGeometry,
    xp: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let hw_out = g.h_out * g.w_out;
    let kk = g.patch_len();
    let (hp, wp) = g.padded();
    let mut dweight = vec![T::zero(); g.c_out * kk];
    let mut dpad = want_dx.then(|| vec![T::zero(); g.c_in * hp * wp]);
    let cap = kk * g.rows_per_chunk() * g.w_out;
    let mut cols = vec![T::zero(); cap];
    let mut dcols = if want_dx { vec![T::zero(); cap] } else { Vec::new() };
    for (r0, r1) in g.chunks() {
        let n = (r1 - r0) * g.w_out;
        g.im2col(xp, r0, r1, &mut cols);
        // SAFETY: dy view is c_out x n (row stride hw_out); cols^T is n x kk.
        unsafe {
            T::gemm(
                g.c_out,
                n,
                kk,
                T::one(),
                dy.as_ptr().add(r0 * g.w_out),
                hw_out as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                T::one(),
                dweight.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if let Some(dpad) = dpad.as_mut() {
            // SAFETY: weight^T is kk x c_out, dy view c_out x n, dcols kk x n.
            unsafe {
                T::gemm(
                    kk,
                    g.c_out,
                    n,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    kk as isize,
                    dy.as_ptr().add(r0 * g.w_out),
                    hw_out as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            g.col2im(&dcols, r0, r1, dpad);
        }
    }
    (dweight, dpad)
}

fn backward_direct<T: Element>(
    g: &ConvGeometry,
    xp: &[T],
    weight: &[T],
    dy: &[T],
    want_dx: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (w_out, hw_out, k) = (g.w_out, g.h_out * g.w_out, g.k);
    let (_, wp) = g.padded();
    let mut dweight = vec![T::zero(); g.c_out * g.patch_len()];
    for co in 0..g.c_out {
        let plane = &dy[co * hw_out..(co + 1) * hw_out];
        for ci in 0..g.c_in {
            for ky in 0..k {
                let base = ((co * g.c_in + ci) * k + ky) * k;
                let src = g.patch_row(xp, ci, ky, 0, 0);
                for kx in 0..k {
                    dweight[base + kx] = T::dot_rows(plane, w_out, &src[kx..], wp, g.h_out, w_out);
                }
            }
        }
    }
    (dweight, want_dx.then(|| padded_input_grad(g, weight, dy)))
}

/// Gradient on the padded input of a stride-1 convolution: `dy` correlated
/// with the flipped, transposed kernel under `k - 1` zero padding.
fn padded_input_grad<T: Element>(g: &ConvGeometry, weight: &[T], dy: &[T]) -> Vec<T> {
    let (k, p) = (g.k, g.pad);
    let (he, we) = (g.h_out + k - 1, g.w_out + k - 1);
    let mut ext = vec![T::zero(); g.c_out * he * we];
    for co in 0..g.c_out {
        for oy in 0..g.h_out {
            ext[(co * he + oy + p) * we + p..][..g.w_out]
                .copy_from_slice(&dy[(co * g.h_out + oy) * g.w_out..][..g.w_out]);
        }
    }
    let mut flipped = vec![T::zero(); weight.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * g.c_out + co) * k + k - 1 - ky) * k + k - 1 - kx] =
                        weight[((co * g.c_in + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    let tg = ConvGeometry {
        c_in: g.c_out,
        h: he,
        w: we,
        c_out: g.c_in,
        k,
        stride: 1,
        pad: p,
        h_out: he,
        w_out: we,
        padding: Padding::Zero,
    };
    forward_im2col(&tg, &ext, &flipped, &vec![T::zero(); g.c_in])
}

/// Cached statistics of an instance-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Element>(
    x: &[T],
    c: usize,
    plane: usize,
    scale: &[T],
    shift: &[T],
    eps: T,
) -> (Vec<T>, NormCache<T>) {
    let n = T::from_f64(plane as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = &x[ch * plane..(ch + 1) * plane];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let xh = &mut normalized[ch * plane..(ch + 1) * plane];
        let ys = &mut out[ch * plane..(ch + 1) * plane];
        for ((y, nh), &v) in ys.iter_mut().zip(xh.iter_mut()).zip(xs) {
            *nh = (v - mean) * inv;
            *y = scale[ch] * *nh + shift[ch];
        }
    }
    (
        out,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns `(dx, dscale, dshift)`.
pub fn instance_norm_backward<T: Element>(
    cache: &NormCache<T>,
    c: usize,
    plane: usize,
    scale: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_f64(plane as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dscale = Vec::with_capacity(c);
    let mut dshift = Vec::with_capacity(c);
    for ch in 0..c {
        let g = &dy[ch * plane..(ch + 1) * plane];
        let xh = &cache.normalized[ch * plane..(ch + 1) * plane];
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        dscale.push(sum_gx);
        dshift.push(sum_g);
        let k = scale[ch] * cache.inv_std[ch] / n;
        for ((d, &gi), &xi) in dx[ch * plane..(ch + 1) * plane].iter_mut().zip(g).zip(xh) {
            *d = k * (n * gi - sum_g - xi * sum_gx);
        }
    }
    (dx, dscale, dshift)
}

pub fn upsample2x_forward<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let w2 = 2 * w;
    let mut out = vec![T::zero(); c * 4 * h * w];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..][..w];
            let base = (ch * 2 * h + 2 * y) * w2;
            for (col, &v) in src.iter().enumerate() {
                out[base + 2 * col] = v;
                out[base + 2 * col + 1] = v;
            }
            out.copy_within(base..base + w2, base + w2);
        }
    }
    out
}

pub fn upsample2x_backward<T: Element>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let w2 = 2 * w;
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let r0 = (ch * 2 * h + 2 * y) * w2;
            for col in 0..w {
                let i = r0 + 2 * col;
                dx[(ch * h + y) * w + col] = dy[i] + dy[i + 1] + dy[i + w2] + dy[i + w2 + 1];
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride 2 (floor on odd extents). Returns the pooled
/// values and the flat source index of each maximum.
pub fn max_pool2x2_forward<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for col in 0..wo {
                let base = (ch * h + 2 * y) * w + 2 * col;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Precomputed bilinear sampling weights for one flow field.
///
/// For destination pixel `p` the source location is `p + flow(p)`, clamped
/// to the image rectangle. Zero-weight neighbors are dropped so integer
/// offsets copy source values exactly.
#[derive(Clone, Debug)]
pub struct SampleTable<T> {
    pub height: usize,
    pub width: usize,
    taps: Vec<Taps<T>>,
}

#[derive(Clone, Copy, Debug)]
struct Taps<T> {
    index: [u32; 4],
    weight: [T; 4],
    len: u8,
}

impl<T: Element> SampleTable<T> {
    /// `flow` holds interleaved `(dx, dy)` pairs in row-major order.
    pub fn new(width: usize, height: usize, flow: &[f32]) -> Self {
        assert_eq!(flow.len(), 2 * width * height);
        let mut taps = Vec::with_capacity(width * height);
        let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                let sx = (x as f64 + flow[2 * p] as f64).clamp(0.0, wmax);
                let sy = (y as f64 + flow[2 * p + 1] as f64).clamp(0.0, hmax);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as usize, y0 as usize);
                let x1 = (x0 + 1).min(width - 1);
                let y1 = (y0 + 1).min(height - 1);
                let candidates = [
                    (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * width + x1, fx * (1.0 - fy)),
                    (y1 * width + x0, (1.0 - fx) * fy),
                    (y1 * width + x1, fx * fy),
                ];
                let mut t = Taps {
                    index: [0; 4],
                    weight: [T::zero(); 4],
                    len: 0,
                };
                for (idx, wgt) in candidates {
                    if wgt != 0.0 {
                        t.index[t.len as usize] = idx as u32;
                        t.weight[t.len as usize] = T::from_f64(wgt);
                        t.len += 1;
                    }
                }
                taps.push(t);
            }
        }
        SampleTable {
            height,
            width,
            taps,
        }
    }

    pub fn forward(&self, x: &[T], channels: usize) -> Vec<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); channels * plane];
        for ch in 0..channels {
            let src = &x[ch * plane..(ch + 1) * plane];
            let dst = &mut out[ch * plane..(ch + 1) * plane];
            for (d, t) in dst.iter_mut().zip(&self.taps) {
                let mut acc = src[t.index[0] as usize] * t.weight[0];
                for i in 1..t.len as usize {
                    acc += src[t.index[i] as usize] * t.weight[i];
                }
                *d = acc;
            }
        }
        out
    }

    pub fn backward(&self, dy: &[T], channels: usize) -> Vec<T> {
        let plane = self.width * self.height;
        let mut dx = vec![T::zero(); channels * plane];
        for ch in 0..channels {
            let g = &dy[ch * plane..(ch + 1) * plane];
            let d = &mut dx[ch * plane..(ch + 1) * plane];
            for (&gi, t) in g.iter().zip(&self.taps) {
                for i in 0..t.len as usize {
                    let j = t.index[i] as usize;
                    d[j] += gi * t.weight[i];
                }
            }
        }
        dx
    }
}

/// Per-pixel linear channel mix: `out[o] = sum_i matrix[o][i] * x[i]`.
pub fn channel_mix<T: Element>(x: &[T], c_in: usize, plane: usize, matrix: &[Vec<T>]) -> Vec<T> {
    let mut out = vec![T::zero(); matrix.len() * plane];
    for (o, row) in matrix.iter().enumerate() {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for (i, &m) in row.iter().enumerate().take(c_in) {
            if m == T::zero() {
                continue;
            }
            let src = &x[i * plane..(i + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += m * s;
            }
        }
    }
    out
}

pub fn channel_mix_backward<T: Element>(
    dy: &[T],
    c_in: usize,
    plane: usize,
    matrix: &[Vec<T>],
) -> Vec<T> {
    let mut dx = vec![T::zero(); c_in * plane];
    for (o, row) in matrix.iter().enumerate() {
        let g = &dy[o * plane..(o + 1) * plane];
        for (i, &m) in row.iter().enumerate().take(c_in) {
            if m == T::zero() {
                continue;
            }
            let d = &mut dx[i * plane..(i + 1) * plane];
            for (di, &gi) in d.iter_mut().zip(g) {
                *di += m * gi;
            }
        }
    }
    dx
}

/// Gram matrix `F F^T / (C * H * W)` of a `[C, H*W]` buffer.
pub fn gram_forward<T: Element>(f: &[T], c: usize, n: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c * c];
    let norm = T::one() / T::from_f64((c * n) as f64);
    // SAFETY: f is c x n; f^T is the same buffer with swapped strides.
    unsafe {
        T::gemm(
            c,
            n,
            c,
            norm,
            f.as_ptr(),
            n as isize,
            1,
            f.as_ptr(),
            1,
            n as isize,
            T::zero(),
            g.as_mut_ptr(),
            c as isize,
            1,
        );
    }
    g
}

pub fn gram_backward<T: Element>(f: &[T], c: usize, n: usize, dg: &[T]) -> Vec<T> {
    let mut sym = vec![T::zero(); c * c];
    for i in 0..c {
        for j in 0..c {
            sym[i * c + j] = dg[i * c + j] + dg[j * c + i];
        }
    }
    let norm = T::one() / T::from_f64((c * n) as f64);
    let mut df = vec![T::zero(); c * n];
    // SAFETY: sym is c x c, f is c x n, df is c x n.
    unsafe {
        T::gemm(
            c,
            c,
            n,
            norm,
            sym.as_ptr(),
            c as isize,
            1,
            f.as_ptr(),
            n as isize,
            1,
            T::zero(),
            df.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    df
}

/// Copies `len` slices starting at `start` along `axis`.
pub fn narrow<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::invalid(
            "narrow",
            format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = len;
    Tensor::new(new_shape, out)
}

pub fn narrow_backward<T: Element>(
    dy: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![T::zero(); shape.iter().product()];
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        dx[base..base + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}
