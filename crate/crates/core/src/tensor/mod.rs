//! Dense channels-first tensors with a reverse-mode tape.
//!
//! [`Tensor`] is a plain value: shape plus row-major data. Differentiation
//! happens on a [`Tape`], which records every operation applied to its
//! [`Var`] handles and replays them in reverse. The same network code can
//! run eagerly (no recording) through the [`Graph`] trait.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod tape;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use graph::{Eager, Graph};
pub use kernels::Padding;
pub use tape::{Tape, Var};

/// Floating point element type. `f32` is used for training and inference,
/// `f64` for gradient checking.
pub trait Element:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    const NAME: &'static str;

    /// `C = alpha * A * B + beta * C` on strided row/column-major views.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`) views
    /// of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `y += a * x`.
    #[inline]
    fn axpy(a: Self, x: &[Self], y: &mut [Self]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }

    /// Dot product with eight interleaved partial sums.
    #[inline]
    fn dot(x: &[Self], y: &[Self]) -> Self {
        let mut acc = [Self::zero(); 8];
        let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
        let tail: Self = xc.remainder().iter().zip(yc.remainder()).map(|(&a, &b)| a * b).sum();
        for (a, b) in xc.zip(yc) {
            for l in 0..8 {
                acc[l] += a[l] * b[l];
            }
        }
        acc.iter().copied().sum::<Self>() + tail
    }

    /// Sum of `dot(x_r, y_r)` over `rows` rows of length `len`, where row
    /// `r` starts at `r * x_stride` in `x` and `r * y_stride` in `y`.
    fn dot_rows(x: &[Self], x_stride: usize, y: &[Self], y_stride: usize, rows: usize, len: usize) -> Self {
        (0..rows)
            .map(|r| Self::dot(&x[r * x_stride..][..len], &y[r * y_stride..][..len]))
            .sum()
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    #[inline]
    fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if simd::has_fma() {
            // SAFETY: the required features were detected at runtime.
            return unsafe { simd::axpy_fma(a, x, y) };
        }
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }

    #[inline]
    fn dot(x: &[f32], y: &[f32]) -> f32 {
        #[cfg(target_arch = "x86_64")]
        if simd::has_fma() {
            // SAFETY: as above.
            return unsafe { simd::dot_fma(x, y) };
        }
        simd::dot_portable(x, y)
    }

    fn dot_rows(x: &[f32], x_stride: usize, y: &[f32], y_stride: usize, rows: usize, len: usize) -> f32 {
        #[cfg(target_arch = "x86_64")]
        if simd::has_fma() {
            // SAFETY: as above.
            return unsafe { simd::dot_rows_fma(x, x_stride, y, y_stride, rows, len) };
        }
        (0..rows)
            .map(|r| simd::dot_portable(&x[r * x_stride..][..len], &y[r * y_stride..][..len]))
            .sum()
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

mod simd {
    #[cfg(target_arch = "x86_64")]
    #[inline]
    pub fn has_fma() -> bool {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn axpy_fma(a: f32, x: &[f32], y: &mut [f32]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = a.mul_add(xi, *yi);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot_fma(x: &[f32], y: &[f32]) -> f32 {
        let mut acc = [0.0f32; 16];
        let tail = fma_lanes(x, y, &mut acc);
        acc.iter().sum::<f32>() + tail
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot_rows_fma(x: &[f32], xs: usize, y: &[f32], ys: usize, rows: usize, len: usize) -> f32 {
        let mut acc = [0.0f32; 16];
        let mut tail = 0.0;
        for r in 0..rows {
            tail += fma_lanes(&x[r * xs..][..len], &y[r * ys..][..len], &mut acc);
        }
        acc.iter().sum::<f32>() + tail
    }

    /// Accumulates full 16-wide blocks into `acc`, returns the remainder's dot.
    #[inline(always)]
    fn fma_lanes(x: &[f32], y: &[f32], acc: &mut [f32; 16]) -> f32 {
        let (xc, yc) = (x.chunks_exact(16), y.chunks_exact(16));
        let mut tail = 0.0f32;
        for (&a, &b) in xc.remainder().iter().zip(yc.remainder()) {
            tail = a.mul_add(b, tail);
        }
        for (a, b) in xc.zip(yc) {
            for l in 0..16 {
                acc[l] = a[l].mul_add(b[l], acc[l]);
            }
        }
        tail
    }

    pub fn dot_portable(x: &[f32], y: &[f32]) -> f32 {
        let mut acc = [0.0f32; 8];
        let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
        let tail: f32 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
        for (a, b) in xc.zip(yc) {
            for l in 0..8 {
                acc[l] += a[l] * b[l];
            }
        }
        acc.iter().sum::<f32>() + tail
    }
}

/// N-dimensional row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", "element count", numel, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), numel));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape("chw", "rank", 3, other.len())),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Flat index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn all_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    /// Elementwise `self + scale * other`, in place.
    pub fn axpy(&mut self, scale: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", "shape", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// One channel plane of a rank-3 tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// Bit-level equality, distinguishing `-0.0` from `0.0`.
pub fn bit_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape == b.shape
        && a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
