use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry, Padding};
use super::{Element, Tape, Tensor, Var};

/// The operations network code is written against, so the same layer
/// definitions run recorded on a [`Tape`] or eagerly without one.
pub trait Graph<T: Element> {
    type Value: Clone;

    /// A tensor whose gradient is wanted (a no-op distinction when eager).
    fn param(&mut self, t: &Tensor<T>) -> Self::Value;
    fn constant(&mut self, t: &Tensor<T>) -> Self::Value;
    fn get<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: &Self::Value,
        stride: usize,
        padding: Padding,
    ) -> Result<Self::Value>;
    fn instance_norm(
        &mut self,
        x: &Self::Value,
        scale: &Self::Value,
        shift: &Self::Value,
        eps: T,
    ) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn tanh(&mut self, x: &Self::Value) -> Self::Value;
    fn upsample2x(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn max_pool2x2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn affine(&mut self, x: &Self::Value, scale: T, offset: T) -> Self::Value;
    fn channel_affine(&mut self, x: &Self::Value, scale: &[T], offset: &[T]) -> Result<Self::Value>;
}

impl<T: Element> Graph<T> for Tape<T> {
    type Value = Var;

    fn param(&mut self, t: &Tensor<T>) -> Var {
        Tape::param(self, t.clone())
    }

    fn constant(&mut self, t: &Tensor<T>) -> Var {
        Tape::constant(self, t.clone())
    }

    fn get<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.value(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, padding: Padding) -> Result<Var> {
        Tape::conv2d(self, *x, *w, *b, stride, padding)
    }

    fn instance_norm(&mut self, x: &Var, scale: &Var, shift: &Var, eps: T) -> Result<Var> {
        Tape::instance_norm(self, *x, *scale, *shift, eps)
    }

    fn relu(&mut self, x: &Var) -> Var {
        Tape::relu(self, *x)
    }

    fn tanh(&mut self, x: &Var) -> Var {
        Tape::tanh(self, *x)
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        Tape::upsample2x(self, *x)
    }

    fn max_pool2x2(&mut self, x: &Var) -> Result<Var> {
        Tape::max_pool2x2(self, *x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn affine(&mut self, x: &Var, scale: T, offset: T) -> Var {
        Tape::affine(self, *x, scale, offset)
    }

    fn channel_affine(&mut self, x: &Var, scale: &[T], offset: &[T]) -> Result<Var> {
        Tape::channel_affine(self, *x, scale, offset)
    }
}

/// Unrecorded evaluation: values are plain tensors and intermediates are
/// dropped as soon as they go out of scope.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Element> Graph<T> for Eager {
    type Value = Tensor<T>;

    fn param(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn constant(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn get<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor<T>> {
        let geom = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
        Tensor::new(
            geom.out_shape(),
            kernels::conv2d_forward(&geom, x.data(), w.data(), b.data()),
        )
    }

    fn instance_norm(
        &mut self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(Error::shape("instance_norm", "scale/shift", [c], scale.shape()));
        }
        let (out, _) = kernels::instance_norm_forward(x.data(), c, h * w, scale.data(), shift.data(), eps);
        Tensor::new([c, h, w], out)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    fn tanh(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.tanh())
    }

    fn upsample2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        Tensor::new([c, 2 * h, 2 * w], kernels::upsample2x_forward(x.data(), c, h, w))
    }

    fn max_pool2x2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        if h < 2 || w < 2 {
            return Err(Error::invalid("max_pool2x2", format!("input {h}x{w} smaller than the window")));
        }
        Tensor::new([c, h / 2, w / 2], kernels::max_pool2x2_forward(x.data(), c, h, w).0)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", "operand shape", a.shape(), b.shape()));
        }
        let mut out = a.clone();
        out.axpy(T::one(), b)?;
        Ok(out)
    }

    fn affine(&mut self, x: &Tensor<T>, scale: T, offset: T) -> Tensor<T> {
        x.map(|v| scale * v + offset)
    }

    fn channel_affine(&mut self, x: &Tensor<T>, scale: &[T], offset: &[T]) -> Result<Tensor<T>> {
        let (c, h, w) = x.chw()?;
        if scale.len() != c || offset.len() != c {
            return Err(Error::shape("channel_affine", "channel count", c, scale.len()));
        }
        let plane = h * w;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| scale[i / plane] * v + offset[i / plane])
            .collect();
        Tensor::new([c, h, w], data)
    }
}
