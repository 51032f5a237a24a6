use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry, NormCache, Padding, SampleTable};
use super::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        cache: NormCache<T>,
    },
    Relu(Var),
    Tanh(Var),
    Upsample2x(Var),
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Sample {
        input: Var,
        table: Arc<SampleTable<T>>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<T>,
    },
    Square(Var),
    Sum(Var),
    Mean(Var),
    MaskedSum {
        input: Var,
        mask: Arc<Vec<T>>,
    },
    ChannelMix {
        input: Var,
        matrix: Vec<Vec<T>>,
    },
    Gram(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    grad: Option<Tensor<T>>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and a single reverse scan is a valid topological backward pass.
/// Leaves created with [`Tape::param`] are tracked; [`Tape::constant`]
/// leaves and everything computed only from constants never receive
/// gradients.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of a tracked leaf after [`Tape::backward`]. `None` for
    /// constants and for leaves the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Every leaf holding a gradient, in recording order.
    pub fn grads(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.grad.as_ref().map(|g| (Var(i), g)))
    }

    /// Clears leaf gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, "operand shape", sa, sb));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.data());
        let value = Tensor::new(geom.out_shape(), out)?;
        let tracked = self.tracked_any(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            tracked,
        ))
    }

    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        if h * w < 2 {
            return Err(Error::invalid("instance_norm", "needs at least two pixels per channel"));
        }
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape("instance_norm", name, [c], self.value(v).shape()));
            }
        }
        if eps <= T::zero() {
            return Err(Error::invalid("instance_norm", "eps must be positive"));
        }
        let (out, cache) = kernels::instance_norm_forward(
            x.data(),
            c,
            h * w,
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
        );
        let value = Tensor::new([c, h, w], out)?;
        let tracked = self.tracked_any(&[input, scale, shift]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let tracked = self.tracked_any(&[x]);
        self.push(value, Op::Relu(x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let tracked = self.tracked_any(&[x]);
        self.push(value, Op::Tanh(x), tracked)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        let value = Tensor::new([c, 2 * h, 2 * w], kernels::upsample2x_forward(t.data(), c, h, w))?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), tracked))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        if h < 2 || w < 2 {
            return Err(Error::invalid("max_pool2x2", format!("input {h}x{w} smaller than the window")));
        }
        let (out, argmax) = kernels::max_pool2x2_forward(t.data(), c, h, w);
        let value = Tensor::new([c, h / 2, w / 2], out)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, Op::MaxPool2x2 { input: x, argmax }, tracked))
    }

    /// Bilinear resampling through a precomputed table. Differentiable with
    /// respect to `input` only.
    pub fn sample(&mut self, input: Var, table: Arc<SampleTable<T>>) -> Result<Var> {
        let t = self.value(input);
        let (c, h, w) = t.chw()?;
        if (h, w) != (table.height, table.width) {
            return Err(Error::shape("bilinear_sample", "spatial size", (table.height, table.width), (h, w)));
        }
        let value = Tensor::new([c, h, w], table.forward(t.data(), c))?;
        let tracked = self.tracked_any(&[input]);
        Ok(self.push(value, Op::Sample { input, table }, tracked))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: T, offset: T) -> Var {
        let value = self.value(x).map(|v| scale * v + offset);
        let tracked = self.tracked_any(&[x]);
        self.push(value, Op::Affine { input: x, scale }, tracked)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Per-channel `scale[c] * x + offset[c]` on a `[C, H, W]` tensor.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], offset: &[T]) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        if scale.len() != c || offset.len() != c {
            return Err(Error::shape("channel_affine", "channel count", c, scale.len()));
        }
        let plane = h * w;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| scale[i / plane] * v + offset[i / plane])
            .collect();
        let value = Tensor::new([c, h, w], data)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                input: x,
                scale: scale.to_vec(),
            },
            tracked,
        ))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let tracked = self.tracked_any(&[x]);
        self.push(value, Op::Square(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked_any(&[x]);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_f64(t.numel() as f64));
        let tracked = self.tracked_any(&[x]);
        self.push(value, Op::Mean(x), tracked)
    }

    /// `sum(mask * x)`. The mask either has the shape of `x` or of its
    /// trailing dimensions, in which case it is repeated over the leading ones.
    pub fn masked_sum(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        let ms = mask.shape();
        if ms.len() > shape.len() || shape[shape.len() - ms.len()..] != *ms {
            return Err(Error::shape("masked_sum", "mask shape", shape, ms));
        }
        let m = mask.data();
        let total = t
            .data()
            .chunks(m.len())
            .map(|chunk| chunk.iter().zip(m).map(|(&a, &b)| a * b).sum::<T>())
            .sum();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedSum {
                input: x,
                mask: Arc::new(m.to_vec()),
            },
            tracked,
        ))
    }

    /// `sum(mask * x) / numel(x)`; equals `mean(x)` for an all-ones mask.
    pub fn masked_mean(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.masked_sum(x, mask)?;
        Ok(self.mul_scalar(s, T::one() / T::from_f64(n as f64)))
    }

    /// Per-pixel channel mix `out[o] = sum_i matrix[o][i] * x[i]`.
    pub fn channel_mix(&mut self, x: Var, matrix: Vec<Vec<T>>) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        if matrix.iter().any(|row| row.len() != c) {
            return Err(Error::shape("channel_mix", "matrix columns", c, matrix.first().map_or(0, Vec::len)));
        }
        let out = kernels::channel_mix(t.data(), c, h * w, &matrix);
        let value = Tensor::new([matrix.len(), h, w], out)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, Op::ChannelMix { input: x, matrix }, tracked))
    }

    /// `[C, H, W]` → `[C, C]` Gram matrix normalized by `C * H * W`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.chw()?;
        let value = Tensor::new([c, c], kernels::gram_forward(t.data(), c, h * w))?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, Op::Gram(x), tracked))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = kernels::narrow(self.value(x), axis, start, len)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            value,
            Op::Narrow {
                input: x,
                axis,
                start,
                len,
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Reverse-mode accumulation from a scalar `loss` into every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.backward_done {
            return Err(Error::StaleTape);
        }
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        self.backward_done = true;
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..end).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut Vec<(usize, Vec<T>)>,
    ) {
        let node = &self.nodes[i];
        let mut send = |v: Var, d: Vec<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => leaf_grads.push((i, g)),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want_dx = self.is_tracked(*input);
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    &g,
                    want_dx,
                );
                if let Some(dx) = cg.dx {
                    send(*input, dx);
                }
                send(*weight, cg.dweight);
                send(*bias, cg.dbias);
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                cache,
            } => {
                let (c, h, w) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                let (dx, ds, db) =
                    kernels::instance_norm_backward(cache, c, h * w, self.value(*scale).data(), &g);
                send(*input, dx);
                send(*scale, ds);
                send(*shift, db);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                send(*x, d);
            }
            Op::Tanh(x) => {
                let ys = node.value.data();
                let d = g.iter().zip(ys).map(|(&gi, &y)| gi * (T::one() - y * y)).collect();
                send(*x, d);
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape();
                send(*x, kernels::upsample2x_backward(&g, s[0], s[1], s[2]));
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&gi, &j) in g.iter().zip(argmax) {
                    d[j] += gi;
                }
                send(*input, d);
            }
            Op::Sample { input, table } => {
                let c = node.value.shape()[0];
                send(*input, table.backward(&g, c));
            }
            Op::Add(a, b) => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|&v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(vb).map(|(&gi, &y)| gi * y).collect());
                send(*b, g.iter().zip(va).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Affine { input, scale } => {
                send(*input, g.iter().map(|&v| v * *scale).collect());
            }
            Op::ChannelAffine { input, scale } => {
                let plane = node.value.numel() / scale.len();
                send(
                    *input,
                    g.iter().enumerate().map(|(j, &v)| v * scale[j / plane]).collect(),
                );
            }
            Op::Square(x) => {
                let xs = self.value(*x).data();
                let two = T::from_f64(2.0);
                send(*x, g.iter().zip(xs).map(|(&gi, &xi)| two * xi * gi).collect());
            }
            Op::Sum(x) => {
                send(*x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::MaskedSum { input, mask } => {
                let n = self.value(*input).numel();
                send(*input, (0..n).map(|j| g[0] * mask[j % mask.len()]).collect());
            }
            Op::ChannelMix { input, matrix } => {
                let s = self.value(*input).shape();
                send(
                    *input,
                    kernels::channel_mix_backward(&g, s[0], s[1] * s[2], matrix),
                );
            }
            Op::Gram(x) => {
                let t = self.value(*x);
                let s = t.shape();
                send(*x, kernels::gram_backward(t.data(), s[0], s[1] * s[2], &g));
            }
            Op::Narrow {
                input,
                axis,
                start,
                len,
            } => {
                let s = self.value(*input).shape();
                send(*input, kernels::narrow_backward(&g, s, *axis, *start, *len));
            }
            Op::Reshape(x) => send(*x, g),
        }
    }
}
