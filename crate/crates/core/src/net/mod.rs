//! The transfer network: a convolutional encoder producing the feature maps
//! the feature-level temporal loss is computed on, and a decoder producing
//! the stylized frame.
//!
//! | stage    | layer                          | kernel      | stride | output (3 x H x W input) |
//! |----------|--------------------------------|-------------|--------|--------------------------|
//! | encoder  | conv + in + relu               | 48 x 9 x 9  | 1      | 48 x H x W               |
//! |          | conv + in + relu               | 96 x 3 x 3  | 2      | 96 x H/2 x W/2           |
//! |          | conv + in + relu               | 192 x 3 x 3 | 2      | 192 x H/4 x W/4          |
//! |          | (res + in + relu) x 4          | 192 x 3 x 3 | 1      | 192 x H/4 x W/4          |
//! | decoder  | upsample, conv + in + relu     | 96 x 3 x 3  | 1      | 96 x H/2 x W/2           |
//! |          | upsample, conv + in + relu     | 48 x 3 x 3  | 1      | 48 x H x W               |
//! |          | conv + tanh                    | 3 x 9 x 9   | 1      | 3 x H x W                |
//!
//! Every convolution uses reflection padding. The tanh output is mapped to
//! `[0, 1]` with `(x + 1) / 2`.

pub mod backbone;
pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Eager, Element, Graph, Padding, Tensor};

pub use backbone::{BackboneProfile, Features, PerceptualBackbone, TapSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata};

pub const ENCODER_CHANNELS: [usize; 3] = [48, 96, 192];
pub const ENCODER_KERNELS: [usize; 3] = [9, 3, 3];
pub const ENCODER_STRIDES: [usize; 3] = [1, 2, 2];
pub const RESIDUAL_BLOCKS: usize = 4;
pub const DECODER_CHANNELS: [usize; 2] = [96, 48];
pub const OUTPUT_KERNEL: usize = 9;
/// Spatial reduction between a frame and its encoded feature map.
pub const FEATURE_FACTOR: usize = 4;
pub const FEATURE_CHANNELS: usize = 192;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub scale: P,
    pub shift: P,
}

/// Convolution followed by instance normalization (the relu is applied by
/// the caller where the architecture calls for it).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm<P> {
    pub conv: Conv<P>,
    pub norm: Norm<P>,
}

/// `relu(x + IN(conv(relu(IN(conv(x))))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<P> {
    pub first: ConvNorm<P>,
    pub second: ConvNorm<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<P> {
    pub conv1: ConvNorm<P>,
    pub conv2: ConvNorm<P>,
    pub conv3: ConvNorm<P>,
    pub res: Vec<ResidualBlock<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<P> {
    pub up1: ConvNorm<P>,
    pub up2: ConvNorm<P>,
    pub out: Conv<P>,
}

/// Encoder and decoder parameters. `P` is a stored tensor for a model at
/// rest, or a graph value once bound for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleNet<P = Tensor<f32>> {
    pub encoder: Encoder<P>,
    pub decoder: Decoder<P>,
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<P> Conv<P> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    fn assemble(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Conv {
            weight: it.next()?,
            bias: it.next()?,
        })
    }
}

impl<P> ConvNorm<P> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a P)>) {
        self.conv.visit(name, out);
        out.push((format!("{name}.norm.scale"), &self.norm.scale));
        out.push((format!("{name}.norm.shift"), &self.norm.shift));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        self.conv.visit_mut(out);
        out.push(&mut self.norm.scale);
        out.push(&mut self.norm.shift);
    }

    fn assemble(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(ConvNorm {
            conv: Conv::assemble(it)?,
            norm: Norm {
                scale: it.next()?,
                shift: it.next()?,
            },
        })
    }
}

impl<P> StyleNet<P> {
    /// Parameters with their manifest names, in manifest order.
    pub fn named_params(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        let e = &self.encoder;
        e.conv1.visit("encoder.conv1", &mut out);
        e.conv2.visit("encoder.conv2", &mut out);
        e.conv3.visit("encoder.conv3", &mut out);
        for (i, r) in e.res.iter().enumerate() {
            r.first.visit(&format!("encoder.res{}.a", i + 1), &mut out);
            r.second.visit(&format!("encoder.res{}.b", i + 1), &mut out);
        }
        let d = &self.decoder;
        d.up1.visit("decoder.up1", &mut out);
        d.up2.visit("decoder.up2", &mut out);
        d.out.visit("decoder.out", &mut out);
        out
    }

    /// Mutable parameters in manifest order.
    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        let e = &mut self.encoder;
        e.conv1.visit_mut(&mut out);
        e.conv2.visit_mut(&mut out);
        e.conv3.visit_mut(&mut out);
        for r in &mut e.res {
            r.first.visit_mut(&mut out);
            r.second.visit_mut(&mut out);
        }
        let d = &mut self.decoder;
        d.up1.visit_mut(&mut out);
        d.up2.visit_mut(&mut out);
        d.out.visit_mut(&mut out);
        out
    }

    /// Rebuilds a network from parameters in manifest order.
    pub fn from_flat(params: impl IntoIterator<Item = P>) -> Result<Self> {
        let mut it = params.into_iter();
        let short = || Error::invalid("StyleNet::from_flat", "too few parameters");
        let conv1 = ConvNorm::assemble(&mut it).ok_or_else(short)?;
        let conv2 = ConvNorm::assemble(&mut it).ok_or_else(short)?;
        let conv3 = ConvNorm::assemble(&mut it).ok_or_else(short)?;
        let mut res = Vec::with_capacity(RESIDUAL_BLOCKS);
        for _ in 0..RESIDUAL_BLOCKS {
            res.push(ResidualBlock {
                first: ConvNorm::assemble(&mut it).ok_or_else(short)?,
                second: ConvNorm::assemble(&mut it).ok_or_else(short)?,
            });
        }
        let up1 = ConvNorm::assemble(&mut it).ok_or_else(short)?;
        let up2 = ConvNorm::assemble(&mut it).ok_or_else(short)?;
        let out = Conv::assemble(&mut it).ok_or_else(short)?;
        if it.next().is_some() {
            return Err(Error::invalid("StyleNet::from_flat", "too many parameters"));
        }
        Ok(StyleNet {
            encoder: Encoder {
                conv1,
                conv2,
                conv3,
                res,
            },
            decoder: Decoder { up1, up2, out },
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &P) -> U) -> StyleNet<U> {
        let mapped: Vec<U> = self.named_params().into_iter().map(|(n, p)| f(&n, p)).collect();
        StyleNet::from_flat(mapped).expect("same layout")
    }
}

/// The parameter manifest of the architecture, in order.
pub fn manifest() -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut conv_norm = |name: &str, c_out: usize, c_in: usize, k: usize, norm: bool| {
        specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![c_out, c_in, k, k],
        });
        specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![c_out],
        });
        if norm {
            for p in ["scale", "shift"] {
                specs.push(ParamSpec {
                    name: format!("{name}.norm.{p}"),
                    shape: vec![c_out],
                });
            }
        }
    };
    let mut c_in = 3;
    for (i, (&c, &k)) in ENCODER_CHANNELS.iter().zip(&ENCODER_KERNELS).enumerate() {
        conv_norm(&format!("encoder.conv{}", i + 1), c, c_in, k, true);
        c_in = c;
    }
    for i in 1..=RESIDUAL_BLOCKS {
        conv_norm(&format!("encoder.res{i}.a"), c_in, c_in, 3, true);
        conv_norm(&format!("encoder.res{i}.b"), c_in, c_in, 3, true);
    }
    for (i, &c) in DECODER_CHANNELS.iter().enumerate() {
        conv_norm(&format!("decoder.up{}", i + 1), c, c_in, 3, true);
        c_in = c;
    }
    conv_norm("decoder.out", 3, c_in, OUTPUT_KERNEL, false);
    specs
}

/// Total scalar parameters in the manifest.
pub fn parameter_count() -> usize {
    manifest().iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

impl<T: Element> StyleNet<Tensor<T>> {
    /// Kaiming-uniform initialization from a seeded generator: weights in
    /// `±sqrt(6 / fan_in)`, biases in `±1 / sqrt(fan_in)`, norm scale 1 and
    /// shift 0.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = manifest();
        let mut fan_in = 1;
        let params = specs.iter().map(|spec| {
            let n: usize = spec.shape.iter().product();
            if spec.name.ends_with(".weight") {
                fan_in = spec.shape[1..].iter().product::<usize>();
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(spec.shape.clone(), |_| T::from_f64(rng.random_range(-bound..bound)))
            } else if spec.name.ends_with(".bias") {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(spec.shape.clone(), |_| T::from_f64(rng.random_range(-bound..bound)))
            } else if spec.name.ends_with(".scale") {
                Tensor::ones([n])
            } else {
                Tensor::zeros([n])
            }
        });
        let params: Vec<_> = params.collect();
        StyleNet::from_flat(params).expect("manifest layout")
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every tensor against the manifest, naming the first offender.
    pub fn validate(&self) -> Result<()> {
        for (spec, (name, t)) in manifest().iter().zip(self.named_params()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer {name}: expected shape {:?}, found {:?}",
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> StyleNet<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    /// Binds parameters into a graph as gradient-tracked values.
    pub fn bind<G: Graph<T>>(&self, g: &mut G) -> StyleNet<G::Value> {
        self.map(|_, t| g.param(t))
    }

    pub fn encode_eager(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Eager;
        let bound = self.bind(&mut g);
        bound.encode(&mut g, frame)
    }

    pub fn decode_eager(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Eager;
        let bound = self.bind(&mut g);
        bound.decode(&mut g, features)
    }

    /// Frame in, stylized frame out, without recording gradients.
    pub fn stylize(&self, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Eager;
        let bound = self.bind(&mut g);
        let f = bound.encode(&mut g, frame)?;
        bound.decode(&mut g, &f)
    }
}

fn conv_norm<T: Element, G: Graph<T>>(
    g: &mut G,
    layer: &ConvNorm<G::Value>,
    x: &G::Value,
    stride: usize,
) -> Result<G::Value> {
    let y = g.conv2d(x, &layer.conv.weight, &layer.conv.bias, stride, Padding::Reflect)?;
    g.instance_norm(&y, &layer.norm.scale, &layer.norm.shift, T::from_f64(NORM_EPS))
}

impl<V: Clone> StyleNet<V> {
    /// `[3, H, W]` → `[192, H/4, W/4]`; `H` and `W` must be multiples of 4.
    pub fn encode<T: Element, G: Graph<T, Value = V>>(&self, g: &mut G, frame: &V) -> Result<V> {
        let (c, h, w) = g.get(frame).chw()?;
        if c != 3 {
            return Err(Error::shape("encode", "channels", 3, c));
        }
        if h % FEATURE_FACTOR != 0 || w % FEATURE_FACTOR != 0 {
            return Err(Error::invalid(
                "encode",
                format!("frame size {h}x{w} is not divisible by {FEATURE_FACTOR}"),
            ));
        }
        let e = &self.encoder;
        let mut x = frame.clone();
        for (layer, &stride) in [&e.conv1, &e.conv2, &e.conv3].into_iter().zip(&ENCODER_STRIDES) {
            let y = conv_norm(g, layer, &x, stride)?;
            x = g.relu(&y);
        }
        for block in &e.res {
            let y = conv_norm(g, &block.first, &x, 1)?;
            let y = g.relu(&y);
            let y = conv_norm(g, &block.second, &y, 1)?;
            let y = g.add(&x, &y)?;
            x = g.relu(&y);
        }
        Ok(x)
    }

    /// `[192, h, w]` → `[3, 4h, 4w]` with values in `[0, 1]`.
    pub fn decode<T: Element, G: Graph<T, Value = V>>(&self, g: &mut G, features: &V) -> Result<V> {
        let (c, _, _) = g.get(features).chw()?;
        if c != FEATURE_CHANNELS {
            return Err(Error::shape("decode", "channels", FEATURE_CHANNELS, c));
        }
        let d = &self.decoder;
        let mut x = features.clone();
        for layer in [&d.up1, &d.up2] {
            let up = g.upsample2x(&x)?;
            let y = conv_norm(g, layer, &up, 1)?;
            x = g.relu(&y);
        }
        let y = g.conv2d(&x, &d.out.weight, &d.out.bias, 1, Padding::Reflect)?;
        let y = g.tanh(&y);
        let half = T::from_f64(0.5);
        Ok(g.affine(&y, half, half))
    }
}
