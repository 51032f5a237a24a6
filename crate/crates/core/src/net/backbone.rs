//! Frozen VGG-style loss network supplying content and style features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Padding, Tensor};

use super::checkpoint::Container;
use super::Conv;

pub const STYLE_TAPS: [&str; 4] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];
pub const CONTENT_TAP: &str = "relu3_3";
const CONVS_PER_BLOCK: [usize; 4] = [2, 2, 3, 3];
/// Seed of the frozen random weights of the test profile.
pub const TEST_BACKBONE_SEED: u64 = 0x7e57_bac6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneProfile {
    /// VGG-16 channel widths; weights come from a converted checkpoint file.
    Vgg16,
    /// Narrow widths with fixed-seed random weights, for tests and desk runs.
    Test,
}

impl BackboneProfile {
    pub fn channels(self) -> [usize; 4] {
        match self {
            BackboneProfile::Vgg16 => [64, 128, 256, 512],
            BackboneProfile::Test => [8, 16, 32, 64],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneProfile::Vgg16 => "vgg16",
            BackboneProfile::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(BackboneProfile::Vgg16),
            "test" => Ok(BackboneProfile::Test),
            other => Err(Error::Config(format!("unknown backbone profile `{other}`"))),
        }
    }

    /// Per-channel input normalization `(x - mean) / std`.
    pub fn normalization(self) -> ([f64; 3], [f64; 3]) {
        match self {
            BackboneProfile::Vgg16 => ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
            BackboneProfile::Test => ([0.0; 3], [1.0; 3]),
        }
    }

    pub fn taps(self) -> Vec<TapSpec> {
        STYLE_TAPS
            .iter()
            .zip(self.channels())
            .enumerate()
            .map(|(i, (&name, channels))| TapSpec {
                name,
                factor: 1 << i,
                channels,
            })
            .collect()
    }

    /// `(name, shape)` of every weight and bias, in order.
    pub fn manifest(self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (b, (&c, &n)) in self.channels().iter().zip(&CONVS_PER_BLOCK).enumerate() {
            for i in 1..=n {
                let name = format!("conv{}_{i}", b + 1);
                out.push((format!("{name}.weight"), vec![c, c_in, 3, 3]));
                out.push((format!("{name}.bias"), vec![c]));
                c_in = c;
            }
        }
        out
    }
}

/// A feature tap: name, cumulative downsampling factor and channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapSpec {
    pub name: &'static str,
    pub factor: usize,
    pub channels: usize,
}

/// Tap name → feature map.
#[derive(Clone, Debug)]
pub struct Features<V> {
    pub taps: Vec<(&'static str, V)>,
}

impl<V> Features<V> {
    pub fn get(&self, name: &str) -> Option<&V> {
        self.taps.iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualBackbone<P = Tensor<f32>> {
    pub profile: BackboneProfile,
    pub convs: Vec<Conv<P>>,
}

impl<T: Element> PerceptualBackbone<Tensor<T>> {
    /// Kaiming-uniform random weights, zero biases.
    pub fn random(profile: BackboneProfile, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = profile
            .manifest()
            .chunks(2)
            .map(|pair| {
                let shape = &pair[0].1;
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                Conv {
                    weight: Tensor::from_fn(shape.clone(), |_| T::from_f64(rng.random_range(-bound..bound))),
                    bias: Tensor::zeros(pair[1].1.clone()),
                }
            })
            .collect();
        PerceptualBackbone { profile, convs }
    }

    /// The test profile with its fixed frozen weights.
    pub fn test() -> Self {
        Self::random(BackboneProfile::Test, TEST_BACKBONE_SEED)
    }

    /// Weights from a checkpoint-format file (layer names `convB_I.weight`
    /// and `convB_I.bias`).
    pub fn from_container(profile: BackboneProfile, container: &Container) -> Result<Self> {
        let manifest = profile.manifest();
        if container.layers.len() != manifest.len() {
            return Err(Error::Checkpoint(format!(
                "{} backbone expects {} tensors, file has {}",
                profile.name(),
                manifest.len(),
                container.layers.len()
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for ((name, shape), (got_name, t)) in manifest.iter().zip(&container.layers) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "layer {got_name}: expected {name} with shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            tensors.push(t.cast::<T>());
        }
        let mut it = tensors.into_iter();
        let mut convs = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            convs.push(Conv { weight, bias });
        }
        Ok(PerceptualBackbone { profile, convs })
    }

    pub fn to_container(&self) -> Container {
        let layers = self
            .profile
            .manifest()
            .into_iter()
            .zip(self.convs.iter().flat_map(|c| [&c.weight, &c.bias]))
            .map(|((name, _), t)| (name, t.cast::<f32>()))
            .collect();
        Container {
            layers,
            metadata: vec![("backbone".into(), self.profile.name().into())],
        }
    }

    /// Binds the weights into a graph as constants: they never receive
    /// gradients, while gradients still reach the input image.
    pub fn bind<G: Graph<T>>(&self, g: &mut G) -> PerceptualBackbone<G::Value> {
        PerceptualBackbone {
            profile: self.profile,
            convs: self
                .convs
                .iter()
                .map(|c| Conv {
                    weight: g.constant(&c.weight),
                    bias: g.constant(&c.bias),
                })
                .collect(),
        }
    }
}

impl<V: Clone> PerceptualBackbone<V> {
    /// Feature maps at `relu1_2`, `relu2_2`, `relu3_3` and `relu4_3`.
    /// `H` and `W` must be multiples of 8.
    pub fn features<T: Element, G: Graph<T, Value = V>>(&self, g: &mut G, image: &V) -> Result<Features<V>> {
        let (c, h, w) = g.get(image).chw()?;
        if c != 3 {
            return Err(Error::shape("backbone_features", "channels", 3, c));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(
                "backbone_features",
                format!("image size {h}x{w} is not divisible by 8"),
            ));
        }
        let (mean, std) = self.profile.normalization();
        let scale: Vec<T> = std.iter().map(|s| T::from_f64(1.0 / s)).collect();
        let offset: Vec<T> = mean.iter().zip(&std).map(|(m, s)| T::from_f64(-m / s)).collect();
        let mut x = g.channel_affine(image, &scale, &offset)?;
        let mut convs = self.convs.iter();
        let mut taps = Vec::with_capacity(4);
        for (b, &n) in CONVS_PER_BLOCK.iter().enumerate() {
            if b > 0 {
                x = g.max_pool2x2(&x)?;
            }
            for _ in 0..n {
                let conv = convs.next().expect("backbone layout");
                let y = g.conv2d(&x, &conv.weight, &conv.bias, 1, Padding::Zero)?;
                x = g.relu(&y);
            }
            taps.push((STYLE_TAPS[b], x.clone()));
        }
        Ok(Features { taps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Eager, Tape};

    #[test]
    fn content_tap_is_third_style_tap() {
        assert_eq!(STYLE_TAPS[2], CONTENT_TAP);
        let taps = BackboneProfile::Vgg16.taps();
        assert_eq!(taps.iter().map(|t| t.factor).collect::<Vec<_>>(), [1, 2, 4, 8]);
    }

    #[test]
    fn test_profile_tap_shapes() {
        let bb = PerceptualBackbone::<Tensor<f32>>::test();
        let mut g = Eager;
        let bound = bb.bind(&mut g);
        let img = Tensor::full([3, 64, 64], 0.5f32);
        let feats = bound.features(&mut g, &img).unwrap();
        let shapes: Vec<_> = feats.taps.iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![8, 64, 64], vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8]]
        );
    }

    #[test]
    fn rejects_indivisible_size() {
        let bb = PerceptualBackbone::<Tensor<f32>>::test();
        let mut g = Eager;
        let bound = bb.bind(&mut g);
        assert!(bound.features(&mut g, &Tensor::zeros([3, 12, 16])).is_err());
    }

    #[test]
    fn gradients_reach_image_not_weights() {
        let bb = PerceptualBackbone::<Tensor<f32>>::test();
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape);
        let img = tape.param(Tensor::from_fn([3, 16, 16], |i| (i % 13) as f32 / 13.0));
        let feats = bound.features(&mut tape, &img).unwrap();
        let tap = *feats.get("relu2_2").unwrap();
        let s = tape.sum(tap);
        tape.backward(s).unwrap();
        for c in &bound.convs {
            assert!(tape.grad(c.weight).is_none());
            assert!(tape.grad(c.bias).is_none());
        }
        assert!(tape.grad(img).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn container_roundtrip() {
        let bb = PerceptualBackbone::<Tensor<f32>>::random(BackboneProfile::Test, 3);
        let back = PerceptualBackbone::from_container(BackboneProfile::Test, &bb.to_container()).unwrap();
        assert_eq!(back, bb);
        assert!(PerceptualBackbone::<Tensor<f32>>::from_container(BackboneProfile::Vgg16, &bb.to_container()).is_err());
    }
}
