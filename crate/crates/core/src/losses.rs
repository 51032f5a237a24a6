//! Perceptual, regularization and temporal loss terms.
//!
//! Every differentiable term records onto a [`Tape`]. Quantities with no
//! gradient path (input frames, style Gram matrices, content targets) are
//! passed as plain tensors.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{warp, FlowField, OcclusionMask};
use crate::net::backbone::{CONTENT_TAP, STYLE_TAPS};
use crate::net::Features;
use crate::tensor::{Element, Tape, Tensor, Var};

pub const LUMINANCE: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Linear RGB → XYZ with sRGB primaries and D65 white. The Y row is the
/// luminance vector.
pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_f: f64,
    pub lambda_o: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 10.0,
            gamma: 1e-3,
            lambda_f: 1e7,
            lambda_o: 2e3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_f", self.lambda_f),
            ("lambda_o", self.lambda_o),
        ]
    }
}

/// Output-level temporal loss variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TemporalVariant {
    /// Every RGB channel residual is pulled toward the input luminance residual.
    #[default]
    RgbLum,
    /// Y residual toward the input luminance residual, X and Z toward zero.
    XyzLum,
    /// Plain warping residual on RGB.
    None,
}

impl TemporalVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb_lum" => Ok(TemporalVariant::RgbLum),
            "xyz_lum" => Ok(TemporalVariant::XyzLum),
            "none" => Ok(TemporalVariant::None),
            other => Err(Error::Config(format!(
                "unknown temporal variant `{other}` (expected rgb_lum, xyz_lum or none)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemporalVariant::RgbLum => "rgb_lum",
            TemporalVariant::XyzLum => "xyz_lum",
            TemporalVariant::None => "none",
        }
    }
}

/// Per-term values, with the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub temporal_feature: f64,
    pub temporal_output: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the components.
    pub fn weighted(
        content: f64,
        style: f64,
        tv: f64,
        temporal_feature: f64,
        temporal_output: f64,
        w: &LossWeights,
    ) -> Self {
        let total = w.alpha * content
            + w.beta * style
            + w.gamma * tv
            + w.lambda_f * temporal_feature
            + w.lambda_o * temporal_output;
        LossBreakdown {
            content,
            style,
            tv,
            temporal_feature,
            temporal_output,
            total,
        }
    }

    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("content", self.content),
            ("style", self.style),
            ("tv", self.tv),
            ("temp_f", self.temporal_feature),
            ("temp_o", self.temporal_output),
            ("total", self.total),
        ]
    }

    /// First non-finite term, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

fn matrix<T: Element>(rows: &[[f64; 3]]) -> Vec<Vec<T>> {
    rows.iter().map(|r| r.iter().map(|&v| T::from_f64(v)).collect()).collect()
}

fn check_rgb(op: &'static str, shape: &[usize]) -> Result<()> {
    match shape {
        [3, _, _] => Ok(()),
        [c, _, _] => Err(Error::shape(op, "channels", 3, c)),
        other => Err(Error::shape(op, "rank", 3, other.len())),
    }
}

/// `[3, H, W]` → `[1, H, W]` relative luminance, recorded on the tape.
pub fn relative_luminance<T: Element>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    check_rgb("relative_luminance", tape.value(image).shape())?;
    tape.channel_mix(image, matrix(&[LUMINANCE]))
}

pub fn rgb_to_xyz<T: Element>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    check_rgb("rgb_to_xyz", tape.value(image).shape())?;
    tape.channel_mix(image, matrix(&RGB_TO_XYZ))
}

/// Eager relative luminance.
pub fn luminance<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(image.clone());
    let y = relative_luminance(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

/// Eager RGB → XYZ.
pub fn xyz<T: Element>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(image.clone());
    let y = rgb_to_xyz(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

fn check_flow(op: &'static str, h: usize, w: usize, flow: &FlowField, mask: &OcclusionMask) -> Result<()> {
    if (flow.height(), flow.width()) != (h, w) {
        return Err(Error::shape(op, "flow size", (h, w), (flow.height(), flow.width())));
    }
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(op, "mask size", (h, w), (mask.height(), mask.width())));
    }
    Ok(())
}

/// Output-level temporal loss between two stylized frames, normalized by
/// `D = H * W`. Differentiable with respect to both outputs.
#[allow(clippy::too_many_arguments)]
pub fn output_temporal_loss<T: Element>(
    tape: &mut Tape<T>,
    out_prev: Var,
    out_cur: Var,
    in_prev: &Tensor<T>,
    in_cur: &Tensor<T>,
    flow: &FlowField,
    mask: &OcclusionMask,
    variant: TemporalVariant,
) -> Result<Var> {
    let shape = tape.value(out_cur).shape().to_vec();
    check_rgb("output_temporal_loss", &shape)?;
    for (what, s) in [
        ("previous output", tape.value(out_prev).shape()),
        ("previous input", in_prev.shape()),
        ("current input", in_cur.shape()),
    ] {
        if s != shape.as_slice() {
            return Err(Error::shape("output_temporal_loss", what, &shape, s));
        }
    }
    let (h, w) = (shape[1], shape[2]);
    check_flow("output_temporal_loss", h, w, flow, mask)?;

    let table = Arc::new(flow.sample_table::<T>());
    let warped = tape.sample(out_prev, table)?;
    let d_out = tape.sub(out_cur, warped)?;

    let warped_in = warp(in_prev, flow)?;
    let mut d_in = in_cur.clone();
    d_in.axpy(-T::one(), &warped_in)?;
    let d_in_y = luminance(&d_in)?;

    let plane = h * w;
    let (mixed, target) = match variant {
        TemporalVariant::RgbLum => {
            let y = d_in_y.data();
            let target = Tensor::from_fn([3, h, w], |i| y[i % plane]);
            (d_out, Some(target))
        }
        TemporalVariant::XyzLum => {
            let y = d_in_y.data();
            let target = Tensor::from_fn([3, h, w], |i| if i / plane == 1 { y[i % plane] } else { T::zero() });
            (rgb_to_xyz(tape, d_out)?, Some(target))
        }
        TemporalVariant::None => (d_out, None),
    };
    let residual = match target {
        Some(t) => {
            let t = tape.constant(t);
            tape.sub(mixed, t)?
        }
        None => mixed,
    };
    let sq = tape.square(residual);
    let s = tape.masked_sum(sq, &mask.to_tensor())?;
    Ok(tape.mul_scalar(s, T::from_f64(1.0 / plane as f64)))
}

/// Feature-level temporal loss on encoder maps, normalized by `C * h * w`.
/// `flow` and `mask` must already be at the feature resolution.
pub fn feature_temporal_loss<T: Element>(
    tape: &mut Tape<T>,
    feat_prev: Var,
    feat_cur: Var,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<Var> {
    let shape = tape.value(feat_cur).shape().to_vec();
    let (c, h, w) = tape.value(feat_cur).chw()?;
    if tape.value(feat_prev).shape() != shape.as_slice() {
        return Err(Error::shape(
            "feature_temporal_loss",
            "previous features",
            &shape,
            tape.value(feat_prev).shape(),
        ));
    }
    check_flow("feature_temporal_loss", h, w, flow, mask)?;
    let warped = tape.sample(feat_prev, Arc::new(flow.sample_table::<T>()))?;
    let r = tape.sub(feat_cur, warped)?;
    let sq = tape.square(r);
    let s = tape.masked_sum(sq, &mask.to_tensor())?;
    Ok(tape.mul_scalar(s, T::from_f64(1.0 / (c * h * w) as f64)))
}

fn tap<'a, V>(feats: &'a Features<V>, name: &str, what: &str) -> Result<&'a V> {
    feats
        .get(name)
        .ok_or_else(|| Error::invalid("losses", format!("{what} features lack tap {name}")))
}

/// Mean squared difference at the content tap. `target` holds detached
/// input features.
pub fn content_loss<T: Element>(tape: &mut Tape<T>, out: &Features<Var>, target: &Features<Tensor<T>>) -> Result<Var> {
    let o = *tap(out, CONTENT_TAP, "output")?;
    let t = tap(target, CONTENT_TAP, "target")?;
    if tape.value(o).shape() != t.shape() {
        return Err(Error::shape("content_loss", "tap shape", t.shape(), tape.value(o).shape()));
    }
    let t = tape.constant(t.clone());
    let d = tape.sub(o, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `F Fᵀ / (C H W)` of a `[C, H, W]` tensor.
pub fn gram<T: Element>(tape: &mut Tape<T>, feat: Var) -> Result<Var> {
    tape.gram(feat)
}

/// Eager Gram matrices of every style tap.
pub fn style_grams<T: Element>(feats: &Features<Tensor<T>>) -> Result<Vec<(&'static str, Tensor<T>)>> {
    STYLE_TAPS
        .iter()
        .map(|&name| {
            let f = tap(feats, name, "style")?;
            let (c, h, w) = f.chw()?;
            let g = crate::tensor::kernels::gram_forward(f.data(), c, h * w);
            Ok((name, Tensor::new([c, c], g)?))
        })
        .collect()
}

/// Sum over the style taps of the squared Frobenius distance between Gram
/// matrices.
pub fn style_loss<T: Element>(
    tape: &mut Tape<T>,
    out: &Features<Var>,
    grams: &[(&'static str, Tensor<T>)],
) -> Result<Var> {
    if grams.len() != STYLE_TAPS.len() || grams.iter().zip(STYLE_TAPS).any(|((n, _), s)| *n != s) {
        return Err(Error::invalid(
            "style_loss",
            format!("style grams must cover taps {STYLE_TAPS:?} in order"),
        ));
    }
    let mut total: Option<Var> = None;
    for (name, target) in grams {
        let f = *tap(out, name, "output")?;
        let g = tape.gram(f)?;
        if tape.value(g).shape() != target.shape() {
            return Err(Error::shape("style_loss", format!("gram at {name}"), target.shape(), tape.value(g).shape()));
        }
        let t = tape.constant(target.clone());
        let d = tape.sub(g, t)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("four taps"))
}

/// Anisotropic squared total variation divided by the element count. A
/// dimension of extent 1 contributes no differences.
pub fn tv_loss<T: Element>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    let (c, h, w) = tape.value(image).chw()?;
    let mut total: Option<Var> = None;
    for (axis, extent) in [(1, h), (2, w)] {
        if extent < 2 {
            continue;
        }
        let hi = tape.narrow(image, axis, 1, extent - 1)?;
        let lo = tape.narrow(image, axis, 0, extent - 1)?;
        let d = tape.sub(hi, lo)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => {
            let s = tape.sum(image);
            tape.mul_scalar(s, T::zero())
        }
    };
    Ok(tape.mul_scalar(total, T::from_f64(1.0 / (c * h * w) as f64)))
}

/// Everything the two-frame objective needs: index 0 is frame t-1, index 1
/// is frame t.
pub struct TwoFrameBundle<'a, T: Element> {
    pub inputs: [&'a Tensor<T>; 2],
    pub outputs: [Var; 2],
    /// Encoder feature maps of both frames.
    pub encoded: [Var; 2],
    pub output_features: [&'a Features<Var>; 2],
    /// Detached backbone features of the input frames.
    pub content_targets: [&'a Features<Tensor<T>>; 2],
    pub style_grams: &'a [(&'static str, Tensor<T>)],
    /// Full-resolution sampling flow and mask from frame t to t-1.
    pub flow: &'a FlowField,
    pub mask: &'a OcclusionMask,
    /// The same at encoder resolution.
    pub flow_features: &'a FlowField,
    pub mask_features: &'a OcclusionMask,
    pub variant: TemporalVariant,
}

/// Two-frame objective. Returns the scalar to differentiate and the
/// per-term breakdown; perceptual terms are summed over both frames.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    b: &TwoFrameBundle<'_, T>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let mut content = None;
    let mut style = None;
    let mut tv = None;
    for i in 0..2 {
        let c = content_loss(tape, b.output_features[i], b.content_targets[i])?;
        let s = style_loss(tape, b.output_features[i], b.style_grams)?;
        let t = tv_loss(tape, b.outputs[i])?;
        content = Some(match content {
            Some(a) => tape.add(a, c)?,
            None => c,
        });
        style = Some(match style {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
        tv = Some(match tv {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    let (content, style, tv) = (content.unwrap(), style.unwrap(), tv.unwrap());
    let tf = feature_temporal_loss(tape, b.encoded[0], b.encoded[1], b.flow_features, b.mask_features)?;
    let to = output_temporal_loss(
        tape,
        b.outputs[0],
        b.outputs[1],
        b.inputs[0],
        b.inputs[1],
        b.flow,
        b.mask,
        b.variant,
    )?;

    let terms = [
        (content, w.alpha),
        (style, w.beta),
        (tv, w.gamma),
        (tf, w.lambda_f),
        (to, w.lambda_o),
    ];
    let mut total: Option<Var> = None;
    for (v, weight) in terms {
        let scaled = tape.mul_scalar(v, T::from_f64(weight));
        total = Some(match total {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    let val = |tape: &Tape<T>, v: Var| tape.value(v).item().as_f64();
    let breakdown = LossBreakdown::weighted(
        val(tape, content),
        val(tape, style),
        val(tape, tv),
        val(tape, tf),
        val(tape, to),
        w,
    );
    Ok((total.unwrap(), breakdown))
}
