//! Optical flow fields, occlusion masks and the warping operator.
//!
//! A [`FlowField`] is always stored in the *sampling* convention: for each
//! pixel `p` of the current frame, `p + flow(p)` is the matching location in
//! the previous frame. Warping the previous frame with it pulls that frame
//! into current-frame coordinates.

mod flo;
mod mask_io;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::SampleTable;
use crate::tensor::{Element, Tape, Tensor, Var};

pub use flo::{load_flo, read_flo, save_flo, write_flo, FLO_MAGIC};
pub use mask_io::{load_mask, save_mask};

/// Dense per-pixel `(dx, dy)` field in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    /// Interleaved `(dx, dy)`, row-major.
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("FlowField", "empty field"));
        }
        if data.len() != 2 * width * height {
            return Err(Error::shape("FlowField", "vector count", 2 * width * height, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "flow vector at pixel ({}, {})",
                (i / 2) % width,
                (i / 2) / width
            )));
        }
        Ok(FlowField { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let data = std::iter::repeat_n([dx, dy], width * height).flatten().collect();
        FlowField { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Result<Self> {
        let mut data = Vec::with_capacity(2 * width * height);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(x, y);
                data.push(dx);
                data.push(dy);
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, v: (f32, f32)) {
        let i = 2 * (y * self.width + x);
        self.data[i] = v.0;
        self.data[i + 1] = v.1;
    }

    /// Number of vectors violating `|dx| <= width`, `|dy| <= height`.
    pub fn out_of_bounds_count(&self) -> usize {
        self.data
            .chunks_exact(2)
            .filter(|v| v[0].abs() > self.width as f32 || v[1].abs() > self.height as f32)
            .count()
    }

    /// `(min, max)` vector magnitude.
    pub fn magnitude_range(&self) -> (f32, f32) {
        self.data
            .chunks_exact(2)
            .map(|v| v[0].hypot(v[1]))
            .fold((f32::INFINITY, 0.0f32), |(lo, hi), m| (lo.min(m), hi.max(m)))
    }

    pub fn negated(&self) -> FlowField {
        FlowField {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }

    /// Bilinear lookup at a fractional location, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = x.clamp(0.0, (self.width - 1) as f64);
        let sy = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let v = |x: usize, y: usize| {
            let (a, b) = self.get(x, y);
            (a as f64, b as f64)
        };
        let (a, b, c, d) = (v(x0, y0), v(x1, y0), v(x0, y1), v(x1, y1));
        let lerp = |p: f64, q: f64, r: f64, s: f64| {
            (1.0 - fy) * ((1.0 - fx) * p + fx * q) + fy * ((1.0 - fx) * r + fx * s)
        };
        (lerp(a.0, b.0, c.0, d.0), lerp(a.1, b.1, c.1, d.1))
    }

    pub fn sample_table<T: Element>(&self) -> SampleTable<T> {
        SampleTable::new(self.width, self.height, &self.data)
    }

    /// Bilinear resize; vectors are rescaled with the resolution change.
    pub fn resize(&self, width: usize, height: usize) -> FlowField {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let (sx, sy) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        let mut data = Vec::with_capacity(2 * width * height);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = self.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
                data.push((dx / sx) as f32);
                data.push((dy / sy) as f32);
            }
        }
        FlowField { width, height, data }
    }
}

/// Per-pixel traceability: 1 where a valid correspondence exists, else 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("OcclusionMask", "pixel count", width * height, data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("OcclusionMask", format!("value {v} is not 0 or 1")));
        }
        Ok(OcclusionMask { width, height, data })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        OcclusionMask {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        OcclusionMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, traceable: bool) {
        self.data[y * self.width + x] = traceable as u8;
    }

    pub fn traceable_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// `[H, W]` tensor of 0/1 values.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn([self.height, self.width], |i| T::from_f64(self.data[i] as f64))
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> OcclusionMask {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                data.push(self.get(sx, sy));
            }
        }
        OcclusionMask { width, height, data }
    }
}

/// Constants of the forward-backward consistency test.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyParams {
    /// Relative tolerance on the round-trip vector.
    pub alpha1: f64,
    /// Absolute tolerance on the round-trip vector, in squared pixels.
    pub alpha2: f64,
    /// Also discard pixels on motion boundaries.
    pub motion_boundaries: bool,
    pub boundary_alpha1: f64,
    pub boundary_alpha2: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        ConsistencyParams {
            alpha1: 0.01,
            alpha2: 0.5,
            motion_boundaries: false,
            boundary_alpha1: 0.01,
            boundary_alpha2: 0.002,
        }
    }
}

fn same_size(op: &'static str, a: &FlowField, b: &FlowField) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(op, "flow size", (a.width, a.height), (b.width, b.height)));
    }
    Ok(())
}

/// Occlusion mask for frame `t` from `flow_fwd` (t-1 → t) and `flow_bwd`
/// (t → t-1), with default consistency constants.
pub fn occlusion_mask(flow_fwd: &FlowField, flow_bwd: &FlowField) -> Result<OcclusionMask> {
    occlusion_mask_with(flow_fwd, flow_bwd, &ConsistencyParams::default())
}

/// Pixel `p` is untraceable when
/// `|wb(p) + wf(p + wb(p))|^2 > alpha1 * (|wb(p)|^2 + |wf(p + wb(p))|^2) + alpha2`,
/// with `wf` sampled bilinearly.
pub fn occlusion_mask_with(
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    params: &ConsistencyParams,
) -> Result<OcclusionMask> {
    same_size("occlusion_mask", flow_fwd, flow_bwd)?;
    let (w, h) = (flow_bwd.width, flow_bwd.height);
    let mut mask = OcclusionMask::ones(w, h);
    for y in 0..h {
        for x in 0..w {
            let (bx, by) = flow_bwd.get(x, y);
            let (bx, by) = (bx as f64, by as f64);
            let (fx, fy) = flow_fwd.sample(x as f64 + bx, y as f64 + by);
            let round_trip = (bx + fx).powi(2) + (by + fy).powi(2);
            let scale = bx * bx + by * by + fx * fx + fy * fy;
            let mut ok = round_trip <= params.alpha1 * scale + params.alpha2;
            if ok && params.motion_boundaries {
                let (gu, gv) = gradient_sq(flow_bwd, x, y);
                ok = gu + gv <= params.boundary_alpha1 * (bx * bx + by * by) + params.boundary_alpha2;
            }
            mask.set(x, y, ok);
        }
    }
    Ok(mask)
}

/// Squared forward-difference gradient magnitudes of the two flow components.
fn gradient_sq(flow: &FlowField, x: usize, y: usize) -> (f64, f64) {
    let (u, v) = flow.get(x, y);
    let (ux, vx) = flow.get((x + 1).min(flow.width - 1), y);
    let (uy, vy) = flow.get(x, (y + 1).min(flow.height - 1));
    let sq = |a: f32, b: f32| ((a - b) as f64).powi(2);
    (sq(ux, u) + sq(uy, u), sq(vx, v) + sq(vy, v))
}

/// Shrinks a flow/mask pair to feature-map resolution: flow vectors are
/// average-pooled over `factor x factor` blocks and divided by `factor`; a
/// mask block is traceable only if every member is.
pub fn downscale_flow(flow: &FlowField, mask: &OcclusionMask, factor: usize) -> Result<(FlowField, OcclusionMask)> {
    if (flow.width, flow.height) != (mask.width, mask.height) {
        return Err(Error::shape(
            "downscale_flow",
            "mask size",
            (flow.width, flow.height),
            (mask.width, mask.height),
        ));
    }
    if factor == 0 || !flow.width.is_multiple_of(factor) || !flow.height.is_multiple_of(factor) {
        return Err(Error::invalid(
            "downscale_flow",
            format!("factor {factor} does not divide {}x{}", flow.width, flow.height),
        ));
    }
    let (w, h) = (flow.width / factor, flow.height / factor);
    let norm = (factor * factor * factor) as f64;
    let mut data = Vec::with_capacity(2 * w * h);
    let mut mdata = Vec::with_capacity(w * h);
    for by in 0..h {
        for bx in 0..w {
            let (mut sx, mut sy) = (0.0f64, 0.0f64);
            let mut m = 1u8;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    let (dx, dy) = flow.get(x, y);
                    sx += dx as f64;
                    sy += dy as f64;
                    m = m.min(mask.get(x, y));
                }
            }
            data.push((sx / norm) as f32);
            data.push((sy / norm) as f32);
            mdata.push(m);
        }
    }
    Ok((
        FlowField {
            width: w,
            height: h,
            data,
        },
        OcclusionMask {
            width: w,
            height: h,
            data: mdata,
        },
    ))
}

fn check_warp_size<T: Element>(source: &Tensor<T>, flow: &FlowField) -> Result<()> {
    let (_, h, w) = source.chw()?;
    if (w, h) != (flow.width, flow.height) {
        return Err(Error::shape("warp", "spatial size", (flow.height, flow.width), (h, w)));
    }
    Ok(())
}

/// Bilinear resampling of `source` at `p + flow(p)`, out-of-range
/// locations clamped to the border.
pub fn bilinear_sample<T: Element>(source: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    check_warp_size(source, flow)?;
    let table = flow.sample_table::<T>();
    Tensor::new(source.shape().to_vec(), table.forward(source.data(), source.shape()[0]))
}

/// `W(source)`: pulls the previous frame into current-frame coordinates.
pub fn warp<T: Element>(source: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    bilinear_sample(source, flow)
}

/// Recorded warp, differentiable with respect to `source` only.
pub fn warp_on_tape<T: Element>(tape: &mut Tape<T>, source: Var, flow: &FlowField) -> Result<Var> {
    check_warp_size(tape.value(source), flow)?;
    tape.sample(source, Arc::new(flow.sample_table()))
}

/// Mirrors columns and negates `dx`.
pub fn flip_flow(flow: &FlowField) -> FlowField {
    let (w, h) = (flow.width, flow.height);
    let mut data = Vec::with_capacity(flow.data.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let (dx, dy) = flow.get(x, y);
            data.push(-dx);
            data.push(dy);
        }
    }
    FlowField { width: w, height: h, data }
}

pub fn flip_mask(mask: &OcclusionMask) -> OcclusionMask {
    let data = mask
        .data
        .chunks_exact(mask.width)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    OcclusionMask {
        width: mask.width,
        height: mask.height,
        data,
    }
}

/// Mirrors the last (width) axis of a `[C, H, W]` tensor.
pub fn flip_image<T: Element>(image: &Tensor<T>) -> Tensor<T> {
    let w = *image.shape().last().expect("rank >= 1");
    let data = image
        .data()
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same element count")
}
