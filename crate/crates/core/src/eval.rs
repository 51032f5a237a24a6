//! Temporal stability metric, warping-error histograms, error maps and the
//! latency benchmark.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::{load_flo, load_mask, warp, FlowField, OcclusionMask};
use crate::image_io::{frame_name, list_frames, load_image, to_u8};
use crate::losses::{luminance, xyz};
use crate::net::StyleNet;
use crate::tensor::Tensor;

/// Frames with the flow and mask of every transition: `flows[i]` and
/// `masks[i]` relate `frames[i]` to `frames[i + 1]` in the sampling
/// convention.
#[derive(Clone, Debug)]
pub struct SceneSequence {
    pub frames: Vec<Tensor<f32>>,
    pub flows: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
}

impl SceneSequence {
    pub fn new(frames: Vec<Tensor<f32>>, flows: Vec<FlowField>, masks: Vec<OcclusionMask>) -> Result<Self> {
        let s = SceneSequence { frames, flows, masks };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n < 2 {
            return Err(Error::invalid("SceneSequence", format!("need at least 2 frames, got {n}")));
        }
        if self.flows.len() != n - 1 || self.masks.len() != n - 1 {
            return Err(Error::invalid(
                "SceneSequence",
                format!(
                    "{n} frames need {} flows and masks, got {} flows and {} masks",
                    n - 1,
                    self.flows.len(),
                    self.masks.len()
                ),
            ));
        }
        let shape = self.frames[0].shape();
        let (_, h, w) = self.frames[0].chw()?;
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::shape("SceneSequence", format!("frame {i}"), shape, f.shape()));
            }
        }
        for (i, (f, m)) in self.flows.iter().zip(&self.masks).enumerate() {
            if (f.width(), f.height()) != (w, h) || (m.width(), m.height()) != (w, h) {
                return Err(Error::shape("SceneSequence", format!("flow/mask {i}"), (w, h), (f.width(), f.height())));
            }
        }
        Ok(())
    }

    /// Same flows and masks, different frames (e.g. stylized outputs).
    pub fn with_frames(&self, frames: Vec<Tensor<f32>>) -> Result<Self> {
        SceneSequence::new(frames, self.flows.clone(), self.masks.clone())
    }
}

/// Reads `frame_*.png` from `frames_dir` and the flows and masks of
/// `scene_dir` in the dataset layout (`flow_bwd/` if present, else negated
/// `flow/`; `mask/`), indexed by the later frame of each transition.
pub fn load_sequence(frames_dir: &Path, scene_dir: &Path) -> Result<SceneSequence> {
    let listed = list_frames(frames_dir)?;
    let mut frames = Vec::with_capacity(listed.len());
    let mut flows = Vec::new();
    let mut masks = Vec::new();
    for (i, (n, path)) in listed.iter().enumerate() {
        frames.push(load_image(path)?);
        if i == 0 {
            continue;
        }
        let flo = frame_name(*n).replace(".png", ".flo");
        let bwd = scene_dir.join("flow_bwd").join(&flo);
        let flow = if bwd.is_file() {
            load_flo(&bwd)?
        } else {
            load_flo(scene_dir.join("flow").join(&flo))?.negated()
        };
        flows.push(flow);
        masks.push(load_mask(scene_dir.join("mask").join(frame_name(*n)))?);
    }
    SceneSequence::new(frames, flows, masks)
}

/// Masked squared warping residual of one transition, summed over channels
/// and divided by `H * W`.
pub fn transition_error(prev: &Tensor<f32>, cur: &Tensor<f32>, flow: &FlowField, mask: &OcclusionMask) -> Result<f64> {
    let warped = warp(prev, flow)?;
    let (c, h, w) = cur.chw()?;
    let plane = h * w;
    let m = mask.data();
    let (a, b) = (cur.data(), warped.data());
    let mut total = 0.0f64;
    for ch in 0..c {
        for p in 0..plane {
            if m[p] != 0 {
                let d = a[ch * plane + p] as f64 - b[ch * plane + p] as f64;
                total += d * d;
            }
        }
    }
    Ok(total / plane as f64)
}

/// Square root of the mean transition error over the `T - 1` transitions.
pub fn e_stab(seq: &SceneSequence) -> Result<f64> {
    seq.validate()?;
    let mut sum = 0.0;
    for t in 1..seq.frames.len() {
        sum += transition_error(&seq.frames[t - 1], &seq.frames[t], &seq.flows[t - 1], &seq.masks[t - 1])?;
    }
    Ok((sum / (seq.frames.len() - 1) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Xyz,
}

impl ColorSpace {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ColorSpace::Rgb),
            "xyz" => Ok(ColorSpace::Xyz),
            other => Err(Error::invalid("colorspace", format!("unknown color space `{other}`"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "RGB",
            ColorSpace::Xyz => "XYZ",
        }
    }

    pub fn channels(self) -> [&'static str; 3] {
        match self {
            ColorSpace::Rgb => ["R", "G", "B"],
            ColorSpace::Xyz => ["X", "Y", "Z"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramReport {
    pub colorspace: ColorSpace,
    pub lo: f64,
    pub hi: f64,
    /// `counts[channel][bin]`.
    pub counts: [Vec<u64>; 3],
    /// Masked pixels visited over all transitions.
    pub samples: u64,
}

impl HistogramReport {
    pub fn bins(&self) -> usize {
        self.counts[0].len()
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + bin as f64 * width, self.lo + (bin + 1) as f64 * width)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let [a, b, c] = self.colorspace.channels();
        let mut s = format!("bin_lo,bin_hi,count_{a},count_{b},count_{c}\n");
        for i in 0..self.bins() {
            let (lo, hi) = self.edges(i);
            let _ = writeln!(s, "{lo},{hi},{},{},{}", self.counts[0][i], self.counts[1][i], self.counts[2][i]);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "colorspace={}\nbins={}\nrange={},{}\nsamples={}\ntotal={}\n",
            self.colorspace.tag(),
            self.bins(),
            self.lo,
            self.hi,
            self.samples,
            self.total()
        )
    }
}

pub const DEFAULT_BINS: usize = 64;

/// Histogram of masked per-channel `|I_t - W(I_{t-1})|` over `[lo, hi)`;
/// values at or past `hi` land in the last bin.
pub fn warp_error_histogram(seq: &SceneSequence, colorspace: ColorSpace, bins: usize, lo: f64, hi: f64) -> Result<HistogramReport> {
    seq.validate()?;
    if bins == 0 || !(hi > lo) {
        return Err(Error::invalid("warp_error_histogram", "need bins >= 1 and hi > lo"));
    }
    let frames: Vec<Tensor<f32>> = match colorspace {
        ColorSpace::Rgb => seq.frames.clone(),
        ColorSpace::Xyz => seq.frames.iter().map(xyz).collect::<Result<_>>()?,
    };
    let mut counts = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
    let mut samples = 0;
    let width = (hi - lo) / bins as f64;
    for t in 1..frames.len() {
        let warped = warp(&frames[t - 1], &seq.flows[t - 1])?;
        let (_, h, w) = frames[t].chw()?;
        let plane = h * w;
        let m = seq.masks[t - 1].data();
        for p in (0..plane).filter(|&p| m[p] != 0) {
            samples += 1;
            for (c, hist) in counts.iter_mut().enumerate() {
                let e = (frames[t].data()[c * plane + p] as f64 - warped.data()[c * plane + p] as f64).abs();
                let bin = (((e - lo) / width).floor().max(0.0) as usize).min(bins - 1);
                hist[bin] += 1;
            }
        }
    }
    Ok(HistogramReport {
        colorspace,
        lo,
        hi,
        counts,
        samples,
    })
}

/// Per-pixel error maps of one transition, occluded pixels zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMaps {
    pub width: usize,
    pub height: usize,
    /// `M * sum_c |dO_c|`.
    pub total: Vec<f32>,
    /// `M * |dO_Y - dI_Y|`.
    pub luminance: Vec<f32>,
}

pub const DEFAULT_ERR_SCALE: f64 = 0.5;

impl ErrorMaps {
    /// 8-bit encoding `clamp(err * 255 / err_scale)`.
    pub fn encode(values: &[f32], err_scale: f64) -> Vec<u8> {
        values.iter().map(|&v| to_u8((v as f64 / err_scale) as f32)).collect()
    }
}

/// One [`ErrorMaps`] per transition of the stylized sequence `outputs`,
/// against the input sequence `inputs` sharing its flows and masks.
pub fn temporal_error_maps(outputs: &SceneSequence, inputs: &SceneSequence) -> Result<Vec<ErrorMaps>> {
    outputs.validate()?;
    inputs.validate()?;
    if outputs.frames.len() != inputs.frames.len() {
        return Err(Error::invalid(
            "temporal_error_maps",
            format!("{} output frames but {} input frames", outputs.frames.len(), inputs.frames.len()),
        ));
    }
    let mut maps = Vec::new();
    for t in 1..outputs.frames.len() {
        let flow = &outputs.flows[t - 1];
        let mask = &outputs.masks[t - 1];
        let mut d_out = outputs.frames[t].clone();
        d_out.axpy(-1.0, &warp(&outputs.frames[t - 1], flow)?)?;
        let mut d_in = inputs.frames[t].clone();
        d_in.axpy(-1.0, &warp(&inputs.frames[t - 1], flow)?)?;
        let (yo, yi) = (luminance(&d_out)?, luminance(&d_in)?);
        let (_, h, w) = d_out.chw()?;
        let plane = h * w;
        let m = mask.data();
        let mut total = vec![0.0f32; plane];
        let mut lum = vec![0.0f32; plane];
        for p in (0..plane).filter(|&p| m[p] != 0) {
            total[p] = (0..3).map(|c| d_out.data()[c * plane + p].abs()).sum();
            lum[p] = (yo.data()[p] - yi.data()[p]).abs();
        }
        maps.push(ErrorMaps {
            width: w,
            height: h,
            total,
            luminance: lum,
        });
    }
    Ok(maps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsReport {
    pub width: usize,
    pub height: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub latencies_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub fps: f64,
    pub hardware: String,
}

impl FpsReport {
    pub fn to_text(&self) -> String {
        format!(
            "resolution={}x{}\nwarmup_iters={}\niters={}\nmedian_ms={:.3}\nmean_ms={:.3}\nfps={:.3}\nhardware={}\n\
             note=single-frame CPU latency of encode+decode; not comparable to GPU throughput figures\n",
            self.width, self.height, self.warmup_iters, self.timed_iters, self.median_ms, self.mean_ms, self.fps, self.hardware
        )
    }
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {cores} logical cores; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times encode+decode on a synthetic frame of `width x height`.
pub fn fps_benchmark(net: &StyleNet, width: usize, height: usize, warmup_iters: usize, timed_iters: usize) -> Result<FpsReport> {
    if timed_iters == 0 {
        return Err(Error::invalid("fps_benchmark", "timed_iters must be >= 1"));
    }
    let plane = width * height;
    let frame = Tensor::from_fn([3, height, width], |i| ((i % plane) as f32 / plane as f32 + (i / plane) as f32 * 0.25) % 1.0);
    for _ in 0..warmup_iters {
        net.stylize(&frame)?;
    }
    let mut latencies_ms = Vec::with_capacity(timed_iters);
    for _ in 0..timed_iters {
        let start = Instant::now();
        let out = net.stylize(&frame)?;
        latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mut sorted = latencies_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median_ms = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean_ms = latencies_ms.iter().sum::<f64>() / n as f64;
    Ok(FpsReport {
        width,
        height,
        warmup_iters,
        timed_iters,
        latencies_ms,
        median_ms,
        mean_ms,
        fps: 1e3 / mean_ms,
        hardware: hardware_descriptor(),
    })
}
