//! Synthetic translating-texture scenes with exactly known flow.
//!
//! Frame `t` of a scene is `I_t(p) = T(p - t * s)` for a smooth random
//! texture `T` and an integer shift `s`. The forward flow is `s` everywhere
//! and the sampling flow is `-s`, so warping frame `t-1` reproduces frame
//! `t` exactly away from the border. Frames are quantized to 8-bit levels
//! so they survive a PNG roundtrip unchanged.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::SceneSequence;
use crate::flow::{save_flo, save_mask, FlowField, OcclusionMask};
use crate::image_io::{frame_name, save_image};
use crate::tensor::Tensor;
use crate::train::dataset::MANIFEST_NAME;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Per-frame displacement `(dx, dy)` in pixels.
    pub shift: (i32, i32),
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(width: usize, height: usize, frames: usize, shift: (i32, i32), seed: u64) -> Self {
        FixtureSpec {
            width,
            height,
            frames,
            shift,
            seed,
        }
    }

    pub fn forward_flow(&self) -> FlowField {
        FlowField::constant(self.width, self.height, self.shift.0 as f32, self.shift.1 as f32)
    }

    pub fn sampling_flow(&self) -> FlowField {
        FlowField::constant(self.width, self.height, -self.shift.0 as f32, -self.shift.1 as f32)
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

/// A smooth color texture defined on the whole integer plane.
pub struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..6)
            .map(|_| {
                let period = rng.random_range(6.0..24.0);
                let angle: f64 = rng.random_range(0.0..TAU);
                Wave {
                    fx: angle.cos() / period,
                    fy: angle.sin() / period,
                    phase: rng.random_range(0.0..TAU),
                    amp: [
                        rng.random_range(0.02..0.12),
                        rng.random_range(0.02..0.12),
                        rng.random_range(0.02..0.12),
                    ],
                }
            })
            .collect();
        Texture { waves }
    }

    /// Quantized value at integer location `(x, y)`, channel `c`.
    pub fn at(&self, c: usize, x: i64, y: i64) -> f32 {
        let v = 0.5
            + self
                .waves
                .iter()
                .map(|w| w.amp[c] * (TAU * (w.fx * x as f64 + w.fy * y as f64) + w.phase).sin())
                .sum::<f64>();
        ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
    }
}

/// All frames of a scene as `[3, H, W]` tensors.
pub fn texture_frames(spec: &FixtureSpec) -> Vec<Tensor<f32>> {
    let tex = Texture::new(spec.seed);
    let (w, h) = (spec.width, spec.height);
    (0..spec.frames)
        .map(|t| {
            let (ox, oy) = (spec.shift.0 as i64 * t as i64, spec.shift.1 as i64 * t as i64);
            Tensor::from_fn([3, h, w], |i| {
                let (c, p) = (i / (w * h), i % (w * h));
                tex.at(c, (p % w) as i64 - ox, (p / w) as i64 - oy)
            })
        })
        .collect()
}

/// Writes a scene directory: frames numbered from 1, forward flows in
/// `flow/`, sampling flows in `flow_bwd/` and full masks in `mask/`, each
/// indexed by the later frame.
pub fn write_scene(dir: &Path, spec: &FixtureSpec) -> Result<()> {
    for sub in ["flow", "flow_bwd", "mask"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let fwd = spec.forward_flow();
    let bwd = spec.sampling_flow();
    let mask = OcclusionMask::ones(spec.width, spec.height);
    for (t, frame) in texture_frames(spec).iter().enumerate() {
        let n = t as u32 + 1;
        let name = frame_name(n);
        save_image(&dir.join(&name), frame)?;
        if t > 0 {
            let flo = name.replace(".png", ".flo");
            save_flo(dir.join("flow").join(&flo), &fwd)?;
            save_flo(dir.join("flow_bwd").join(&flo), &bwd)?;
            save_mask(dir.join("mask").join(&name), &mask)?;
        }
    }
    Ok(())
}

/// Writes several scenes and the manifest listing them.
pub fn write_dataset(root: &Path, scenes: &[(&str, FixtureSpec)]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    for (name, spec) in scenes {
        write_scene(&root.join(name), spec)?;
        manifest.push_str(name);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST_NAME);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Per-scene shifts used by [`write_fixture`], cycled.
pub const FIXTURE_SHIFTS: [(i32, i32); 6] = [(1, 0), (0, 1), (1, 1), (-1, 0), (2, -1), (0, -2)];

pub const FIXTURE_CONFIG: &str = "train.cfg";

/// Writes `data/` with `scenes` square scenes, `style.png` and a
/// `train.cfg` using the test backbone. Returns the config path.
pub fn write_fixture(out: &Path, size: usize, frames: usize, scenes: usize, seed: u64) -> Result<std::path::PathBuf> {
    if size == 0 || !size.is_multiple_of(8) || frames < 2 || scenes == 0 {
        return Err(Error::invalid(
            "fixture",
            "needs size a multiple of 8, frames >= 2 and scenes >= 1",
        ));
    }
    let names: Vec<String> = (0..scenes).map(|i| format!("scene_{:02}", i + 1)).collect();
    let specs: Vec<(&str, FixtureSpec)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let shift = FIXTURE_SHIFTS[i % FIXTURE_SHIFTS.len()];
            (n.as_str(), FixtureSpec::new(size, size, frames, shift, seed + i as u64))
        })
        .collect();
    write_dataset(&out.join("data"), &specs)?;
    write_style_image(&out.join("style.png"), size, size)?;
    let cfg = format!(
        "dataset = data\nstyle_image = style.png\nbackbone = test\nresolution = {size}x{size}\nseed = {seed}\n"
    );
    let path = out.join(FIXTURE_CONFIG);
    std::fs::write(&path, cfg).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A scene kept in memory, with its sampling flows and full masks.
pub fn sequence(spec: &FixtureSpec) -> Result<SceneSequence> {
    let n = spec.frames.saturating_sub(1);
    SceneSequence::new(
        texture_frames(spec),
        vec![spec.sampling_flow(); n],
        vec![OcclusionMask::ones(spec.width, spec.height); n],
    )
}

/// A high-contrast diagonal stripe pattern used as a style target.
pub fn style_image(width: usize, height: usize) -> Tensor<f32> {
    let palette = [[0.9, 0.2, 0.1], [0.1, 0.3, 0.8], [0.95, 0.85, 0.1], [0.1, 0.6, 0.2]];
    let plane = width * height;
    Tensor::from_fn([3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        let (x, y) = (p % width, p / width);
        palette[((x + 2 * y) / 5) % palette.len()][c]
    })
}

pub fn write_style_image(path: &Path, width: usize, height: usize) -> Result<()> {
    save_image(path, &style_image(width, height))
}
