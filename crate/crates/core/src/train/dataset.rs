//! Frame-pair dataset on disk.
//!
//! ```text
//! root/scenes.txt                  one scene directory per line, '#' comments
//! root/<scene>/frame_0001.png ...
//! root/<scene>/flow/frame_NNNN.flo      forward flow from frame NNNN-1 to NNNN
//! root/<scene>/flow_bwd/frame_NNNN.flo  optional: flow from NNNN back to NNNN-1
//! root/<scene>/mask/frame_NNNN.png      traceability of frame NNNN pixels
//! ```
//!
//! Flow and mask files are indexed by the later frame of the pair. The
//! warp needs the sampling convention (for each pixel of frame t, its
//! displacement into frame t-1), which is exactly the backward flow. When
//! only the forward flow exists, its negation is used and the sample is
//! flagged as approximate.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{downscale_flow, flip_flow, flip_image, flip_mask, load_flo, load_mask, FlowField, OcclusionMask};
use crate::image_io::{frame_name, list_frames, load_image, resize_image};
use crate::net::FEATURE_FACTOR;
use crate::tensor::{Element, Tensor};

pub const MANIFEST_NAME: &str = "scenes.txt";

/// Two consecutive frames with the flow and mask relating them, at full and
/// encoder resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePairSample<T = f32> {
    pub prev: Tensor<T>,
    pub cur: Tensor<T>,
    /// Sampling flow from the current frame into the previous one.
    pub flow: FlowField,
    pub mask: OcclusionMask,
    pub flow_ds: FlowField,
    pub mask_ds: OcclusionMask,
    /// Whether `flow` is the negated forward flow rather than a true
    /// backward flow.
    pub approximate_flow: bool,
}

impl<T: Element> FramePairSample<T> {
    /// Builds a sample and its factor-4 flow/mask cache. All sizes must agree.
    pub fn new(prev: Tensor<T>, cur: Tensor<T>, flow: FlowField, mask: OcclusionMask) -> Result<Self> {
        let (c, h, w) = prev.chw()?;
        if c != 3 {
            return Err(Error::shape("FramePairSample", "channels", 3, c));
        }
        if cur.shape() != prev.shape() {
            return Err(Error::shape("FramePairSample", "current frame", prev.shape(), cur.shape()));
        }
        if (flow.width(), flow.height()) != (w, h) {
            return Err(Error::shape("FramePairSample", "flow size", (w, h), (flow.width(), flow.height())));
        }
        let (flow_ds, mask_ds) = downscale_flow(&flow, &mask, FEATURE_FACTOR)?;
        Ok(FramePairSample {
            prev,
            cur,
            flow,
            mask,
            flow_ds,
            mask_ds,
            approximate_flow: false,
        })
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    pub fn cast<U: Element>(&self) -> FramePairSample<U> {
        FramePairSample {
            prev: self.prev.cast(),
            cur: self.cur.cast(),
            flow: self.flow.clone(),
            mask: self.mask.clone(),
            flow_ds: self.flow_ds.clone(),
            mask_ds: self.mask_ds.clone(),
            approximate_flow: self.approximate_flow,
        }
    }

    /// Mirrors frames, flow (with `dx` negated) and masks together.
    pub fn flipped(&self) -> Self {
        let flow = flip_flow(&self.flow);
        let mask = flip_mask(&self.mask);
        let (flow_ds, mask_ds) = downscale_flow(&flow, &mask, FEATURE_FACTOR).expect("same geometry");
        FramePairSample {
            prev: flip_image(&self.prev),
            cur: flip_image(&self.cur),
            flow,
            mask,
            flow_ds,
            mask_ds,
            approximate_flow: self.approximate_flow,
        }
    }
}

/// Random horizontal flip. `draw` is uniform in `[0, 1)`; the pair is
/// flipped when `draw >= 1 - hflip_prob`, so draws below that threshold
/// leave it untouched.
pub fn augment<T: Element>(sample: &FramePairSample<T>, draw: f64, hflip_prob: f64) -> FramePairSample<T> {
    if draw >= 1.0 - hflip_prob {
        sample.flipped()
    } else {
        sample.clone()
    }
}

/// Paths of one frame pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSpec {
    pub scene: String,
    pub frame: u32,
    pub prev: PathBuf,
    pub cur: PathBuf,
    pub flow: PathBuf,
    pub flow_bwd: Option<PathBuf>,
    pub mask: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    /// Pairs in scene order, then frame order.
    pub pairs: Vec<PairSpec>,
    /// Frames are resized to this `(width, height)` on load when set.
    pub resolution: Option<(usize, usize)>,
}

/// Scene names from the manifest.
pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Indexes every consecutive frame pair of every listed scene. Pairs
/// missing a flow or mask file are skipped with a warning; a dataset with
/// no usable pair is an error.
pub fn load_dataset(root: &Path, resolution: Option<(usize, usize)>) -> Result<Dataset> {
    let mut pairs = Vec::new();
    for scene in read_manifest(root)? {
        let dir = root.join(&scene);
        let frames = list_frames(&dir)?;
        for win in frames.windows(2) {
            let (_, prev) = &win[0];
            let (n, cur) = &win[1];
            let name = frame_name(*n);
            let flow = dir.join("flow").join(name.replace(".png", ".flo"));
            let bwd = dir.join("flow_bwd").join(name.replace(".png", ".flo"));
            let mask = dir.join("mask").join(&name);
            if !flow.is_file() {
                log::warn!("{scene}: skipping pair ending at frame {n}, missing {}", flow.display());
                continue;
            }
            if !mask.is_file() {
                log::warn!("{scene}: skipping pair ending at frame {n}, missing {}", mask.display());
                continue;
            }
            pairs.push(PairSpec {
                scene: scene.clone(),
                frame: *n,
                prev: prev.clone(),
                cur: cur.clone(),
                flow,
                flow_bwd: bwd.is_file().then_some(bwd),
                mask,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("no usable frame pairs under {}", root.display())));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        pairs,
        resolution,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair order of one pass over the data, shuffled by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// The pairs in shuffled order for `seed`.
    pub fn shuffled(&self, seed: u64) -> Vec<&PairSpec> {
        self.epoch_order(seed, 0).into_iter().map(|i| &self.pairs[i]).collect()
    }

    pub fn load(&self, index: usize) -> Result<FramePairSample> {
        load_pair(&self.pairs[index], self.resolution)
    }
}

pub fn load_pair(spec: &PairSpec, resolution: Option<(usize, usize)>) -> Result<FramePairSample> {
    let mut prev = load_image(&spec.prev)?;
    let mut cur = load_image(&spec.cur)?;
    let (approximate, mut flow) = match &spec.flow_bwd {
        Some(p) => (false, load_flo(p)?),
        None => (true, load_flo(&spec.flow)?.negated()),
    };
    let mut mask = load_mask(&spec.mask)?;
    let (_, h, w) = cur.chw()?;
    if prev.shape() != cur.shape() {
        return Err(Error::Dataset(format!(
            "{}: frame {} and its predecessor differ in size",
            spec.scene, spec.frame
        )));
    }
    if (flow.width(), flow.height()) != (w, h) || (mask.width(), mask.height()) != (w, h) {
        return Err(Error::Dataset(format!(
            "{}: flow or mask for frame {} does not match the {w}x{h} frames",
            spec.scene, spec.frame
        )));
    }
    if let Some((rw, rh)) = resolution {
        if (rw, rh) != (w, h) {
            prev = resize_image(&prev, rw, rh)?;
            cur = resize_image(&cur, rw, rh)?;
            flow = flow.resize(rw, rh);
            mask = mask.resize_nearest(rw, rh);
        }
    }
    let mut sample = FramePairSample::new(prev, cur, flow, mask)?;
    sample.approximate_flow = approximate;
    Ok(sample)
}
