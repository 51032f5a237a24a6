//! Two-frame training loop.

pub mod adam;
pub mod dataset;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::{load_image, resize_image};
use crate::losses::{style_grams, total_loss, LossBreakdown, LossWeights, TemporalVariant, TwoFrameBundle};
use crate::net::checkpoint::{write_atomic, Container};
use crate::net::{BackboneProfile, CheckpointMetadata, PerceptualBackbone, StyleNet};
use crate::tensor::{Eager, Element, Tape, Tensor, Var};

pub use adam::{adam_step, AdamState};
pub use dataset::{augment, load_dataset, Dataset, FramePairSample, PairSpec};

pub const LOG_HEADER: &str = "step,content,style,tv,temp_f,temp_o,total";
pub const LOG_NAME: &str = "loss.csv";
pub const FINAL_MODEL: &str = "model.rcnt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub style_image: PathBuf,
    pub weights: LossWeights,
    pub variant: TemporalVariant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// `(width, height)` frames are resized to.
    pub resolution: (usize, usize),
    pub hflip_prob: f64,
    /// Checkpoint period in steps; 0 writes only the final model.
    pub checkpoint_every: u64,
    pub backbone: BackboneProfile,
    /// Weight file for the `vgg16` profile.
    pub backbone_weights: Option<PathBuf>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::new(),
            style_image: PathBuf::new(),
            weights: LossWeights::default(),
            variant: TemporalVariant::RgbLum,
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 30_000,
            seed: 0,
            resolution: (640, 360),
            hflip_prob: 0.5,
            checkpoint_every: 1000,
            backbone: BackboneProfile::Vgg16,
            backbone_weights: None,
            adam_beta1: adam::DEFAULT_BETA1,
            adam_beta2: adam::DEFAULT_BETA2,
            adam_eps: adam::DEFAULT_EPS,
        }
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

pub fn parse_resolution(v: &str) -> Result<(usize, usize)> {
    let (w, h) = v
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("resolution: expected WxH, got `{v}`")))?;
    Ok((parse_num("resolution", w.trim())?, parse_num("resolution", h.trim())?))
}

impl TrainConfig {
    /// Sets one key. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = path(v),
            "style_image" => self.style_image = path(v),
            "alpha" => self.weights.alpha = parse_num(key, v)?,
            "beta" => self.weights.beta = parse_num(key, v)?,
            "gamma" => self.weights.gamma = parse_num(key, v)?,
            "lambda_f" => self.weights.lambda_f = parse_num(key, v)?,
            "lambda_o" => self.weights.lambda_o = parse_num(key, v)?,
            "temporal_variant" => self.variant = TemporalVariant::parse(v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "resolution" => self.resolution = parse_resolution(v)?,
            "hflip_prob" => self.hflip_prob = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "backbone" => self.backbone = BackboneProfile::parse(v)?,
            "backbone_weights" => self.backbone_weights = (!v.is_empty()).then(|| path(v)),
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v, base)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let (w, h) = self.resolution;
        if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
            return Err(Error::Config(format!("resolution {w}x{h} must be nonzero multiples of 8")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.backbone == BackboneProfile::Vgg16 && self.backbone_weights.is_none() {
            return Err(Error::Config("backbone vgg16 requires backbone_weights".into()));
        }
        Ok(())
    }

    /// Resolved configuration in canonical key order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let mut out: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.display().to_string()),
            ("style_image", self.style_image.display().to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("gamma", w.gamma.to_string()),
            ("lambda_f", w.lambda_f.to_string()),
            ("lambda_o", w.lambda_o.to_string()),
            ("temporal_variant", self.variant.name().to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("resolution", format!("{}x{}", self.resolution.0, self.resolution.1)),
            ("hflip_prob", self.hflip_prob.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("backbone", self.backbone.name().to_string()),
        ];
        if let Some(p) = &self.backbone_weights {
            out.push(("backbone_weights", p.display().to_string()));
        }
        out.extend([
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// SHA-256 of the canonical text without file paths and `steps`, so
    /// relocated, resumed or extended runs keep their hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if !matches!(k.as_str(), "steps" | "dataset" | "style_image" | "backbone_weights") {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(h.finalize())
    }
}

/// Records the two-frame objective for one sample on `tape`.
///
/// Content targets are the backbone features of the input frames, computed
/// without gradients; `backbone_on_tape` must be `backbone` bound to `tape`.
#[allow(clippy::too_many_arguments)]
pub fn two_frame_objective<T: Element>(
    tape: &mut Tape<T>,
    net: &StyleNet<Var>,
    backbone_on_tape: &PerceptualBackbone<Var>,
    backbone: &PerceptualBackbone<Tensor<T>>,
    sample: &FramePairSample<T>,
    grams: &[(&'static str, Tensor<T>)],
    weights: &LossWeights,
    variant: TemporalVariant,
) -> Result<(Var, LossBreakdown)> {
    let inputs = [&sample.prev, &sample.cur];
    let mut encoded = Vec::with_capacity(2);
    let mut outputs = Vec::with_capacity(2);
    let mut out_feats = Vec::with_capacity(2);
    let mut targets = Vec::with_capacity(2);
    for frame in inputs {
        let x = tape.constant(frame.clone());
        let f = net.encode(tape, &x)?;
        let o = net.decode(tape, &f)?;
        out_feats.push(backbone_on_tape.features(tape, &o)?);
        targets.push(backbone.features(&mut Eager, frame)?);
        encoded.push(f);
        outputs.push(o);
    }
    let bundle = TwoFrameBundle {
        inputs,
        outputs: [outputs[0], outputs[1]],
        encoded: [encoded[0], encoded[1]],
        output_features: [&out_feats[0], &out_feats[1]],
        content_targets: [&targets[0], &targets[1]],
        style_grams: grams,
        flow: &sample.flow,
        mask: &sample.mask,
        flow_features: &sample.flow_ds,
        mask_features: &sample.mask_ds,
        variant,
    };
    total_loss(tape, &bundle, weights)
}

/// Gradient of the two-frame objective for one sample with respect to
/// every network parameter, in manifest order.
pub fn sample_gradients<T: Element>(
    net: &StyleNet<Tensor<T>>,
    backbone: &PerceptualBackbone<Tensor<T>>,
    sample: &FramePairSample<T>,
    grams: &[(&'static str, Tensor<T>)],
    weights: &LossWeights,
    variant: TemporalVariant,
) -> Result<(Vec<Tensor<T>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let bb = backbone.bind(&mut tape);
    let (loss, breakdown) = two_frame_objective(&mut tape, &bound, &bb, backbone, sample, grams, weights, variant)?;
    if let Some(term) = breakdown.non_finite() {
        return Err(Error::NonFinite(format!("{term} loss")));
    }
    tape.backward(loss)?;
    let grads = bound
        .named_params()
        .into_iter()
        .zip(net.named_params())
        .map(|((_, v), (_, p))| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((grads, breakdown))
}

/// Gram targets from a style image resized to the training resolution.
pub fn style_targets<T: Element>(
    backbone: &PerceptualBackbone<Tensor<T>>,
    style: &Tensor<f32>,
    resolution: (usize, usize),
) -> Result<Vec<(&'static str, Tensor<T>)>> {
    let img = resize_image(style, resolution.0, resolution.1)?.cast::<T>();
    let feats = backbone.features(&mut Eager, &img)?;
    style_grams(&feats)
}

pub fn load_backbone(config: &TrainConfig) -> Result<PerceptualBackbone> {
    match config.backbone {
        BackboneProfile::Test => Ok(PerceptualBackbone::test()),
        BackboneProfile::Vgg16 => {
            let path = config
                .backbone_weights
                .as_ref()
                .ok_or_else(|| Error::Config("backbone vgg16 requires backbone_weights".into()))?;
            PerceptualBackbone::from_container(BackboneProfile::Vgg16, &Container::read(path)?)
        }
    }
}

/// Owns the model, optimizer state and data for a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub net: StyleNet,
    pub adam: AdamState,
    pub backbone: PerceptualBackbone,
    pub grams: Vec<(&'static str, Tensor<f32>)>,
    pub dataset: Dataset,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh run: network initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let net = StyleNet::init(config.seed);
        let adam = AdamState::new(
            net.named_params().into_iter().map(|(_, t)| t),
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        Self::with_state(config, net, adam)
    }

    pub fn with_state(config: TrainConfig, net: StyleNet, adam: AdamState) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        if !config.style_image.is_file() {
            return Err(Error::Config(format!("style image {} not found", config.style_image.display())));
        }
        let dataset = load_dataset(&config.dataset, Some(config.resolution))?;
        let backbone = load_backbone(&config)?;
        let style = load_image(&config.style_image)?;
        let grams = style_targets(&backbone, &style, config.resolution)?;
        Ok(Trainer {
            config,
            net,
            adam,
            backbone,
            grams,
            dataset,
            order: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, model: &Path) -> Result<Self> {
        let (net, meta) = crate::net::checkpoint::read_checkpoint(model)?;
        let adam_path = model.with_extension("adam");
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        let params: Vec<&Tensor<f32>> = net.named_params().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::from_container(&Container::read(&adam_path)?, &names, &params)?;
        if adam.step != meta.step {
            return Err(Error::Checkpoint(format!(
                "{} is at step {} but {} is at step {}",
                model.display(),
                meta.step,
                adam_path.display(),
                adam.step
            )));
        }
        Self::with_state(config, net, adam)
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// The augmented sample for a batch slot of the given (0-based) step.
    /// Depends only on the seed, step and slot, so resumed runs see the
    /// same data.
    pub fn sample_for(&mut self, step: u64, slot: usize) -> Result<FramePairSample> {
        let k = step * self.config.batch_size as u64 + slot as u64;
        let n = self.dataset.len() as u64;
        let epoch = k / n;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, self.dataset.epoch_order(self.config.seed, epoch)));
        }
        let idx = self.order.as_ref().unwrap().1[(k % n) as usize];
        let sample = self.dataset.load(idx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_f11b);
        rng.set_stream(k);
        let draw: f64 = rng.random();
        Ok(augment(&sample, draw, self.config.hflip_prob))
    }

    /// Accumulates `batch_size` sample gradients (mean reduction) and
    /// applies one Adam update. Returns the batch-mean breakdown.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let step = self.adam.step;
        let batch = self.config.batch_size;
        let w = self.config.weights;
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        let mut sums = [0.0f64; 5];
        for slot in 0..batch {
            let sample = self.sample_for(step, slot)?;
            let (grads, bd) = sample_gradients(&self.net, &self.backbone, &sample, &self.grams, &w, self.config.variant)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {}", step + 1)),
                    other => other,
                })?;
            for (s, v) in sums.iter_mut().zip([bd.content, bd.style, bd.tv, bd.temporal_feature, bd.temporal_output]) {
                *s += v;
            }
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (x, g) in a.iter_mut().zip(&grads) {
                        x.axpy(1.0, g)?;
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("batch_size >= 1");
        if batch > 1 {
            let inv = 1.0 / batch as f32;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
        }
        let names = self.net.named_params();
        for ((name, _), g) in names.iter().zip(&grads) {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name} at step {}", step + 1)));
            }
        }
        drop(names);
        let n = batch as f64;
        let bd = LossBreakdown::weighted(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, sums[4] / n, &w);
        let lr = self.config.learning_rate;
        adam_step(&mut self.net.params_mut(), &grads, &mut self.adam, lr)?;
        Ok(bd)
    }

    pub fn metadata(&self) -> CheckpointMetadata {
        let mut extra = self.config.pairs();
        extra.retain(|(k, _)| !matches!(k.as_str(), "dataset" | "style_image" | "backbone_weights"));
        CheckpointMetadata {
            step: self.adam.step,
            config_hash: self.config.hash(),
            extra,
        }
    }

    /// Writes `<path>` (model) and `<path>.adam` (optimizer state), the
    /// optimizer first so a model file always has matching state.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        let names: Vec<String> = self.net.named_params().into_iter().map(|(n, _)| n).collect();
        self.adam.to_container(&names).write(&path.with_extension("adam"))?;
        crate::net::checkpoint::write_checkpoint(path, &self.net, &self.metadata())
    }

    /// Trains until `config.steps`, logging every step to `out/loss.csv`
    /// and checkpointing into `out/checkpoints/`.
    pub fn run(&mut self, out: &Path) -> Result<TrainOutcome> {
        let ckpt_dir = out.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let log_path = out.join(LOG_NAME);
        let mut log = LossLog::open(&log_path, self.adam.step)?;
        let mut first = None;
        let mut last = None;
        while self.adam.step < self.config.steps {
            let bd = self.train_step()?;
            let step = self.adam.step;
            log.append(step, &bd)?;
            if step == 1 || step.is_multiple_of(50) || step == self.config.steps {
                log::info!("step {step}/{}: total {:.6e}", self.config.steps, bd.total);
            }
            first.get_or_insert(bd);
            last = Some(bd);
            if self.config.checkpoint_every > 0 && step.is_multiple_of(self.config.checkpoint_every) {
                self.checkpoint(&ckpt_dir.join(format!("step_{step:06}.rcnt")))?;
            }
        }
        let model = out.join(FINAL_MODEL);
        self.checkpoint(&model)?;
        Ok(TrainOutcome {
            steps: self.adam.step,
            first,
            last,
            model,
            log: log_path,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    /// Breakdown of the first step run in this session, if any.
    pub first: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub model: PathBuf,
    pub log: PathBuf,
}

/// Trains from scratch per `config`, writing artifacts under `out`.
pub fn train(config: TrainConfig, out: &Path) -> Result<TrainOutcome> {
    Trainer::new(config)?.run(out)
}

/// Per-step CSV loss log.
pub struct LossLog {
    file: std::fs::File,
    path: PathBuf,
}

impl LossLog {
    /// Opens the log for appending after `resume_step`. Rows past that step
    /// (from an interrupted run) are dropped; a fresh run starts a new file.
    pub fn open(path: &Path, resume_step: u64) -> Result<Self> {
        let mut text = format!("{LOG_HEADER}\n");
        if resume_step > 0 {
            if let Ok(existing) = std::fs::read_to_string(path) {
                for line in existing.lines().skip(1) {
                    let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s <= resume_step) {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
        }
        write_atomic(path, text.as_bytes())?;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        let line = format!(
            "{step},{},{},{},{},{},{}\n",
            b.content, b.style, b.tv, b.temporal_feature, b.temporal_output, b.total
        );
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a loss log back into `(step, breakdown)` rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, LossBreakdown)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::invalid("read_loss_log", format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::invalid("read_loss_log", format!("bad row `{line}`")));
            }
            let n = |i: usize| -> Result<f64> { parse_num("loss log", f[i]) };
            Ok((
                parse_num("loss log", f[0])?,
                LossBreakdown {
                    content: n(1)?,
                    style: n(2)?,
                    tv: n(3)?,
                    temporal_feature: n(4)?,
                    temporal_output: n(5)?,
                    total: n(6)?,
                },
            ))
        })
        .collect()
}
