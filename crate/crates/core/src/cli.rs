//! Command-line front end. Exit codes: 0 success, 1 usage or input error,
//! 2 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{
    e_stab, fps_benchmark, load_sequence, temporal_error_maps, warp_error_histogram, ColorSpace, ErrorMaps,
    DEFAULT_BINS, DEFAULT_ERR_SCALE,
};
use crate::flow::{downscale_flow, load_flo, load_mask, occlusion_mask_with, save_flo, save_mask, ConsistencyParams, OcclusionMask};
use crate::image_io::{frame_name, list_frames, load_image, save_gray, save_image};
use crate::net::checkpoint::read_checkpoint;
use crate::net::FEATURE_FACTOR;
use crate::synthetic::write_fixture;
use crate::train::{parse_resolution, TrainConfig, Trainer};

pub const MANIFEST_FILE: &str = "run-manifest.txt";
pub const THREADS_ENV: &str = "RECONET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "reconet", version, about = "Temporally coherent video style transfer")]
pub struct Cli {
    /// Output directory for every artifact and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Stylize numbered frames with a trained checkpoint.
    Stylize(StylizeArgs),
    /// Temporal stability metrics, histograms and error maps.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Flow file inspection, occlusion masks and downscaling.
    #[command(subcommand)]
    Flow(FlowCommand),
    /// Per-frame inference latency.
    Bench(BenchArgs),
    /// Write a synthetic translating-texture dataset and style image.
    Fixture(FixtureArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from a checkpoint (its `.adam` sibling must exist).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Temporal error of a sequence.
    Estab(SeqArgs),
    /// Histogram of warping errors.
    Hist(HistArgs),
    /// Total and luminance-wise error maps of stylized frames.
    Maps(MapsArgs),
}

#[derive(Args, Debug)]
pub struct SeqArgs {
    /// Directory of `frame_NNNN.png` files.
    #[arg(long)]
    pub frames: PathBuf,
    /// Scene directory holding `flow/`, `flow_bwd/` and `mask/`;
    /// defaults to the frames directory.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HistArgs {
    #[command(flatten)]
    pub seq: SeqArgs,
    #[arg(long, default_value = "rgb")]
    pub colorspace: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct MapsArgs {
    /// Stylized frames.
    #[arg(long)]
    pub outputs: PathBuf,
    /// Input frames.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Flows and masks; defaults to the inputs directory.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ERR_SCALE)]
    pub err_scale: f64,
}

#[derive(Subcommand, Debug)]
pub enum FlowCommand {
    /// Print dimensions and magnitude range.
    Info { file: PathBuf },
    /// Mask from a forward (t-1 → t) and backward (t → t-1) flow pair.
    Occlusion {
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        backward: PathBuf,
        #[arg(long)]
        motion_boundaries: bool,
    },
    /// Shrink a flow and mask to feature resolution.
    Downscale {
        #[arg(long)]
        flow: PathBuf,
        /// Defaults to all traceable.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = FEATURE_FACTOR)]
        factor: usize,
    },
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "640x360")]
    pub resolution: String,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure of a command, with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::NonFinite(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<Vec<(String, String)>, Failure>;

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut manifest = vec![
        kv("program", "reconet"),
        kv("version", env!("CARGO_PKG_VERSION")),
        kv(
            "args",
            args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" "),
        ),
        kv("out", cli.out.display()),
    ];
    let result = create_dir(&cli.out).map_err(Failure::from).and_then(|_| dispatch(&cli));
    let code = match result {
        Ok(entries) => {
            manifest.push(kv("status", "ok"));
            manifest.extend(entries);
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            manifest.push(kv("status", "error"));
            manifest.push(kv("error", f.message.replace('\n', " ")));
            f.code
        }
    };
    manifest.push(kv("exit_code", code));
    let text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    if let Err(e) = write_text(&cli.out.join(MANIFEST_FILE), &text) {
        eprintln!("error: cannot write run manifest: {e}");
        return if code == 0 { 1 } else { code };
    }
    code
}

fn dispatch(cli: &Cli) -> CmdResult {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Stylize(a) => cmd_stylize(a, out),
        Command::Eval(EvalCommand::Estab(a)) => cmd_estab(a, out),
        Command::Eval(EvalCommand::Hist(a)) => cmd_hist(a, out),
        Command::Eval(EvalCommand::Maps(a)) => cmd_maps(a, out),
        Command::Flow(f) => cmd_flow(f, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Fixture(a) => cmd_fixture(a, out),
    }
}

pub fn cmd_train(a: &TrainArgs, out: &Path) -> CmdResult {
    let mut config = TrainConfig::load(&a.config)?;
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| fail(format!("--set expects KEY=VALUE, got `{s}`")))?;
        config.set(k, v, None)?;
    }
    if let Some(steps) = a.steps {
        config.steps = steps;
    }
    config.validate()?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(config.clone(), ckpt)?,
        None => Trainer::new(config.clone())?,
    };
    let start = trainer.step();
    let outcome = trainer.run(out)?;
    let mut entries: Vec<(String, String)> = vec![kv("command", "train"), kv("config_file", a.config.display())];
    entries.extend(config.pairs().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    entries.extend([
        kv("config_hash", config.hash()),
        kv("start_step", start),
        kv("final_step", outcome.steps),
        kv("model", outcome.model.display()),
        kv("loss_log", outcome.log.display()),
    ]);
    if let Some(last) = outcome.last {
        entries.push(kv("final_total", last.total));
    }
    Ok(entries)
}

fn worker_count() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => hw,
    }
}

pub fn cmd_stylize(a: &StylizeArgs, out: &Path) -> CmdResult {
    let (net, meta) = read_checkpoint(&a.checkpoint)?;
    let frames = list_frames(&a.frames)?;
    if frames.is_empty() {
        return Err(fail(format!("no frame_NNNN.png files in {}", a.frames.display())));
    }
    let workers = worker_count().min(frames.len());
    let next = AtomicUsize::new(0);
    let skipped = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((n, path)) = frames.get(i) else { break };
                let result = load_image(path)
                    .and_then(|img| net.stylize(&img))
                    .and_then(|o| save_image(&out.join(frame_name(*n)), &o));
                if let Err(e) = result {
                    log::warn!("skipping {}: {e}", path.display());
                    eprintln!("warning: skipping {}: {e}", path.display());
                    skipped.lock().unwrap().push(path.display().to_string());
                }
            });
        }
    });
    let skipped = skipped.into_inner().unwrap();
    if !skipped.is_empty() {
        return Err(fail(format!("{} of {} frames skipped: {}", skipped.len(), frames.len(), skipped.join(", "))));
    }
    Ok(vec![
        kv("command", "stylize"),
        kv("checkpoint", a.checkpoint.display()),
        kv("checkpoint_step", meta.step),
        kv("checkpoint_config_hash", meta.config_hash),
        kv("frames", frames.len()),
        kv("workers", workers),
    ])
}

fn seq_dirs(a: &SeqArgs) -> (&Path, &Path) {
    (a.frames.as_path(), a.scene.as_deref().unwrap_or(&a.frames))
}

pub fn cmd_estab(a: &SeqArgs, out: &Path) -> CmdResult {
    let (frames, scene) = seq_dirs(a);
    let seq = load_sequence(frames, scene)?;
    let v = e_stab(&seq)?;
    println!("{v:.6}");
    let report = format!("metric=e_stab\nvalue={v}\nframes={}\ntransitions={}\n", seq.frames.len(), seq.frames.len() - 1);
    write_text(&out.join("estab.txt"), &report)?;
    Ok(vec![
        kv("command", "eval estab"),
        kv("frames_dir", frames.display()),
        kv("scene_dir", scene.display()),
        kv("e_stab", v),
    ])
}

pub fn cmd_hist(a: &HistArgs, out: &Path) -> CmdResult {
    let (frames, scene) = seq_dirs(&a.seq);
    let cs = ColorSpace::parse(&a.colorspace)?;
    let seq = load_sequence(frames, scene)?;
    let report = warp_error_histogram(&seq, cs, a.bins, 0.0, 1.0)?;
    let tag = cs.tag().to_ascii_lowercase();
    write_text(&out.join(format!("hist_{tag}.csv")), &report.to_csv())?;
    write_text(&out.join(format!("hist_{tag}.txt")), &report.summary())?;
    print!("{}", report.summary());
    Ok(vec![
        kv("command", "eval hist"),
        kv("colorspace", cs.tag()),
        kv("bins", a.bins),
        kv("samples", report.samples),
    ])
}

pub fn cmd_maps(a: &MapsArgs, out: &Path) -> CmdResult {
    let scene = a.scene.as_deref().unwrap_or(&a.inputs);
    let outputs = load_sequence(&a.outputs, scene)?;
    let inputs = load_sequence(&a.inputs, scene)?;
    if outputs.frames.len() != inputs.frames.len() {
        return Err(fail(format!(
            "sequence length mismatch: {} output frames, {} input frames",
            outputs.frames.len(),
            inputs.frames.len()
        )));
    }
    if !(a.err_scale > 0.0) {
        return Err(fail("--err-scale must be positive"));
    }
    let numbers: Vec<u32> = list_frames(&a.inputs)?.into_iter().map(|(n, _)| n).collect();
    let maps = temporal_error_maps(&outputs, &inputs)?;
    for (m, n) in maps.iter().zip(&numbers[1..]) {
        for (kind, values) in [("total", &m.total), ("lum", &m.luminance)] {
            let name = format!("{kind}_{}_scale{}.png", frame_name(*n).trim_end_matches(".png"), a.err_scale);
            save_gray(&out.join(name), m.width, m.height, ErrorMaps::encode(values, a.err_scale))?;
        }
    }
    Ok(vec![
        kv("command", "eval maps"),
        kv("err_scale", a.err_scale),
        kv("maps", 2 * maps.len()),
    ])
}

pub fn cmd_flow(f: &FlowCommand, out: &Path) -> CmdResult {
    match f {
        FlowCommand::Info { file } => {
            let flow = load_flo(file)?;
            let (lo, hi) = flow.magnitude_range();
            println!("{}x{}", flow.width(), flow.height());
            println!("magnitude min={lo} max={hi}");
            Ok(vec![
                kv("command", "flow info"),
                kv("file", file.display()),
                kv("width", flow.width()),
                kv("height", flow.height()),
                kv("magnitude_min", lo),
                kv("magnitude_max", hi),
            ])
        }
        FlowCommand::Occlusion {
            forward,
            backward,
            motion_boundaries,
        } => {
            let params = ConsistencyParams {
                motion_boundaries: *motion_boundaries,
                ..Default::default()
            };
            let mask = occlusion_mask_with(&load_flo(forward)?, &load_flo(backward)?, &params)?;
            let path = out.join("mask.png");
            save_mask(&path, &mask)?;
            let n = mask.width() * mask.height();
            println!("traceable {}/{n}", mask.traceable_count());
            Ok(vec![
                kv("command", "flow occlusion"),
                kv("forward", forward.display()),
                kv("backward", backward.display()),
                kv("motion_boundaries", motion_boundaries),
                kv("alpha1", params.alpha1),
                kv("alpha2", params.alpha2),
                kv("traceable", mask.traceable_count()),
                kv("mask", path.display()),
            ])
        }
        FlowCommand::Downscale { flow, mask, factor } => {
            let fl = load_flo(flow)?;
            let m = match mask {
                Some(p) => load_mask(p)?,
                None => OcclusionMask::ones(fl.width(), fl.height()),
            };
            let (f2, m2) = downscale_flow(&fl, &m, *factor)?;
            save_flo(out.join("flow_ds.flo"), &f2)?;
            save_mask(out.join("mask_ds.png"), &m2)?;
            println!("{}x{}", f2.width(), f2.height());
            Ok(vec![
                kv("command", "flow downscale"),
                kv("factor", factor),
                kv("width", f2.width()),
                kv("height", f2.height()),
            ])
        }
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &Path) -> CmdResult {
    let (w, h) = parse_resolution(&a.resolution)?;
    let (net, _) = read_checkpoint(&a.checkpoint)?;
    let report = fps_benchmark(&net, w, h, a.warmup, a.iters)?;
    let text = report.to_text();
    print!("{text}");
    write_text(&out.join("bench.txt"), &text)?;
    Ok(vec![
        kv("command", "bench"),
        kv("checkpoint", a.checkpoint.display()),
        kv("resolution", format!("{w}x{h}")),
        kv("iters", a.iters),
        kv("warmup", a.warmup),
    ])
}

pub fn cmd_fixture(a: &FixtureArgs, out: &Path) -> CmdResult {
    write_fixture(out, a.size, a.frames, a.scenes, a.seed)?;
    Ok(vec![
        kv("command", "fixture"),
        kv("scenes", a.scenes),
        kv("frames", a.frames),
        kv("size", a.size),
    ])
}
