use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reconet::flow::{load_mask, save_flo, FlowField};
use reconet::image_io::{list_frames, save_image};
use reconet::tensor::Tensor;

fn reconet(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reconet"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn reconet")
}

fn manifest(out: &Path) -> String {
    std::fs::read_to_string(out.join("run-manifest.txt")).expect("run-manifest written")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Fixture with `frames` frames per scene, returning (root, config, scene_01).
fn fixture(root: &Path, size: usize, frames: usize) -> (PathBuf, PathBuf) {
    let o = reconet(
        root,
        &["fixture", "--size", &size.to_string(), "--frames", &frames.to_string(), "--scenes", "1"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    (root.join("train.cfg"), root.join("data/scene_01"))
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(reconet(&out, &["train", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(reconet(&out, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(reconet(&out, &["--help"]).status.code(), Some(0));
}

#[test]
fn flow_info_and_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("one.flo");
    save_flo(&f, &FlowField::constant(1, 1, 3.0, 4.0)).unwrap();
    let out = dir.path().join("info");
    let o = reconet(&out, &["flow", "info", p(&f)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("1x1"));
    assert!(text.contains("max=5"), "{text}");
    let m = manifest(&out);
    assert!(m.contains("status=ok") && m.contains("width=1") && m.contains("exit_code=0"), "{m}");

    let bad = dir.path().join("bad.flo");
    std::fs::write(&bad, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let out = dir.path().join("bad");
    let o = reconet(&out, &["flow", "info", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let m = manifest(&out);
    assert!(m.contains("status=error") && m.contains("exit_code=1"), "{m}");
}

#[test]
fn occlusion_on_consistent_translation_is_all_traceable() {
    let dir = tempfile::tempdir().unwrap();
    let (_, scene) = fixture(dir.path(), 16, 2);
    let out = dir.path().join("occ");
    let fwd = scene.join("flow/frame_0002.flo");
    let bwd = scene.join("flow_bwd/frame_0002.flo");
    let o = reconet(&out, &["flow", "occlusion", "--forward", p(&fwd), "--backward", p(&bwd)]);
    assert_eq!(o.status.code(), Some(0));
    let mask = load_mask(out.join("mask.png")).unwrap();
    assert_eq!(mask.traceable_count(), 16 * 16);
    let img = image::open(out.join("mask.png")).unwrap().to_luma8();
    assert!(img.pixels().all(|px| px.0[0] == 255));
}

#[test]
fn downscale_by_four() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("big.flo");
    save_flo(&f, &FlowField::constant(640, 360, 4.0, -8.0)).unwrap();
    let out = dir.path().join("ds");
    let o = reconet(&out, &["flow", "downscale", "--flow", p(&f)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "160x90");
    let small = reconet::flow::load_flo(out.join("flow_ds.flo")).unwrap();
    assert_eq!((small.width(), small.height()), (160, 90));
    assert_eq!(small.get(7, 5), (1.0, -2.0));
}

#[test]
fn estab_on_static_scene_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("static");
    for sub in ["flow_bwd", "mask"] {
        std::fs::create_dir_all(scene.join(sub)).unwrap();
    }
    let frame = Tensor::from_fn([3, 8, 8], |i| (i % 7) as f32 / 6.0);
    save_image(&scene.join("frame_0001.png"), &frame).unwrap();
    save_image(&scene.join("frame_0002.png"), &frame).unwrap();
    save_flo(scene.join("flow_bwd/frame_0002.flo"), &FlowField::zeros(8, 8)).unwrap();
    reconet::flow::save_mask(scene.join("mask/frame_0002.png"), &reconet::flow::OcclusionMask::ones(8, 8)).unwrap();
    let out = dir.path().join("estab");
    let o = reconet(&out, &["eval", "estab", "--frames", p(&scene)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "0.000000");
    assert!(manifest(&out).contains("e_stab=0"));
}

#[test]
fn train_stylize_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, scene) = fixture(dir.path(), 16, 4);

    let run = dir.path().join("run");
    let o = reconet(&run, &["train", "--config", p(&cfg), "--steps", "1", "--set", "lambda_o=0"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    let m = manifest(&run);
    assert!(m.contains("config.lambda_o=0\n"), "{m}");
    assert!(m.contains("final_step=1"));
    let model = run.join("model.rcnt");

    // Two identical inputs must stylize to identical outputs.
    let frames = dir.path().join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    for n in [1, 2, 10] {
        let src = if n == 10 { 1 } else { n };
        std::fs::copy(scene.join(format!("frame_{src:04}.png")), frames.join(format!("frame_{n:04}.png"))).unwrap();
    }
    let styl = dir.path().join("styl");
    let o = reconet(&styl, &["stylize", "--checkpoint", p(&model), "--frames", p(&frames)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<u32> = list_frames(&styl).unwrap().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec![1, 2, 10]);
    assert_eq!(
        std::fs::read(styl.join("frame_0001.png")).unwrap(),
        std::fs::read(styl.join("frame_0010.png")).unwrap()
    );

    let inputs = dir.path().join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    for n in 1..=4 {
        let name = format!("frame_{n:04}.png");
        std::fs::copy(scene.join(&name), inputs.join(&name)).unwrap();
    }
    let outs = dir.path().join("outs");
    let o = reconet(&outs, &["stylize", "--checkpoint", p(&model), "--frames", p(&inputs)]);
    assert_eq!(o.status.code(), Some(0));
    let maps = dir.path().join("maps");
    let o = reconet(
        &maps,
        &["eval", "maps", "--outputs", p(&outs), "--inputs", p(&inputs), "--scene", p(&scene)],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let pngs = std::fs::read_dir(&maps)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 2 * 3);

    let hist = dir.path().join("hist");
    let o = reconet(&hist, &["eval", "hist", "--frames", p(&outs), "--scene", p(&scene), "--colorspace", "xyz"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("colorspace=XYZ"), "{}", stdout(&o));
    assert!(hist.join("hist_xyz.csv").is_file());

    // Mismatched lengths name both counts.
    std::fs::remove_file(outs.join("frame_0004.png")).unwrap();
    let bad = dir.path().join("maps_bad");
    let o = reconet(
        &bad,
        &["eval", "maps", "--outputs", p(&outs), "--inputs", p(&inputs), "--scene", p(&scene)],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('3') && err.contains('4'), "{err}");
    assert!(manifest(&bad).contains("status=error"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = fixture(dir.path(), 16, 2);

    let out = dir.path().join("unknown");
    let o = reconet(&out, &["train", "--config", p(&cfg), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(manifest(&out).contains("status=error"));

    std::fs::remove_file(dir.path().join("style.png")).unwrap();
    let out = dir.path().join("nostyle");
    let o = reconet(&out, &["train", "--config", p(&cfg), "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("style.png"));
    assert!(manifest(&out).contains("exit_code=1"));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = fixture(dir.path(), 16, 2);
    let out = dir.path().join("nan");
    let o = reconet(&out, &["train", "--config", p(&cfg), "--steps", "1", "--set", "lambda_f=1e39"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(manifest(&out).contains("exit_code=2"));
}
