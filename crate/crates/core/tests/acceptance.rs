//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use common::*;
use rand::Rng;
use reconet::eval::{e_stab, SceneSequence};
use reconet::flow::{occlusion_mask, read_flo, warp, write_flo, FlowField, OcclusionMask};
use reconet::losses::{
    content_loss, feature_temporal_loss, output_temporal_loss, relative_luminance, rgb_to_xyz, style_loss, tv_loss,
    LossWeights, TemporalVariant,
};
use reconet::net::{
    load_checkpoint, manifest, save_checkpoint, BackboneProfile, CheckpointMetadata, Features, PerceptualBackbone,
    StyleNet,
};
use reconet::net::backbone::TEST_BACKBONE_SEED;
use reconet::synthetic::{sequence, write_fixture, FixtureSpec};
use reconet::tensor::gradcheck::{finite_diff_check_with, relative_error, GradCheckOptions};
use reconet::tensor::kernels::Padding;
use reconet::tensor::{Eager, Tape, Tensor, Var};
use reconet::train::dataset::FramePairSample;
use reconet::train::{sample_gradients, style_targets, two_frame_objective, TrainConfig, Trainer};

/// Criteria run one at a time so timed ones do not share the CPU.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes to stderr directly so the line shows even when output is captured.
fn report(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("[acceptance] {id:02} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

type Objective = Box<dyn Fn(&mut Tape<f64>, Var) -> reconet::Result<Var>>;

/// `sum(y * R)` for a fixed, non-symmetric weighting `R`.
fn project(t: &mut Tape<f64>, y: Var) -> reconet::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let r = t.constant(Tensor::from_fn(shape, |i| (1.3 * i as f64 + 0.7).sin() + 0.2));
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn single_op_cases() -> Vec<(String, Tensor<f64>, Objective)> {
    let mut r = rng(101);
    let mut cases: Vec<(String, Tensor<f64>, Objective)> = Vec::new();

    for (padding, stride, k, cin, cout) in [
        (Padding::Reflect, 1, 3, 3, 4),
        (Padding::Reflect, 2, 3, 3, 4),
        (Padding::Zero, 1, 3, 3, 4),
        (Padding::Zero, 2, 3, 3, 4),
        (Padding::Reflect, 1, 5, 2, 6),
        (Padding::Reflect, 1, 3, 5, 6),
        (Padding::Zero, 1, 3, 5, 6),
        (Padding::Reflect, 2, 3, 5, 6),
    ] {
        let x: Tensor<f64> = uniform(&[cin, 7, 6], &mut r, -1.0, 1.0);
        let w: Tensor<f64> = uniform(&[cout, cin, k, k], &mut r, -0.5, 0.5);
        let b: Tensor<f64> = uniform(&[cout], &mut r, -0.5, 0.5);
        let tag = format!("conv2d {padding:?} s{stride} k{k} {cin}->{cout}");
        let (w1, b1) = (w.clone(), b.clone());
        cases.push((
            format!("{tag} d/input"),
            x.clone(),
            Box::new(move |t, v| {
                let (wv, bv) = (t.constant(w1.clone()), t.constant(b1.clone()));
                let y = t.conv2d(v, wv, bv, stride, padding)?;
                project(t, y)
            }),
        ));
        let (x2, b2) = (x.clone(), b.clone());
        cases.push((
            format!("{tag} d/weight"),
            w.clone(),
            Box::new(move |t, v| {
                let (xv, bv) = (t.constant(x2.clone()), t.constant(b2.clone()));
                let y = t.conv2d(xv, v, bv, stride, padding)?;
                project(t, y)
            }),
        ));
        let (x3, w3) = (x.clone(), w.clone());
        cases.push((
            format!("{tag} d/bias"),
            b,
            Box::new(move |t, v| {
                let (xv, wv) = (t.constant(x3.clone()), t.constant(w3.clone()));
                let y = t.conv2d(xv, wv, v, stride, padding)?;
                project(t, y)
            }),
        ));
    }

    let x: Tensor<f64> = uniform(&[3, 5, 4], &mut r, -1.0, 2.0);
    let scale: Tensor<f64> = uniform(&[3], &mut r, 0.5, 1.5);
    let shift: Tensor<f64> = uniform(&[3], &mut r, -0.5, 0.5);
    let eps = 1e-5;
    {
        let (s, b) = (scale.clone(), shift.clone());
        cases.push((
            "instance_norm d/input".into(),
            x.clone(),
            Box::new(move |t, v| {
                let (sv, bv) = (t.constant(s.clone()), t.constant(b.clone()));
                let y = t.instance_norm(v, sv, bv, eps)?;
                project(t, y)
            }),
        ));
        let (xx, b) = (x.clone(), shift.clone());
        cases.push((
            "instance_norm d/scale".into(),
            scale.clone(),
            Box::new(move |t, v| {
                let (xv, bv) = (t.constant(xx.clone()), t.constant(b.clone()));
                let y = t.instance_norm(xv, v, bv, eps)?;
                project(t, y)
            }),
        ));
        let (xx, s) = (x.clone(), scale.clone());
        cases.push((
            "instance_norm d/shift".into(),
            shift.clone(),
            Box::new(move |t, v| {
                let (xv, sv) = (t.constant(xx.clone()), t.constant(s.clone()));
                let y = t.instance_norm(xv, sv, v, eps)?;
                project(t, y)
            }),
        ));
    }

    cases.push((
        "relu".into(),
        away_from_zero(&[2, 4, 5], &mut r, 0.05),
        Box::new(|t, v| {
            let y = t.relu(v);
            project(t, y)
        }),
    ));
    cases.push((
        "tanh".into(),
        uniform(&[2, 4, 5], &mut r, -2.0, 2.0),
        Box::new(|t, v| {
            let y = t.tanh(v);
            project(t, y)
        }),
    ));
    cases.push((
        "upsample2x".into(),
        uniform(&[2, 3, 4], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.upsample2x(v)?;
            project(t, y)
        }),
    ));
    // Distinct values spaced 0.01 apart keep every pooling window's argmax
    // stable under the probe step.
    let n = 2 * 4 * 6;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    cases.push((
        "max_pool2x2".into(),
        Tensor::from_fn([2, 4, 6], |i| perm[i] as f64 * 0.01 - 0.2),
        Box::new(|t, v| {
            let y = t.max_pool2x2(v)?;
            project(t, y)
        }),
    ));
    let other: Tensor<f64> = uniform(&[2, 3, 4], &mut r, -1.0, 1.0);
    for (name, which) in [("add", 0), ("sub d/a", 1), ("sub d/b", 2), ("mul d/a", 3), ("mul d/b", 4)] {
        let o = other.clone();
        cases.push((
            name.into(),
            uniform(&[2, 3, 4], &mut r, -1.0, 1.0),
            Box::new(move |t, v| {
                let c = t.constant(o.clone());
                let y = match which {
                    0 => t.add(v, c)?,
                    1 => t.sub(v, c)?,
                    2 => t.sub(c, v)?,
                    3 => t.mul(v, c)?,
                    _ => t.mul(c, v)?,
                };
                project(t, y)
            }),
        ));
    }
    cases.push((
        "affine".into(),
        uniform(&[2, 3, 4], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.affine(v, -1.7, 0.3);
            project(t, y)
        }),
    ));
    cases.push((
        "mul_scalar".into(),
        uniform(&[2, 3, 4], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.mul_scalar(v, 2.5);
            project(t, y)
        }),
    ));
    cases.push((
        "channel_affine".into(),
        uniform(&[3, 3, 4], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.channel_affine(v, &[0.5, -2.0, 1.5], &[0.1, 0.2, -0.3])?;
            project(t, y)
        }),
    ));
    cases.push((
        "square".into(),
        uniform(&[2, 3, 4], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.square(v);
            project(t, y)
        }),
    ));
    cases.push(("sum".into(), uniform(&[2, 3, 4], &mut r, -1.0, 1.0), Box::new(|t, v| Ok(t.sum(v)))));
    cases.push(("mean".into(), uniform(&[2, 3, 4], &mut r, -1.0, 1.0), Box::new(|t, v| Ok(t.mean(v)))));
    let mask = Tensor::from_fn([3, 4], |i| ((i * 7) % 3 != 0) as u8 as f64);
    let m1 = mask.clone();
    cases.push((
        "masked_sum".into(),
        uniform(&[2, 3, 4], &mut r, -1.0, 1.0),
        Box::new(move |t, v| {
            let s = t.square(v);
            t.masked_sum(s, &m1)
        }),
    ));
    cases.push((
        "masked_mean".into(),
        uniform(&[2, 3, 4], &mut r, -1.0, 1.0),
        Box::new(move |t, v| {
            let s = t.square(v);
            t.masked_mean(s, &mask)
        }),
    ));
    cases.push((
        "channel_mix".into(),
        uniform(&[3, 3, 4], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.channel_mix(v, vec![vec![0.4, 0.3, 0.2], vec![0.2, 0.7, 0.1], vec![0.0, 0.1, 0.9]])?;
            project(t, y)
        }),
    ));
    cases.push((
        "gram".into(),
        uniform(&[3, 4, 5], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.gram(v)?;
            project(t, y)
        }),
    ));
    for axis in 0..3 {
        cases.push((
            format!("narrow axis {axis}"),
            uniform(&[3, 4, 5], &mut r, -1.0, 1.0),
            Box::new(move |t, v| {
                let y = t.narrow(v, axis, 1, 2)?;
                project(t, y)
            }),
        ));
    }
    cases.push((
        "reshape".into(),
        uniform(&[3, 4, 5], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = t.reshape(v, [12, 5])?;
            project(t, y)
        }),
    ));
    let flow = random_flow(6, 5, &mut r, 2.5);
    let table = Arc::new(flow.sample_table::<f64>());
    cases.push((
        "bilinear_sample".into(),
        uniform(&[2, 5, 6], &mut r, -1.0, 1.0),
        Box::new(move |t, v| {
            let y = t.sample(v, table.clone())?;
            project(t, y)
        }),
    ));

    // Loss terms, each differentiated with respect to its declared inputs.
    cases.push((
        "relative_luminance".into(),
        uniform(&[3, 4, 5], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = relative_luminance(t, v)?;
            project(t, y)
        }),
    ));
    cases.push((
        "rgb_to_xyz".into(),
        uniform(&[3, 4, 5], &mut r, -1.0, 1.0),
        Box::new(|t, v| {
            let y = rgb_to_xyz(t, v)?;
            project(t, y)
        }),
    ));
    let (w, h) = (6, 5);
    let i_prev: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
    let i_cur: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
    let other_out: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
    let flow = random_flow(w, h, &mut r, 1.5);
    let omask = random_mask(w, h, &mut r, 0.7);
    for variant in [TemporalVariant::RgbLum, TemporalVariant::XyzLum, TemporalVariant::None] {
        for wrt_prev in [true, false] {
            let (ip, ic, o, f, m) = (i_prev.clone(), i_cur.clone(), other_out.clone(), flow.clone(), omask.clone());
            cases.push((
                format!("output_temporal_loss {} d/{}", variant.name(), if wrt_prev { "prev" } else { "cur" }),
                uniform(&[3, h, w], &mut r, 0.0, 1.0),
                Box::new(move |t, v| {
                    let c = t.constant(o.clone());
                    let (p, q) = if wrt_prev { (v, c) } else { (c, v) };
                    output_temporal_loss(t, p, q, &ip, &ic, &f, &m, variant)
                }),
            ));
        }
    }
    let other_feat: Tensor<f64> = uniform(&[4, h, w], &mut r, -1.0, 1.0);
    for wrt_prev in [true, false] {
        let (o, f, m) = (other_feat.clone(), flow.clone(), omask.clone());
        cases.push((
            format!("feature_temporal_loss d/{}", if wrt_prev { "prev" } else { "cur" }),
            uniform(&[4, h, w], &mut r, -1.0, 1.0),
            Box::new(move |t, v| {
                let c = t.constant(o.clone());
                let (p, q) = if wrt_prev { (v, c) } else { (c, v) };
                feature_temporal_loss(t, p, q, &f, &m)
            }),
        ));
    }
    let shapes = [[2usize, 8, 8], [3, 4, 4], [4, 2, 2], [5, 1, 1]];
    let names = reconet::net::backbone::STYLE_TAPS;
    let targets: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(s, &mut r, 0.0, 1.0)).collect();
    let target_feats = Features {
        taps: names.iter().copied().zip(targets.iter().cloned()).collect(),
    };
    let grams: Vec<(&'static str, Tensor<f64>)> = names
        .iter()
        .zip(&targets)
        .map(|(n, f)| {
            let mut t = Tape::new();
            let v = t.constant(f.clone());
            let g = t.gram(v).unwrap();
            (*n, t.value(g).clone())
        })
        .collect();
    // Offsets into one flat parameter vector holding all four tap maps.
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let split = move |t: &mut Tape<f64>, v: Var| -> reconet::Result<Features<Var>> {
        let mut taps = Vec::new();
        let mut off = 0;
        for ((n, s), len) in names.iter().zip(&shapes).zip(&sizes) {
            let part = t.narrow(v, 0, off, *len)?;
            taps.push((*n, t.reshape(part, s.to_vec())?));
            off += len;
        }
        Ok(Features { taps })
    };
    let split2 = split.clone();
    cases.push((
        "content_loss".into(),
        uniform(&[total], &mut r, 0.0, 1.0),
        Box::new(move |t, v| {
            let f = split(t, v)?;
            content_loss(t, &f, &target_feats)
        }),
    ));
    cases.push((
        "style_loss".into(),
        uniform(&[total], &mut r, 0.0, 1.0),
        Box::new(move |t, v| {
            let f = split2(t, v)?;
            style_loss(t, &f, &grams)
        }),
    ));
    cases.push(("tv_loss".into(), uniform(&[3, 5, 6], &mut r, 0.0, 1.0), Box::new(tv_loss)));
    cases
}

struct Micro {
    net: StyleNet<Tensor<f64>>,
    backbone: PerceptualBackbone<Tensor<f64>>,
    sample: FramePairSample<f64>,
    grams: Vec<(&'static str, Tensor<f64>)>,
    weights: LossWeights,
}

impl Micro {
    fn new() -> Self {
        let mut r = rng(7);
        let (w, h) = (16, 16);
        let prev: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
        let flow = FlowField::from_fn(w, h, |x, y| (0.6 + 0.05 * x as f32, -0.35 + 0.03 * y as f32)).unwrap();
        let mut cur = warp(&prev, &flow).unwrap();
        for v in cur.data_mut() {
            *v = (*v + r.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
        let mask = random_mask(w, h, &mut r, 0.85);
        let backbone = PerceptualBackbone::<Tensor<f64>>::random(BackboneProfile::Test, TEST_BACKBONE_SEED);
        let style = reconet::synthetic::style_image(w, h);
        let grams = style_targets(&backbone, &style, (w, h)).unwrap();
        Micro {
            net: StyleNet::<Tensor<f32>>::init(11).cast::<f64>(),
            backbone,
            sample: FramePairSample::new(prev, cur, flow, mask).unwrap(),
            grams,
            weights: LossWeights::default(),
        }
    }

    fn loss(&self, net: &StyleNet<Tensor<f64>>) -> f64 {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let bb = self.backbone.bind(&mut tape);
        let (loss, _) = two_frame_objective(
            &mut tape,
            &bound,
            &bb,
            &self.backbone,
            &self.sample,
            &self.grams,
            &self.weights,
            TemporalVariant::RgbLum,
        )
        .unwrap();
        tape.value(loss).item()
    }
}

#[test]
fn criterion_01_gradient_suite() {
    let _serial = serial();
    let start = Instant::now();
    let mut worst_single = (0.0f64, String::new());
    for (name, x, f) in single_op_cases() {
        let rep = finite_diff_check_with(&f, &x, &GradCheckOptions::new(1e-6)).unwrap();
        println!("  {name}: max rel err {:.2e}", rep.max_rel_error);
        if rep.max_rel_error >= worst_single.0 {
            worst_single = (rep.max_rel_error, name);
        }
    }

    // Composite: sampled coordinates of every parameter tensor.
    let micro = Micro::new();
    let (grads, _) = sample_gradients(
        &micro.net,
        &micro.backbone,
        &micro.sample,
        &micro.grams,
        &micro.weights,
        TemporalVariant::RgbLum,
    )
    .unwrap();
    let scale = grads.iter().map(|g| g.max_abs()).fold(0.0, f64::max);
    let base = micro.loss(&micro.net);
    println!("  composite loss {base:.6e}, largest gradient {scale:.3e}");
    // Pre-norm conv biases have an exactly zero gradient; their central
    // differences are pure roundoff (about 1e-9 of the largest gradient),
    // so relative errors are taken against at least 1e-5 of that scale.
    let floor = 1e-5 * scale;
    let h = 1e-6;
    let mut r = rng(3);
    let names: Vec<String> = micro.net.named_params().into_iter().map(|(n, _)| n).collect();
    let mut worst_comp = (0.0f64, String::new());
    let mut probes = 0;
    for (pi, name) in names.iter().enumerate() {
        let numel = grads[pi].numel();
        let picks: Vec<usize> = (0..3.min(numel)).map(|_| r.random_range(0..numel)).collect();
        for i in picks {
            let mut plus = micro.net.clone();
            plus.params_mut()[pi].data_mut()[i] += h;
            let mut minus = micro.net.clone();
            minus.params_mut()[pi].data_mut()[i] -= h;
            let numeric = (micro.loss(&plus) - micro.loss(&minus)) / (2.0 * h);
            let err = relative_error(grads[pi].data()[i], numeric, floor);
            probes += 1;
            if err >= worst_comp.0 {
                worst_comp = (err, format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", grads[pi].data()[i]));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_single.0 < 1e-4 && worst_comp.0 < 1e-3 && secs < 120.0;
    report(
        1,
        "gradient suite",
        pass,
        format!(
            "single-op max rel err {:.2e} < 1e-4 at {}; composite max rel err {:.2e} < 1e-3 over {probes} coords at {}; {secs:.1}s < 120s",
            worst_single.0, worst_single.1, worst_comp.0, worst_comp.1
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Warp identity

#[test]
fn criterion_02_warp_identity() {
    let _serial = serial();
    let mut r = rng(2);
    let x: Tensor<f32> = uniform(&[3, 13, 17], &mut r, -3.0, 3.0);
    let zero = warp(&x, &FlowField::zeros(17, 13)).unwrap();
    let identity = x.data().iter().zip(zero.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let x64: Tensor<f64> = uniform(&[2, 9, 8], &mut r, -1.0, 1.0);
    let zero64 = warp(&x64, &FlowField::zeros(8, 9)).unwrap();
    let identity64 = x64.data().iter().zip(zero64.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let (dx, dy) = (3i64, -2i64);
    let shifted = warp(&x, &FlowField::constant(17, 13, dx as f32, dy as f32)).unwrap();
    let mut mismatches = 0;
    let mut checked = 0;
    for c in 0..3 {
        for y in 0..13i64 {
            for xx in 0..17i64 {
                let (sx, sy) = (xx + dx, y + dy);
                if !(0..17).contains(&sx) || !(0..13).contains(&sy) {
                    continue;
                }
                checked += 1;
                let want = x.data()[(c * 13 + sy as usize) * 17 + sx as usize];
                let got = shifted.data()[(c * 13 + y as usize) * 17 + xx as usize];
                if want.to_bits() != got.to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = identity && identity64 && mismatches == 0;
    report(
        2,
        "warp identity",
        pass,
        format!("zero flow bit-exact f32 {identity} f64 {identity64}; integer shift ({dx},{dy}) interior mismatches {mismatches}/{checked}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Luminance constraint on a global brightening pair

#[test]
fn criterion_03_brightening_pair() {
    let _serial = serial();
    let mut r = rng(3);
    let (w, h) = (12, 10);
    let flow = FlowField::constant(w, h, 1.0, -1.0);
    let mask = OcclusionMask::ones(w, h);
    let i_prev: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 0.8);
    let o_prev: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 0.8);
    let mut lines = Vec::new();
    let mut pass = true;
    for delta in [0.05, 0.2] {
        let bright = |t: &Tensor<f64>| warp(t, &flow).unwrap().map(|v| v + delta);
        let (i_cur, o_cur) = (bright(&i_prev), bright(&o_prev));
        let value = |variant| {
            let mut t = Tape::new();
            let (p, c) = (t.constant(o_prev.clone()), t.constant(o_cur.clone()));
            let l = output_temporal_loss(&mut t, p, c, &i_prev, &i_cur, &flow, &mask, variant).unwrap();
            t.value(l).item()
        };
        let lum = value(TemporalVariant::RgbLum);
        let none = value(TemporalVariant::None);
        let expect = 3.0 * delta * delta;
        let ok = lum.abs() < 1e-6 && (none - expect).abs() < 1e-6;
        pass &= ok;
        lines.push(format!("delta {delta}: rgb_lum {lum:.3e} (want 0), none {none:.6} (want {expect:.6})"));
    }
    report(3, "luminance constraint on brightening pair", pass, lines.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Oracle equivalence of the feature loss and e_stab

#[test]
fn criterion_04_oracle_equivalence() {
    let _serial = serial();
    let instances = 24;
    let (mut worst_feat, mut worst_out, mut worst_stab) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..instances {
        let mut r = rng(1000 + seed);
        let (w, h) = (16, 16);
        let c = r.random_range(1..6);
        let flow = random_flow(w, h, &mut r, 4.0);
        let mask = random_mask(w, h, &mut r, 0.6);
        let prev: Tensor<f64> = uniform(&[c, h, w], &mut r, -2.0, 2.0);
        let cur: Tensor<f64> = uniform(&[c, h, w], &mut r, -2.0, 2.0);
        let mut t = Tape::new();
        let (p, q) = (t.constant(prev.clone()), t.constant(cur.clone()));
        let l = feature_temporal_loss(&mut t, p, q, &flow, &mask).unwrap();
        worst_feat = worst_feat.max((t.value(l).item() - feature_loss_ref(&prev, &cur, &flow, &mask)).abs());

        let i_prev: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
        let i_cur: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
        let o_prev: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
        let o_cur: Tensor<f64> = uniform(&[3, h, w], &mut r, 0.0, 1.0);
        for (variant, lum) in [(TemporalVariant::RgbLum, true), (TemporalVariant::None, false)] {
            let mut t = Tape::new();
            let (p, q) = (t.constant(o_prev.clone()), t.constant(o_cur.clone()));
            let l = output_temporal_loss(&mut t, p, q, &i_prev, &i_cur, &flow, &mask, variant).unwrap();
            let want = output_loss_ref(&o_prev, &o_cur, &i_prev, &i_cur, &flow, &mask, lum);
            worst_out = worst_out.max((t.value(l).item() - want).abs());
        }

        let frames_n = r.random_range(2..7);
        let frames: Vec<Tensor<f32>> = (0..frames_n).map(|_| uniform(&[3, h, w], &mut r, 0.0, 1.0)).collect();
        let flows: Vec<FlowField> = (1..frames_n).map(|_| random_flow(w, h, &mut r, 4.0)).collect();
        let masks: Vec<OcclusionMask> = (1..frames_n).map(|_| random_mask(w, h, &mut r, 0.6)).collect();
        let want = e_stab_ref(&frames, &flows, &masks);
        let got = e_stab(&SceneSequence::new(frames, flows, masks).unwrap()).unwrap();
        worst_stab = worst_stab.max((got - want).abs());
    }
    let pass = worst_feat < 1e-6 && worst_stab < 1e-6 && worst_out < 1e-6;
    report(
        4,
        "feature loss and e_stab match brute-force oracles",
        pass,
        format!(
            "{instances} seeded 16x16 instances; max |d| feature loss {worst_feat:.2e}, output loss {worst_out:.2e}, e_stab {worst_stab:.2e} (< 1e-6)"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Layer table shape contract

/// The layer table written out independently: (name, c_out, c_in, kernel, has_norm).
fn layer_table() -> Vec<(String, usize, usize, usize, bool)> {
    let mut t = vec![
        ("encoder.conv1".to_string(), 48, 3, 9, true),
        ("encoder.conv2".to_string(), 96, 48, 3, true),
        ("encoder.conv3".to_string(), 192, 96, 3, true),
    ];
    for i in 1..=4 {
        t.push((format!("encoder.res{i}.a"), 192, 192, 3, true));
        t.push((format!("encoder.res{i}.b"), 192, 192, 3, true));
    }
    t.push(("decoder.up1".to_string(), 96, 192, 3, true));
    t.push(("decoder.up2".to_string(), 48, 96, 3, true));
    t.push(("decoder.out".to_string(), 3, 48, 9, false));
    t
}

#[test]
fn criterion_05_shape_contract() {
    let _serial = serial();
    let net = StyleNet::<Tensor<f32>>::init(5);
    let mut r = rng(5);
    let frame: Tensor<f32> = uniform(&[3, 640, 360], &mut r, 0.0, 1.0);
    let feats = net.encode(&mut Eager, &frame).unwrap();
    let out = net.decode(&mut Eager, &feats).unwrap();
    let in_range = out.data().iter().all(|v| (0.0..=1.0).contains(v));
    let shapes_ok = feats.shape() == [192, 160, 90] && out.shape() == [3, 640, 360];

    let mut expected = Vec::new();
    for (name, co, ci, k, norm) in layer_table() {
        expected.push((format!("{name}.weight"), vec![co, ci, k, k]));
        expected.push((format!("{name}.bias"), vec![co]));
        if norm {
            expected.push((format!("{name}.norm.scale"), vec![co]));
            expected.push((format!("{name}.norm.shift"), vec![co]));
        }
    }
    let got: Vec<(String, Vec<usize>)> = manifest().into_iter().map(|p| (p.name, p.shape)).collect();
    let count: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let manifest_ok = got == expected && count == 3_098_307 && net.parameter_count() == count;

    let meta = CheckpointMetadata {
        step: 0,
        config_hash: "none".into(),
        extra: vec![],
    };
    let bytes = save_checkpoint(&net, &meta).unwrap();
    let (back, _) = load_checkpoint(&bytes).unwrap();
    let roundtrip = net
        .named_params()
        .iter()
        .zip(back.named_params())
        .all(|((n1, a), (n2, b))| *n1 == n2 && a.shape() == b.shape() && reconet::tensor::bit_equal(a, b));
    let again = save_checkpoint(&back, &meta).unwrap() == bytes;

    let pass = shapes_ok && in_range && manifest_ok && roundtrip && again;
    report(
        5,
        "layer table shape contract",
        pass,
        format!(
            "3x640x360 -> encoder {:?} -> decoder {:?}, output in [0,1] {in_range}; manifest {} tensors, {count} params match table {manifest_ok}; checkpoint bit-exact {}",
            feats.shape(),
            out.shape(),
            got.len(),
            roundtrip && again
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. Desk-scale training

fn held_out(size: usize) -> Vec<SceneSequence> {
    [((1, -1), 901), ((-2, 1), 902)]
        .iter()
        .map(|&(shift, seed)| sequence(&FixtureSpec::new(size, size, 8, shift, seed)).unwrap())
        .collect()
}

fn mean_e_stab(net: &StyleNet, scenes: &[SceneSequence]) -> f64 {
    let total: f64 = scenes
        .iter()
        .map(|s| {
            let outs = s.frames.iter().map(|f| net.stylize(f).unwrap()).collect();
            e_stab(&s.with_frames(outs).unwrap()).unwrap()
        })
        .sum();
    total / scenes.len() as f64
}

fn fixture_config(dir: &Path, size: usize, seed: u64, steps: u64, overrides: &[(&str, &str)]) -> TrainConfig {
    let cfg = write_fixture(dir, size, 10, 3, seed).unwrap();
    let mut c = TrainConfig::load(&cfg).unwrap();
    c.steps = steps;
    c.checkpoint_every = 0;
    for (k, v) in overrides {
        c.set(k, v, None).unwrap();
    }
    c
}

#[test]
fn criterion_06_desk_training() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let config = fixture_config(dir.path(), 64, 0, 500, &[]);
    let mut trainer = Trainer::new(config).unwrap();
    let held = held_out(64);
    let before = mean_e_stab(&trainer.net, &held);
    let outcome = trainer.run(&dir.path().join("run")).unwrap();
    let after = mean_e_stab(&trainer.net, &held);
    let secs = start.elapsed().as_secs_f64();
    let (first, last) = (outcome.first.unwrap().total, outcome.last.unwrap().total);
    let loss_ratio = last / first;
    let stab_ratio = after / before;
    let pass = outcome.steps == 500 && loss_ratio <= 0.5 && stab_ratio <= 0.5 && secs < 600.0;
    report(
        6,
        "desk-scale training",
        pass,
        format!(
            "500 steps 64x64 test backbone: total {first:.4e} -> {last:.4e} (ratio {loss_ratio:.4} <= 0.5); held-out e_stab {before:.5} -> {after:.5} (ratio {stab_ratio:.4} <= 0.5); {secs:.0}s < 600s"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. Ablation ordering

#[test]
fn criterion_07_ablation_ordering() {
    let _serial = serial();
    let (size, steps) = (32, 200);
    let held = held_out(size);
    let mut both = Vec::new();
    let mut feature_only = Vec::new();
    for seed in 0..3 {
        for (lambda_o, out) in [("2000", &mut both), ("0", &mut feature_only)] {
            let dir = tempfile::tempdir().unwrap();
            let config = fixture_config(dir.path(), size, seed, steps, &[("lambda_o", lambda_o)]);
            let mut trainer = Trainer::new(config).unwrap();
            trainer.run(&dir.path().join("run")).unwrap();
            out.push(mean_e_stab(&trainer.net, &held));
        }
    }
    let (mb, mf) = (median(both.clone()), median(feature_only.clone()));
    let pass = mb <= mf;
    report(
        7,
        "ablation ordering",
        pass,
        format!(
            "{size}x{size}, {steps} steps, seeds 0-2: both temporal losses e_stab {both:.5?} (median {mb:.5}) <= feature-map only {feature_only:.5?} (median {mf:.5})"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. .flo format

#[test]
fn criterion_08_flo_format() {
    let _serial = serial();
    let mut r = rng(8);
    let tiny = FlowField::new(1, 1, vec![0.5, -0.25]).unwrap();
    let tiny_bytes = write_flo(&tiny);
    let magic_ok = tiny_bytes.len() == 20 && tiny_bytes[..4] == 202021.25f32.to_le_bytes() && &tiny_bytes[..4] == b"PIEH";
    let field = random_flow(8, 6, &mut r, 30.0);
    let bytes = write_flo(&field);
    let back = read_flo(&bytes).unwrap();
    let field_roundtrip = back.data().iter().zip(field.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        && (back.width(), back.height()) == (8, 6);
    let bytes_roundtrip = write_flo(&back) == bytes && write_flo(&read_flo(&tiny_bytes).unwrap()) == tiny_bytes;

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    let magic_err = read_flo(&bad_magic).unwrap_err().to_string();
    let trunc_err = read_flo(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
    let header_err = read_flo(&bytes[..7]).unwrap_err().to_string();
    let errors_ok = magic_err.contains("not a flow file")
        && trunc_err.contains("unexpected end of data")
        && header_err.contains("unexpected end of data");
    let pass = magic_ok && field_roundtrip && bytes_roundtrip && errors_ok;
    report(
        8,
        ".flo roundtrip and rejection",
        pass,
        format!(
            "1x1 file 20 bytes with PIEH magic {magic_ok}; 8x6 field bit-exact {field_roundtrip}, bytes {bytes_roundtrip}; bad magic -> `{magic_err}`, truncated -> `{trunc_err}`"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. Occlusion mask

#[test]
fn criterion_09_occlusion_mask() {
    let _serial = serial();
    let (w, h) = (12, 9);
    let m = occlusion_mask(&FlowField::constant(w, h, 1.0, 0.0), &FlowField::constant(w, h, -1.0, 0.0)).unwrap();
    let mut interior_ok = true;
    for y in 0..h {
        for x in 1..w {
            interior_ok &= m.get(x, y) == 1;
        }
    }
    let bad = occlusion_mask(&FlowField::constant(w, h, 5.0, 0.0), &FlowField::constant(w, h, 5.0, 0.0)).unwrap();
    // |(5,0) + (5,0)|^2 = 100 against 0.01 * (25 + 25) + 0.5 = 1.
    let untraceable = bad.traceable_count() == 0;
    let binary = m.data().iter().chain(bad.data()).all(|&v| v <= 1);
    let pass = interior_ok && untraceable && binary;
    report(
        9,
        "occlusion mask",
        pass,
        format!(
            "consistent translation interior traceable {interior_ok} ({} of {} pixels); inconsistent (5,0)/(5,0) traceable {} (100 > 1.0)",
            m.traceable_count(),
            w * h,
            bad.traceable_count()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn end_to_end(root: &Path) -> (Vec<u8>, Vec<Vec<u8>>) {
    let bin = env!("CARGO_BIN_EXE_reconet");
    let run = |args: &[&str]| {
        let status = Command::new(bin).args(args).env("RUST_LOG", "warn").status().unwrap();
        assert!(status.success(), "{args:?} failed");
    };
    let fx = root.join("fx");
    let out = root.join("train");
    let styl = root.join("styl");
    let fx_s = fx.to_str().unwrap();
    run(&["--out", fx_s, "fixture", "--size", "32", "--frames", "4", "--scenes", "2", "--seed", "5"]);
    run(&[
        "--out",
        out.to_str().unwrap(),
        "train",
        "--config",
        fx.join("train.cfg").to_str().unwrap(),
        "--steps",
        "50",
        "--set",
        "checkpoint_every=25",
    ]);
    let frames = fx.join("data").join("scene_01");
    let input = root.join("input");
    std::fs::create_dir_all(&input).unwrap();
    for n in 1..=3 {
        let name = reconet::image_io::frame_name(n);
        std::fs::copy(frames.join(&name), input.join(&name)).unwrap();
    }
    let model = out.join("model.rcnt");
    run(&[
        "--out",
        styl.to_str().unwrap(),
        "stylize",
        "--checkpoint",
        model.to_str().unwrap(),
        "--frames",
        input.to_str().unwrap(),
    ]);
    let mut outputs: Vec<_> = std::fs::read_dir(&styl)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    outputs.sort();
    assert_eq!(outputs.len(), 3, "{outputs:?}");
    let mut blobs = vec![std::fs::read(out.join("checkpoints/step_000025.rcnt")).unwrap()];
    blobs.extend(outputs.iter().map(|p| std::fs::read(p).unwrap()));
    (std::fs::read(model).unwrap(), blobs)
}

#[test]
fn criterion_10_determinism() {
    let _serial = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (model_a, blobs_a) = end_to_end(a.path());
    let (model_b, blobs_b) = end_to_end(b.path());
    let models = model_a == model_b;
    let rest = blobs_a == blobs_b;
    let pass = models && rest;
    report(
        10,
        "determinism",
        pass,
        format!(
            "two runs (train 50 steps + stylize 3 frames): final checkpoints identical {models} ({} bytes); intermediate checkpoint and 3 output frames identical {rest}",
            model_a.len()
        ),
    );
    assert!(pass);
}
