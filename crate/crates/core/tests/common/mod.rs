//! Shared helpers and brute-force reference implementations for the
//! integration tests. The references are deliberately written per pixel
//! with plain loops and share no code with the library kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reconet::flow::{FlowField, OcclusionMask};
use reconet::tensor::{Element, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(lo..hi)))
}

/// Uniform values with magnitude at least `gap`, away from relu kinks.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn random_flow(w: usize, h: usize, rng: &mut ChaCha8Rng, max: f32) -> FlowField {
    FlowField::from_fn(w, h, |_, _| (rng.random_range(-max..max), rng.random_range(-max..max))).unwrap()
}

pub fn random_mask(w: usize, h: usize, rng: &mut ChaCha8Rng, p_traceable: f64) -> OcclusionMask {
    let data = (0..w * h).map(|_| rng.random_bool(p_traceable) as u8).collect();
    OcclusionMask::new(w, h, data).unwrap()
}

/// Bilinear lookup of plane `c` at `(x + u, y + v)` with the location
/// clamped into the image rectangle.
pub fn bilinear_ref(src: &[f64], w: usize, h: usize, c: usize, x: usize, y: usize, u: f64, v: f64) -> f64 {
    let sx = (x as f64 + u).clamp(0.0, (w - 1) as f64);
    let sy = (y as f64 + v).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let at = |xx: usize, yy: usize| src[(c * h + yy) * w + xx];
    (1.0 - fx) * (1.0 - fy) * at(x0, y0) + fx * (1.0 - fy) * at(x1, y0) + (1.0 - fx) * fy * at(x0, y1) + fx * fy * at(x1, y1)
}

pub fn to_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// `(1 / (C h w)) * sum_p mask(p) * sum_c (F_cur - W(F_prev))^2`.
pub fn feature_loss_ref(prev: &Tensor<f64>, cur: &Tensor<f64>, flow: &FlowField, mask: &OcclusionMask) -> f64 {
    let (c, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
    let (p, q) = (prev.data(), cur.data());
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) == 0 {
                    continue;
                }
                let (u, v) = flow.get(x, y);
                let d = q[(ch * h + y) * w + x] - bilinear_ref(p, w, h, ch, x, y, u as f64, v as f64);
                total += d * d;
            }
        }
    }
    total / (c * h * w) as f64
}

/// Output-level loss with the luminance target applied to every RGB channel.
pub fn output_loss_ref(
    o_prev: &Tensor<f64>,
    o_cur: &Tensor<f64>,
    i_prev: &Tensor<f64>,
    i_cur: &Tensor<f64>,
    flow: &FlowField,
    mask: &OcclusionMask,
    luminance_target: bool,
) -> f64 {
    let (h, w) = (o_cur.shape()[1], o_cur.shape()[2]);
    let lum = [0.2126, 0.7152, 0.0722];
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) == 0 {
                continue;
            }
            let (u, v) = flow.get(x, y);
            let (u, v) = (u as f64, v as f64);
            let mut dy_in = 0.0;
            for c in 0..3 {
                let d = i_cur.data()[(c * h + y) * w + x] - bilinear_ref(i_prev.data(), w, h, c, x, y, u, v);
                dy_in += lum[c] * d;
            }
            for c in 0..3 {
                let d = o_cur.data()[(c * h + y) * w + x] - bilinear_ref(o_prev.data(), w, h, c, x, y, u, v);
                let r = if luminance_target { d - dy_in } else { d };
                total += r * r;
            }
        }
    }
    total / (h * w) as f64
}

/// Square root of the mean over transitions of the masked squared warping
/// residual summed over channels and divided by `H * W`.
pub fn e_stab_ref(frames: &[Tensor<f32>], flows: &[FlowField], masks: &[OcclusionMask]) -> f64 {
    let (c, h, w) = (frames[0].shape()[0], frames[0].shape()[1], frames[0].shape()[2]);
    let mut sum = 0.0;
    for t in 1..frames.len() {
        let prev = to_f64(&frames[t - 1]);
        let cur = to_f64(&frames[t]);
        let mut e = 0.0;
        for y in 0..h {
            for x in 0..w {
                if masks[t - 1].get(x, y) == 0 {
                    continue;
                }
                let (u, v) = flows[t - 1].get(x, y);
                for ch in 0..c {
                    let d = cur[(ch * h + y) * w + x] - bilinear_ref(&prev, w, h, ch, x, y, u as f64, v as f64);
                    e += d * d;
                }
            }
        }
        sum += e / (h * w) as f64;
    }
    (sum / (frames.len() - 1) as f64).sqrt()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
