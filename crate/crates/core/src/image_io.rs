//! 8-bit PNG frames ↔ `[3, H, W]` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use image::{imageops, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    Ok(rgb8_to_tensor(&img))
}

pub fn rgb8_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let plane = w * h;
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Values are clamped to `[0, 1]` and rounded to the nearest level.
pub fn tensor_to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb8", "channels", 3, c));
    }
    let plane = h * w;
    let d = t.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            raw.push(to_u8(d[ch * plane + p]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
}

pub(crate) fn to_u8(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    tensor_to_rgb8(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn save_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    image::GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::invalid("save_gray", "buffer size does not match dimensions"))?
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

/// Bilinear (triangle filter) resize of a `[3, H, W]` tensor.
pub fn resize_image(t: &Tensor<f32>, width: usize, height: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::shape("resize_image", "channels", 3, c));
    }
    if (w, h) == (width, height) {
        return Ok(t.clone());
    }
    let plane = h * w;
    let d = t.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            raw.push(d[ch * plane + p]);
        }
    }
    let img = Rgb32FImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    let out = imageops::resize(&img, width as u32, height as u32, imageops::FilterType::Triangle);
    let raw = out.as_raw();
    let plane = width * height;
    Ok(Tensor::from_fn([3, height, width], |i| raw[(i % plane) * 3 + i / plane]))
}

/// Frame number of a `frame_NNNN.png` file name.
pub fn frame_number(name: &str) -> Option<u32> {
    name.strip_prefix("frame_")?.strip_suffix(".png")?.parse().ok()
}

pub fn frame_name(n: u32) -> String {
    format!("frame_{n:04}.png")
}

/// `frame_*.png` files in `dir`, sorted by frame number.
pub fn list_frames(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(n) = entry.file_name().to_str().and_then(frame_number) {
            frames.push((n, entry.path()));
        }
    }
    frames.sort_by_key(|(n, _)| *n);
    Ok(frames)
}
