//! Occlusion masks on disk: 8-bit single-channel PNG or PGM, 0 for
//! untraceable and 255 for traceable pixels.

use std::path::Path;

use image::{GrayImage, ImageReader};

use crate::error::{Error, Result};

use super::OcclusionMask;

/// Loads a mask, treating values of 128 and above as traceable.
pub fn load_mask(path: impl AsRef<Path>) -> Result<OcclusionMask> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .into_luma8();
    let odd = img.as_raw().iter().filter(|&&v| v != 0 && v != 255).count();
    if odd > 0 {
        log::warn!("{}: {odd} mask pixels are neither 0 nor 255", path.display());
    }
    let data = img.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
    OcclusionMask::new(img.width() as usize, img.height() as usize, data)
}

/// Saves as PNG, or binary PGM when the extension is `.pgm`.
pub fn save_mask(path: impl AsRef<Path>, mask: &OcclusionMask) -> Result<()> {
    let path = path.as_ref();
    let raw = mask.data().iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("sized buffer");
    img.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = OcclusionMask::ones(5, 3);
        mask.set(2, 1, false);
        for name in ["m.png", "m.pgm"] {
            let p = dir.path().join(name);
            save_mask(&p, &mask).unwrap();
            assert_eq!(load_mask(&p).unwrap(), mask);
        }
    }
}
