//! Middlebury `.flo` files: `f32` sentinel 202021.25 ("PIEH"), `i32`
//! width, `i32` height, then `height * width` interleaved `(dx, dy)` pairs,
//! all little-endian.

use std::path::Path;

use crate::error::{Error, Result};

use super::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;

const HEADER_LEN: usize = 12;

fn word(bytes: &[u8], at: usize) -> Result<[u8; 4]> {
    bytes
        .get(at..at + 4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Flo("unexpected end of data".into()))
}

pub fn read_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 4 || f32::from_le_bytes(word(bytes, 0)?) != FLO_MAGIC {
        return Err(Error::Flo("not a flow file".into()));
    }
    let width = i32::from_le_bytes(word(bytes, 4)?);
    let height = i32::from_le_bytes(word(bytes, 8)?);
    if width <= 0 || height <= 0 {
        return Err(Error::Flo(format!("invalid dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let count = 2 * width * height;
    let end = HEADER_LEN + 4 * count;
    if bytes.len() < end {
        return Err(Error::Flo("unexpected end of data".into()));
    }
    if bytes.len() > end {
        return Err(Error::Flo(format!("{} trailing bytes after payload", bytes.len() - end)));
    }
    let data = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let flow = FlowField::new(width, height, data)?;
    let oob = flow.out_of_bounds_count();
    if oob > 0 {
        log::warn!("flow field {width}x{height}: {oob} vectors exceed the frame size");
    }
    Ok(flow)
}

pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * flow.data().len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_flo(&bytes).map_err(|e| match e {
        Error::Flo(msg) => Error::Flo(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_flo(flow)).map_err(|e| Error::io(path, e))
}
