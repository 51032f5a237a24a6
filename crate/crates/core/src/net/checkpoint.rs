//! `RCNT` container: a named-tensor manifest, a little-endian f32 payload
//! and a key=value metadata block.
//!
//! ```text
//! "RCNT" | u32 version | u32 layer count
//! per layer: u32 name length | name bytes | u32 rank | u32 dims...
//! payload: every tensor's f32 values, in manifest order
//! u32 metadata length | UTF-8 "key=value\n" lines
//! ```
//! All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{manifest, StyleNet};

pub const MAGIC: &[u8; 4] = b"RCNT";
pub const VERSION: u32 = 1;

/// Ordered named tensors plus metadata, without any architecture check.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub layers: Vec<(String, Tensor<f32>)>,
    pub metadata: Vec<(String, String)>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn layer(&self, name: &str) -> Option<&Tensor<f32>> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.layers.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(payload + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (name, t) in &self.layers {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, t) in &self.layers {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an RCNT file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("layer name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("layer {name}: implausible rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            headers.push((name, dims));
        }
        let mut layers = Vec::with_capacity(headers.len());
        for (name, dims) in headers {
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Checkpoint(format!("layer {name}: size overflow")))?;
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            layers.push((name, Tensor::new(dims, data)?));
        }
        let meta_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("metadata line without '=': {line}")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { layers, metadata })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes through a temporary sibling and renames it into place, so an
    /// interrupted write never leaves a half-written file at `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Training metadata carried by a model checkpoint.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CheckpointMetadata {
    pub step: u64,
    pub config_hash: String,
    /// Any further key=value pairs, in order.
    pub extra: Vec<(String, String)>,
}

impl CheckpointMetadata {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("step".to_string(), self.step.to_string()),
            ("config_hash".to_string(), self.config_hash.clone()),
        ];
        out.extend(self.extra.iter().cloned());
        out
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut meta = CheckpointMetadata::default();
        for (k, v) in pairs {
            match k.as_str() {
                "step" => {
                    meta.step = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad step value `{v}`")))?
                }
                "config_hash" => meta.config_hash = v.clone(),
                _ => meta.extra.push((k.clone(), v.clone())),
            }
        }
        Ok(meta)
    }
}

/// Serializes the transfer network. The manifest is checked first.
pub fn save_checkpoint(net: &StyleNet, metadata: &CheckpointMetadata) -> Result<Vec<u8>> {
    net.validate()?;
    let layers = net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    Ok(Container {
        layers,
        metadata: metadata.to_pairs(),
    }
    .to_bytes())
}

/// Parses a model checkpoint and validates its manifest against the
/// architecture, naming the first mismatching layer.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(StyleNet, CheckpointMetadata)> {
    let c = Container::from_bytes(bytes)?;
    net_from_container(&c)
}

pub fn net_from_container(c: &Container) -> Result<(StyleNet, CheckpointMetadata)> {
    let specs = manifest();
    for (i, spec) in specs.iter().enumerate() {
        let Some((name, t)) = c.layers.get(i) else {
            return Err(Error::Checkpoint(format!("layer {}: missing", spec.name)));
        };
        if *name != spec.name {
            return Err(Error::Checkpoint(format!("layer {name}: expected layer {} here", spec.name)));
        }
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "layer {name}: expected shape {:?}, found {:?}",
                spec.shape,
                t.shape()
            )));
        }
    }
    if c.layers.len() > specs.len() {
        return Err(Error::Checkpoint(format!("layer {}: unexpected", c.layers[specs.len()].0)));
    }
    let net = StyleNet::from_flat(c.layers.iter().map(|(_, t)| t.clone()))?;
    Ok((net, CheckpointMetadata::from_pairs(&c.metadata)?))
}

pub fn read_checkpoint(path: &Path) -> Result<(StyleNet, CheckpointMetadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}

pub fn write_checkpoint(path: &Path, net: &StyleNet, metadata: &CheckpointMetadata) -> Result<()> {
    write_atomic(path, &save_checkpoint(net, metadata)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bit_equal;

    fn meta() -> CheckpointMetadata {
        CheckpointMetadata {
            step: 42,
            config_hash: "abc".into(),
            extra: vec![("alpha".into(), "1".into())],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = StyleNet::init(11);
        let bytes = save_checkpoint(&net, &meta()).unwrap();
        let (back, m) = load_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta());
        for ((_, a), (_, b)) in net.named_params().iter().zip(back.named_params()) {
            assert!(bit_equal(a, b));
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = save_checkpoint(&StyleNet::init(1), &meta()).unwrap();
        assert!(load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_checkpoint(&extra).is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = save_checkpoint(&StyleNet::init(1), &meta()).unwrap();
        bytes[4] = 2;
        let err = load_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn wrong_channel_count_names_layer() {
        let net = StyleNet::init(1);
        let mut c = Container {
            layers: net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            metadata: vec![],
        };
        c.layers[0].1 = Tensor::zeros([47, 3, 9, 9]);
        let err = load_checkpoint(&c.to_bytes()).unwrap_err().to_string();
        assert!(err.contains("encoder.conv1.weight"), "{err}");
    }
}
