//! Versioned checkpoint files.
//!
//! Layout: 8-byte magic `HSEGCKPT`, `u32` format version, `u32` header
//! length, a JSON header (network config, training metadata and tensor
//! lengths), then every tensor as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkConfig, UNet};
use crate::error::{Error, Result};
use crate::volumes::Orientation;

const MAGIC: &[u8; 8] = b"HSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub orientation: Option<Orientation>,
    pub epoch: usize,
    pub best_val_dice: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetworkConfig,
    meta: CheckpointMeta,
    tensors: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: UNet<f32>,
}

impl Checkpoint {
    pub fn new(net: UNet<f32>, meta: CheckpointMeta) -> Self {
        Checkpoint { meta, net }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut net = self.net.clone();
        let state = net.state_mut();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: *self.net.config(),
            meta: self.meta.clone(),
            tensors: state.iter().map(|t| t.len()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * header.tensors.iter().sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in state {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut net = UNet::<f32>::new(header.config, 0)?;
        let mut offset = 16 + len;
        {
            let state = net.state_mut();
            if state.len() != header.tensors.len() {
                return Err(bad("tensor count does not match the network config"));
            }
            for (dst, &n) in state.into_iter().zip(&header.tensors) {
                if dst.len() != n {
                    return Err(bad("tensor size does not match the network config"));
                }
                let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
                for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                    *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                }
                offset += 4 * n;
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint { meta: header.meta, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Head;
    use ndarray::Array4;

    #[test]
    fn round_trip_preserves_outputs() {
        let cfg = NetworkConfig { depth: 2, base_width: 3, head: Head::Sigmoid, input_channels: 3 };
        let net = UNet::<f32>::new(cfg, 11).unwrap();
        let meta = CheckpointMeta { orientation: Some(Orientation::Coronal), epoch: 7, best_val_dice: 0.81, seed: 11 };
        let ck = Checkpoint::new(net.clone(), meta.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, meta);
        let x = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, i, j)| (c + i * j) as f32 * 0.05);
        assert_eq!(back.net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn rejects_garbage_and_versions() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let cfg = NetworkConfig { depth: 1, base_width: 2, head: Head::Sigmoid, input_channels: 3 };
        let ck = Checkpoint::new(UNet::new(cfg, 1).unwrap(), CheckpointMeta { orientation: None, epoch: 0, best_val_dice: 0.0, seed: 1 });
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
