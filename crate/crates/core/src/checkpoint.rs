//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"DPRC"
//! version    u32
//! precision  u32            0 = f64, 1 = f32
//! digest     [u8; 32]       SHA-256 of the config text
//! config     u32 len + UTF-8 TOML of the model config
//! seed       u64
//! entries    u32 count, then per entry:
//!              u32 name len + name, u32 rank, u64 dims, u64 byte offset
//! payload    u64 len + concatenated row-major arrays
//! ```
//!
//! Entries named `scaler.mean` / `scaler.std` carry the data standardiser.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{DprNetModel, ModelConfig};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::Precision;

pub const MAGIC: &[u8; 4] = b"DPRC";
pub const VERSION: u32 = 1;

const SCALER_MEAN: &str = "scaler.mean";
const SCALER_STD: &str = "scaler.std";

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// A model plus the standardiser it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DprNetModel,
    pub scaler: Option<Standardizer>,
    pub precision: Precision,
}

/// A loaded checkpoint and any non-fatal findings.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub digest: [u8; 32],
    pub warnings: Vec<String>,
}

pub fn config_text(cfg: &ModelConfig) -> String {
    toml::to_string(cfg).expect("model config serialises")
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(config_text(cfg).as_bytes()).into()
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let text = config_text(&self.model.config);
        let mut entries: Vec<(String, Tensor)> = self
            .model
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(s) = &self.scaler {
            let c = s.mean.len();
            entries.push((SCALER_MEAN.into(), Tensor::new(&[c], s.mean.clone()).expect("scaler")));
            entries.push((SCALER_STD.into(), Tensor::new(&[c], s.std.clone()).expect("scaler")));
        }
        let width = match self.precision {
            Precision::F64 => 8,
            Precision::F32 => 4,
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, u32::from(self.precision == Precision::F32));
        out.extend_from_slice(&Sha256::digest(text.as_bytes()));
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.model.seed);
        put_u32(&mut out, entries.len() as u32);
        let mut offset = 0u64;
        for (name, t) in &entries {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, offset);
            offset += (t.numel() * width) as u64;
        }
        put_u64(&mut out, offset);
        for (_, t) in &entries {
            for &v in t.data() {
                match self.precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Loaded> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| ck(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ck("bad magic: not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ck(format!("unsupported format version {version}")));
        }
        let precision = match r.u32()? {
            0 => Precision::F64,
            1 => Precision::F32,
            p => return Err(ck(format!("unknown precision tag {p}"))),
        };
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| ck("config is not UTF-8"))?;
        let mut warnings = Vec::new();
        let actual: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        if actual != digest {
            let w = "config digest mismatch: stored header does not match embedded config".to_string();
            log::warn!("{w}");
            warnings.push(w);
        }
        let config: ModelConfig = toml::from_str(text).map_err(|e| ck(format!("embedded config: {e}")))?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| ck("entry name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(ck("trailing bytes after payload"));
        }
        let width = if precision == Precision::F64 { 8 } else { 4 };
        let read = |shape: &[usize], offset: usize| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(n * width)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| ck("entry extends past payload"))?;
            let data: Vec<f64> = payload[offset..end]
                .chunks_exact(width)
                .map(|c| match precision {
                    Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                })
                .collect();
            Tensor::new(shape, data).map_err(|e| ck(e.to_string()))
        };

        let mut model = DprNetModel::new(config, seed).map_err(|e| ck(format!("embedded config: {e}")))?;
        let mut mean = None;
        let mut std = None;
        let mut seen = vec![false; model.store.len()];
        for (name, shape, offset) in &manifest {
            let t = read(shape, *offset)?;
            match name.as_str() {
                SCALER_MEAN => mean = Some(t.into_data()),
                SCALER_STD => std = Some(t.into_data()),
                _ => {
                    let id = model
                        .store
                        .find(name)
                        .ok_or_else(|| ck(format!("unexpected parameter {name}")))?;
                    if model.store.get(id).shape() != t.shape() {
                        return Err(ck(format!(
                            "parameter {name}: stored shape {:?}, config implies {:?}",
                            t.shape(),
                            model.store.get(id).shape()
                        )));
                    }
                    *model.store.get_mut(id) = t;
                    seen[id.index()] = true;
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = model.store.ids().nth(i).expect("index in range");
            return Err(ck(format!("missing parameter {}", model.store.name(id))));
        }
        let scaler = match (mean, std) {
            (Some(mean), Some(std)) => Some(Standardizer { mean, std }),
            (None, None) => None,
            _ => return Err(ck("incomplete scaler entries")),
        };
        Ok(Loaded {
            checkpoint: Checkpoint {
                model,
                scaler,
                precision,
            },
            digest,
            warnings,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ck("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
