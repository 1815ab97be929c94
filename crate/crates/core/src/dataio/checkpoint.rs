//! Single-file training checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header,
//! raw little-endian tensor data, then a SHA-256 over everything before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"MVPSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum HostData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub shape: Vec<usize>,
    pub data: HostData,
}

impl HostTensor {
    fn byte_len(&self) -> usize {
        match &self.data {
            HostData::F32(v) => v.len() * 4,
            HostData::F64(v) => v.len() * 8,
        }
    }

    fn bit_eq(&self, other: &HostTensor) -> bool {
        self.shape == other.shape
            && match (&self.data, &other.data) {
                (HostData::F32(a), HostData::F32(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (HostData::F64(a), HostData::F64(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            }
    }
}

/// Everything needed to resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng: BTreeMap<String, Rng>,
    /// Optimizer step count.
    pub opt_step: u64,
    /// Tensor groups such as `param`, `buffer`, `adam_m`, `adam_v`.
    pub tensors: BTreeMap<String, BTreeMap<String, HostTensor>>,
}

impl Checkpoint {
    /// Exact equality, comparing floats by bit pattern.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.step == other.step
            && self.opt_step == other.opt_step
            && self.rng == other.rng
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ga, a), (gb, b))| {
                ga == gb
                    && a.len() == b.len()
                    && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
            })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    group: String,
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: u64,
    opt_step: u64,
    rng: BTreeMap<String, Rng>,
    tensors: Vec<TensorIndex>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut index = Vec::new();
    let mut offset = 0u64;
    for (group, ts) in &ck.tensors {
        for (name, t) in ts {
            let bytes = t.byte_len() as u64;
            index.push(TensorIndex {
                group: group.clone(),
                name: name.clone(),
                dtype: match t.data {
                    HostData::F32(_) => "f32".into(),
                    HostData::F64(_) => "f64".into(),
                },
                shape: t.shape.clone(),
                offset,
                bytes,
            });
            offset += bytes;
        }
    }
    let header = Header {
        config: ck.config.clone(),
        step: ck.step,
        opt_step: ck.opt_step,
        rng: ck.rng.clone(),
        tensors: index,
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + offset as usize + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for ts in ck.tensors.values() {
        for t in ts.values() {
            match &t.data {
                HostData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                HostData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::Corrupt(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header =
        serde_json::from_slice(&body[20..hend]).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    if header.config.version != crate::config::CONFIG_VERSION {
        return Err(Error::VersionMismatch {
            found: header.config.version,
            expected: crate::config::CONFIG_VERSION,
        });
    }
    let data = &body[hend..];
    let mut tensors: BTreeMap<String, BTreeMap<String, HostTensor>> = BTreeMap::new();
    for ix in header.tensors {
        let start = ix.offset as usize;
        let end = start
            .checked_add(ix.bytes as usize)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| corrupt("tensor data out of range"))?;
        let raw = &data[start..end];
        let numel: usize = ix.shape.iter().product();
        let data = match ix.dtype.as_str() {
            "f32" if raw.len() == numel * 4 => {
                HostData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            "f64" if raw.len() == numel * 8 => {
                HostData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            _ => return Err(Error::Corrupt(format!("tensor {}: bad dtype or size", ix.name))),
        };
        tensors.entry(ix.group).or_default().insert(
            ix.name,
            HostTensor {
                shape: ix.shape,
                data,
            },
        );
    }
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        opt_step: header.opt_step,
        rng: header.rng,
        tensors,
    })
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
