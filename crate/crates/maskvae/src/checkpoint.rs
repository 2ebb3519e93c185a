//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "MASKVAE\0"
//! version   u32
//! arch      u32 byte length, then u32 fields: resolution, latent_dim,
//!           enc_channels[3], dec_channels[4], mask_channels[4], hypothesis
//! tensors   u32 count, then per tensor:
//!             u32 record length (bytes after this field)
//!             u16 name length, name (UTF-8)
//!             u8 rank, u32 dims[rank]
//!             f32 values[product(dims)]
//! ```
//!
//! Every integer and real is little-endian. Loading checks each tensor's name
//! and shape against the architecture and rejects trailing bytes.

use std::fs;
use std::path::Path;

use maskvae_core::vae::{ArchConfig, HypothesisConfig, VaeParams};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MASKVAE\0";
pub const VERSION: u32 = 1;
const ARCH_FIELDS: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hypothesis: HypothesisConfig,
    pub params: VaeParams<f32>,
}

impl Checkpoint {
    pub fn arch(&self) -> &ArchConfig {
        self.params.arch()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.arch();
        let mut out = Vec::with_capacity(64 + 4 * self.params.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let fields: Vec<usize> = [a.resolution, a.latent_dim]
            .into_iter()
            .chain(a.enc_channels)
            .chain(a.dec_channels)
            .chain(a.mask_channels)
            .chain([self.hypothesis.id as usize])
            .collect();
        debug_assert_eq!(fields.len(), ARCH_FIELDS);
        out.extend_from_slice(&(4 * ARCH_FIELDS as u32).to_le_bytes());
        for f in fields {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.specs().len() as u32).to_le_bytes());
        for (spec, values) in self.params.specs().iter().zip(self.params.values()) {
            let len = 2 + spec.name.len() + 1 + 4 * spec.shape.len() + 4 * values.len();
            out.extend_from_slice(&(len as u32).to_le_bytes());
            out.extend_from_slice(&(spec.name.len() as u16).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.push(spec.shape.len() as u8);
            for &d in &spec.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let arch_len = r.u32()? as usize;
        if arch_len != 4 * ARCH_FIELDS {
            return Err(Error::Data(format!("architecture block of {arch_len} bytes, expected {}", 4 * ARCH_FIELDS)));
        }
        let f: Vec<usize> = (0..ARCH_FIELDS).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let arch = ArchConfig {
            resolution: f[0],
            latent_dim: f[1],
            enc_channels: [f[2], f[3], f[4]],
            dec_channels: [f[5], f[6], f[7], f[8]],
            mask_channels: [f[9], f[10], f[11], f[12]],
        };
        let hypothesis = u8::try_from(f[13])
            .ok()
            .and_then(|id| HypothesisConfig::by_id(id).ok())
            .ok_or_else(|| Error::Data(format!("checkpoint names unknown hypothesis {}", f[13])))?;
        arch.validate().map_err(|e| Error::Data(format!("checkpoint architecture: {e}")))?;

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let mut rec = Reader { bytes: r.take(len)?, pos: 0 };
            let name_len = u16::from_le_bytes(rec.array()?) as usize;
            let name = std::str::from_utf8(rec.take(name_len)?)
                .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = rec.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| rec.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            if rec.remaining() != 4 * n {
                return Err(Error::Data(format!("tensor {name}: {} value bytes for shape {shape:?}", rec.remaining())));
            }
            let values = (0..n).map(|_| rec.array().map(f32::from_le_bytes)).collect::<Result<_>>()?;
            tensors.push((name, shape, values));
        }
        if r.remaining() != 0 {
            return Err(Error::Data(format!("{} trailing bytes after the last tensor", r.remaining())));
        }
        let params =
            VaeParams::from_tensors(arch, tensors).map_err(|e| Error::Data(format!("checkpoint tensors: {e}")))?;
        Ok(Self { hypothesis, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
