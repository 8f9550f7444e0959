//! Little-endian checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  "CCSBESR\0"
//! version    u32
//! config     u32 length + UTF-8 `key = value` model config
//! extra      u32 length + UTF-8 free text (run config, provenance)
//! count      u32
//! manifest   count × { u32 name length, name, u8 dtype, u32 rank,
//!                      rank × u64 extent, u64 payload offset }
//! payload    u64 length + raw element bytes
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"CCSBESR\0";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded contents of a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub extra: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Real>(model: &Model<T>, extra: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &model.config.to_text());
    put_str(&mut out, extra);
    put_u32(&mut out, model.params.len() as u32);
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        put_str(&mut out, name);
        out.push(T::DTYPE.tag());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, offset);
        offset += (t.numel() * T::DTYPE.size()) as u64;
    }
    put_u64(&mut out, offset);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            v.to_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn len64(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Manifest(alloc::format!("length {v} overflows")))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Manifest(alloc::format!("{what} is not UTF-8")))
    }
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

/// Parses and validates a checkpoint; tensors must be stored as `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let config_text = r.string("config block")?;
    let config = ModelConfig::from_text(&config_text).map_err(|e| CheckpointError::Config(alloc::format!("{e}")))?;
    let extra = r.string("extra block")?;

    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| CheckpointError::Manifest(alloc::format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len64()?);
        }
        let offset = r.len64()?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            offset,
        });
    }
    let payload_len = r.len64()?;
    let payload = r.take(payload_len)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Manifest(alloc::format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }

    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for e in entries {
        if e.dtype != T::DTYPE {
            return Err(CheckpointError::Manifest(alloc::format!(
                "{}: stored as {:?}, requested {:?}",
                e.name,
                e.dtype,
                T::DTYPE
            ))
            .into());
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Manifest(alloc::format!("{}: shape overflows", e.name)))?;
        let nbytes = numel * e.dtype.size();
        if e.offset != expected_offset || e.offset + nbytes > payload.len() {
            return Err(CheckpointError::Manifest(alloc::format!(
                "{}: payload range {}..{} does not follow the previous tensor within {} bytes",
                e.name,
                e.offset,
                e.offset + nbytes,
                payload.len()
            ))
            .into());
        }
        let data = payload[e.offset..e.offset + nbytes]
            .chunks_exact(e.dtype.size())
            .map(T::from_le)
            .collect();
        store.push(e.name, Tensor::new(&e.shape, data)?);
        expected_offset += nbytes;
    }
    if expected_offset != payload.len() {
        return Err(CheckpointError::Manifest(alloc::format!(
            "payload holds {} bytes, manifest covers {}",
            payload.len(),
            expected_offset
        ))
        .into());
    }
    let model = Model::from_params(config, store).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Checkpoint(CheckpointError::Manifest(m)),
        other => other,
    })?;
    Ok(Checkpoint { model, extra })
}
