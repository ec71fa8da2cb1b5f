//! Versioned checkpoint files.
//!
//! ```text
//! magic    b"SMCK"
//! version  u32
//! hlen     u64
//! header   JSON: config, step, seed, dtype, tensor manifest, trainer state
//! params   total × dtype, little-endian, in manifest order
//! moments  optional: Adam first then second moment, same layout
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Encoding the same checkpoint twice yields identical bytes.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{Layout, Parameters, TensorSlot};
use super::real::Real;
use super::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    step: u64,
    seed: u64,
    dtype: String,
    tensors: Vec<TensorSlot>,
    has_moments: bool,
    state: serde_json::Value,
}

/// Adam first and second moments, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Parameters<T>,
    pub moments: Option<Moments<T>>,
    /// Trainer-owned state (schedule position, stream cursor, history).
    pub state: serde_json::Value,
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let layout = self.params.layout();
        if let Some(mo) = &self.moments {
            if mo.m.len() != layout.total() || mo.v.len() != layout.total() {
                return Err(Error::Format("moment buffers do not match the parameters".into()));
            }
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            step: self.step,
            seed: self.seed,
            dtype: T::DTYPE.into(),
            tensors: layout.slots().to_vec(),
            has_moments: self.moments.is_some(),
            state: self.state.clone(),
        })?;
        let copies = if self.moments.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(16 + header.len() + copies * layout.total() * T::BYTES + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &x in self.params.as_slice() {
            x.write_le(&mut out);
        }
        if let Some(mo) = &self.moments {
            for &x in mo.m.iter().chain(&mo.v) {
                x.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 {
            return Err(Error::Format("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        if &body[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Format("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        header.model.validate()?;
        let layout = Layout::new(&header.model);
        if layout.slots() != header.tensors.as_slice() {
            return Err(Error::Format("tensor manifest does not match the model config".into()));
        }
        let total = layout.total();
        let copies = if header.has_moments { 3 } else { 1 };
        let payload = &body[header_end..];
        if payload.len() != copies * total * T::BYTES {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                copies * total * T::BYTES
            )));
        }
        let mut values = payload.chunks_exact(T::BYTES).map(T::read_le);
        let data: Vec<T> = values.by_ref().take(total).collect();
        let params = Parameters::from_data(Arc::new(layout), data)?;
        let moments = header.has_moments.then(|| {
            let m: Vec<T> = values.by_ref().take(total).collect();
            let v: Vec<T> = values.by_ref().take(total).collect();
            Moments { m, v }
        });
        Ok(Self {
            model: header.model,
            step: header.step,
            seed: header.seed,
            params,
            moments,
            state: header.state,
        })
    }

    /// Writes the checkpoint atomically (temp file then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
