//! On-disk dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SMDS"
//! version  u32
//! hlen     u64           length of the JSON header
//! header   hlen bytes    DatasetHeader as JSON
//! payload  count × (N + 1) residues, `width` bytes each (a_1..a_N, label)
//! digest   32 bytes      SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetSpec, Sample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMDS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    spec: DatasetSpec,
    count: u64,
    width: u8,
}

fn residue_width(q: u64) -> u8 {
    if q <= 1 << 32 {
        4
    } else {
        8
    }
}

/// Serializes `ds` into the container format.
pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let width = residue_width(ds.spec.q.get());
    let header = serde_json::to_vec(&DatasetHeader {
        spec: ds.spec.clone(),
        count: ds.samples.len() as u64,
        width,
    })?;
    let row = ds.spec.n_terms + 1;
    let mut out = Vec::with_capacity(16 + header.len() + ds.samples.len() * row * width as usize + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for s in &ds.samples {
        if s.a.len() != ds.spec.n_terms {
            return Err(Error::Format(format!(
                "sample has {} entries, expected {}",
                s.a.len(),
                ds.spec.n_terms
            )));
        }
        for &v in s.a.iter().chain(std::iter::once(&s.label)) {
            if width == 4 {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses a container, verifying the digest first.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 + 32 {
        return Err(Error::Format("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checksum mismatch".into()));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header length out of range".into()))?;
    let header: DatasetHeader = serde_json::from_slice(&body[16..header_end])?;
    header.spec.validate()?;
    let width = header.width as usize;
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("bad residue width {width}")));
    }
    let row = header.spec.n_terms + 1;
    let payload = &body[header_end..];
    if payload.len() != header.count as usize * row * width {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            header.count as usize * row * width
        )));
    }
    let q = header.spec.q;
    let mut samples = Vec::with_capacity(header.count as usize);
    for chunk in payload.chunks_exact(row * width) {
        let mut vals = chunk.chunks_exact(width).map(|w| {
            if width == 4 {
                u32::from_le_bytes(w.try_into().unwrap()) as u64
            } else {
                u64::from_le_bytes(w.try_into().unwrap())
            }
        });
        let a: Vec<u64> = vals.by_ref().take(header.spec.n_terms).collect();
        let label = vals.next().unwrap();
        for &v in a.iter().chain(std::iter::once(&label)) {
            q.check(v).map_err(|e| Error::Format(e.to_string()))?;
        }
        samples.push(Sample { a, label });
    }
    Ok(Dataset {
        spec: header.spec,
        samples,
    })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<[u8; 32]> {
    let bytes = encode(ds)?;
    fs::write(path, &bytes)?;
    let mut digest = [0u8; 32];
    digest.copy_from_slice(&bytes[bytes.len() - 32..]);
    Ok(digest)
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&fs::read(path)?)
}

/// One line per sample: `a_1 a_2 … a_N ; label`.
pub fn export_text<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    for s in &ds.samples {
        let mut line = String::with_capacity(8 * (s.a.len() + 2));
        for (i, v) in s.a.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&v.to_string());
        }
        line.push_str(" ; ");
        line.push_str(&s.label.to_string());
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Parses [`export_text`] output back into samples.
pub fn parse_text(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (lhs, rhs) = line
                .split_once(';')
                .ok_or_else(|| Error::Format(format!("missing ';' in {line:?}")))?;
            let parse = |t: &str| {
                t.parse::<u64>()
                    .map_err(|e| Error::Format(format!("bad residue {t:?}: {e}")))
            };
            let a = lhs.split_whitespace().map(parse).collect::<Result<Vec<_>>>()?;
            let label = parse(rhs.trim())?;
            Ok(Sample { a, label })
        })
        .collect()
}
