//! The POEM container: `"POEM"`, version (u16 LE), header length (u32 LE),
//! JSON header, f32 LE payload, CRC-32 of header and payload (u32 LE).

use serde::{Deserialize, Serialize};

use crate::error::{PoeError, Result};
use crate::netzoo::ArchConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"POEM";
pub const VERSION: u16 = 1;
const PREFIX: usize = 4 + 2 + 4;
const TRAILER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Oracle,
    Student,
    Library,
    Expert,
    TaskModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchMeta {
    pub task: String,
    pub classes: Vec<usize>,
    pub widen_special: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub role: Role,
    /// Whole-network architecture; for libraries and heads, the student's.
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
    /// Weights digest of the library this component was built on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_digest: Option<String>,
    /// Expert: its task. Task model: one entry per branch, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PoeError::Format(msg.into()))
}

/// Serializes `tensors` under `header`; the header's tensor list is rebuilt
/// from them.
pub fn encode(mut header: Header, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    if tensors.is_empty() {
        return fmt_err("refusing to write an artifact without tensors");
    }
    header.tensors = tensors
        .iter()
        .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into() })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let payload_len: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload_len + TRAILER);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| PoeError::Format("header too large".into()))?.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[PREFIX..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses and verifies an artifact. Malformed input is an error, never a panic.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor)>)> {
    if bytes.len() < PREFIX + TRAILER {
        return fmt_err(format!("{} bytes is shorter than the fixed framing", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return fmt_err("bad magic");
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return fmt_err(format!("unsupported version {version}"));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body_end = bytes.len() - TRAILER;
    if header_len > body_end - PREFIX {
        return fmt_err(format!("header length {header_len} overruns the file"));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[PREFIX..body_end]);
    if stored != computed {
        return Err(PoeError::Crc { stored, computed });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..PREFIX + header_len])?;
    let payload = &bytes[PREFIX + header_len..body_end];

    let mut expected = 0usize;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return fmt_err(format!("tensor `{}` has dtype {}", e.name, e.dtype));
        }
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| PoeError::Format(format!("tensor `{}` is too large", e.name)))?;
        expected = expected
            .checked_add(n)
            .ok_or_else(|| PoeError::Format("payload size overflows".into()))?;
    }
    if header.tensors.is_empty() {
        return fmt_err("artifact lists no tensors");
    }
    if expected != payload.len() {
        return fmt_err(format!("header describes {expected} payload bytes, found {}", payload.len()));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((header, tensors))
}
