//! `.ssma` tensor archive.
//!
//! Layout: magic `SSMA`, version (u32 LE), header length (u32 LE), UTF-8 JSON
//! header, then every tensor as little-endian f64 in header order.

use serde::{Deserialize, Serialize};

use super::{GluParameters, NormMode};
use crate::error::{Error, Result};
use crate::numerics::RTensor;

pub const MAGIC: &[u8; 4] = b"SSMA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub f_in: usize,
    pub hidden: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub norm_mode: NormMode,
    /// Trainable scalars (running statistics excluded).
    pub parameter_count: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_params(params: &GluParameters) -> Result<Vec<u8>> {
    params.validate()?;
    let named = params.named_tensors();
    let header = ArchiveHeader {
        f_in: params.f_in,
        hidden: params.hidden,
        dropout_rate: params.dropout_rate,
        norm_mode: params.norm_mode,
        parameter_count: params.parameter_count(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), dtype: "f64".into(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = named.iter().map(|(_, t)| 8 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::TruncatedPayload)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn load_params(bytes: &[u8]) -> Result<GluParameters> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or(Error::TruncatedPayload)?;
    let header: ArchiveHeader = serde_json::from_slice(header_bytes)?;

    let mut params = GluParameters::zeros(header.f_in, header.hidden);
    params.dropout_rate = header.dropout_rate;
    params.norm_mode = header.norm_mode;
    let expected = params.named_tensors();
    if expected.len() != header.tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "archive lists {} tensors, architecture has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, t), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || entry.dtype != "f64" || entry.shape != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "archive entry {} {:?} ({}), expected {name} {:?} (f64)",
                entry.name,
                entry.shape,
                entry.dtype,
                t.shape()
            )));
        }
    }

    let mut off = 12 + header_len;
    let mut loaded = Vec::with_capacity(expected.len());
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let raw = bytes.get(off..off + 8 * len).ok_or(Error::TruncatedPayload)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        loaded.push(RTensor::from_vec(&entry.shape, data)?);
        off += 8 * len;
    }
    if off != bytes.len() {
        return Err(Error::ShapeMismatch(format!("{} trailing bytes after payload", bytes.len() - off)));
    }
    for ((_, dst), src) in params.named_tensors_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    if header.parameter_count != params.parameter_count() {
        return Err(Error::ShapeMismatch(format!(
            "header claims {} parameters, architecture has {}",
            header.parameter_count,
            params.parameter_count()
        )));
    }
    params.validate()?;
    Ok(params)
}

pub fn save_to_file(params: &GluParameters, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, save_params(params)?)?;
    Ok(())
}

pub fn load_from_file(path: impl AsRef<std::path::Path>) -> Result<GluParameters> {
    load_params(&std::fs::read(path)?)
}
