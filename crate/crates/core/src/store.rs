//! Single-file checkpoints.
//!
//! ```text
//! "UMC1" | u32 LE version | u64 LE header length | JSON header | payload
//! ```
//!
//! The header maps every tensor name to its shape, dtype, byte offset and
//! byte length within the payload, and embeds the model configuration,
//! structural layout and metadata (plans, partitions, stages). The payload
//! holds raw little-endian floats.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelLayout, ModelMeta, UnifiedToyModel};
use crate::numerics::{DType, Real};

pub const MAGIC: &[u8; 4] = b"UMC1";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: BTreeMap<String, TensorEntry>,
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub meta: ModelMeta,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn integrity_err(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

pub fn to_bytes<T: Real>(model: &UnifiedToyModel<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, t) in model.params() {
        let offset = payload.len() as u64;
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        tensors.insert(
            name,
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset,
                nbytes: payload.len() as u64 - offset,
            },
        );
    }
    let header = Header {
        tensors,
        config: model.config.clone(),
        layout: model.layout(),
        meta: model.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the preamble and header without touching the payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(format_err("missing UMC1 magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| integrity_err("header extends past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| format_err(format!("bad header: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<UnifiedToyModel<T>> {
    let (header, payload) = read_header(bytes)?;
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    for (name, e) in &header.tensors {
        if e.dtype != T::DTYPE {
            return Err(format_err(format!("{name} stored as {:?}, {:?} requested", e.dtype, T::DTYPE)));
        }
        let numel: usize = e.shape.iter().product();
        if e.nbytes != (numel * e.dtype.size_of()) as u64 {
            return Err(format_err(format!("{name}: byte length does not match shape")));
        }
        let end = e.offset.checked_add(e.nbytes).ok_or_else(|| integrity_err("offset overflow"))?;
        if end > payload.len() as u64 {
            return Err(integrity_err(format!("{name} extends past the payload (truncated file?)")));
        }
        spans.push((e.offset, end, name));
    }
    spans.sort();
    if let Some(w) = spans.windows(2).find(|w| w[0].1 > w[1].0) {
        return Err(format_err(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
    }

    let mut model = UnifiedToyModel::<T>::from_layout(header.config.clone(), &header.layout, header.meta.clone())?;
    let mut problem: Option<Error> = None;
    let mut seen = 0usize;
    let size = T::DTYPE.size_of();
    model.visit_mut(&mut |name, tensor| {
        if problem.is_some() {
            return;
        }
        let Some(e) = header.tensors.get(&name) else {
            problem = Some(format_err(format!("header lacks tensor {name}")));
            return;
        };
        if e.shape != tensor.shape() {
            problem = Some(format_err(format!("{name}: shape {:?} disagrees with layout {:?}", e.shape, tensor.shape())));
            return;
        }
        let bytes = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(size)) {
            *dst = T::read_le(chunk);
        }
        seen += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if seen != header.tensors.len() {
        return Err(format_err("header lists tensors the layout does not contain"));
    }
    Ok(model)
}

pub fn save<T: Real>(model: &UnifiedToyModel<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<UnifiedToyModel<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests;
