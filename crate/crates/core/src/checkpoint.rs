//! Two-part tensor container: a single-line JSON header (metadata plus a
//! tensor manifest with name, shape, and byte offset) terminated by `\n`,
//! followed by little-endian `f32` payloads in manifest order. Round-trips
//! are bit-exact.

use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const FORMAT_TAG: &str = "mcf-tensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// byte offset into the payload (starts right after the header newline)
    offset: usize,
    /// payload bytes
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Encode named tensors with arbitrary JSON metadata.
pub fn encode_tensors(meta: &serde_json::Value, tensors: &[(&str, &Mat<f32>)]) -> Vec<u8> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, m) in tensors {
        let len = m.len() * 4;
        manifest.push(ManifestEntry {
            name: (*name).to_string(),
            shape: [m.rows(), m.cols()],
            offset,
            len,
        });
        offset += len;
    }
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors: manifest,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, m) in tensors {
        for &v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_tensor_file(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(&str, &Mat<f32>)],
) -> Result<()> {
    let bytes = encode_tensors(meta, tensors);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat<f32>)>,
}

pub fn decode_tensors(bytes: &[u8]) -> Result<TensorFile> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unknown format tag {:?}",
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let payload = &bytes[nl + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n = entry.shape[0] * entry.shape[1];
        if entry.len != n * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor {} length {} does not match shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        let slice = payload
            .get(entry.offset..entry.offset + entry.len)
            .ok_or_else(|| {
                Error::Checkpoint(format!("tensor {} payload out of bounds", entry.name))
            })?;
        let data: Vec<f32> = slice
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((
            entry.name.clone(),
            Mat::from_vec(entry.shape[0], entry.shape[1], data),
        ));
    }
    Ok(TensorFile {
        meta: header.meta,
        tensors,
    })
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    decode_tensors(&std::fs::read(path)?)
}

/// Serialize a model: the config rides in the metadata, every parameter in
/// registry order in the payload.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let meta = serde_json::json!({ "kind": "checkpoint", "config": model.cfg });
    let tensors: Vec<(&str, &Mat<f32>)> = model
        .params
        .entries
        .iter()
        .map(|e| (e.name.as_str(), &e.value))
        .collect();
    encode_tensors(&meta, &tensors)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = read_tensor_file(path)?;
    let cfg: BackboneConfig = serde_json::from_value(
        file.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint missing config".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let mut model = Model::new(&cfg)?;
    if file.tensors.len() != model.params.entries.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {}",
            model.params.entries.len(),
            file.tensors.len()
        )));
    }
    for (entry, (name, mat)) in model.params.entries.iter_mut().zip(file.tensors) {
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected {}, found {name}",
                entry.name
            )));
        }
        if entry.value.shape() != mat.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} shape {:?} does not match model {:?}",
                mat.shape(),
                entry.value.shape()
            )));
        }
        entry.value = mat;
    }
    Ok(model)
}
