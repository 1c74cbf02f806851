//! On-disk dataset directories.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/000000.bin    u32 rank, u32 extents[rank], f32 data (all little-endian)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{DatasetId, Modality, VisualSample};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_id: DatasetId,
    pub modality: Modality,
    pub size: usize,
    pub classes: usize,
    pub labels: Vec<usize>,
    pub files: Vec<String>,
}

/// Encodes a tensor as rank, extents, then data.
pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (1 + shape.len() + data.len()));
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| Error::Format("truncated tensor file".into()))
    };
    let rank = u32::from_le_bytes(word(0)?) as usize;
    let shape = (0..rank)
        .map(|i| word(1 + i).map(|w| u32::from_le_bytes(w) as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let body = &bytes[4 * (1 + rank)..];
    if body.len() != 4 * numel {
        return Err(Error::Format(format!(
            "tensor of shape {shape:?} needs {} data bytes, found {}",
            4 * numel,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((shape, data))
}

pub fn write_dataset(dir: &Path, samples: &[VisualSample], classes: usize) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("cannot write an empty dataset"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.modality != first.modality || s.dataset_id != first.dataset_id {
            return Err(Error::contract("dataset samples must share modality and dataset id"));
        }
        if s.label >= classes {
            return Err(Error::contract(format!("label {} >= {classes} classes", s.label)));
        }
        let name = format!("{i:06}.bin");
        let path = dir.join(&name);
        fs::write(&path, encode_tensor(&s.shape(), s.data())).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        dataset_id: first.dataset_id.clone(),
        modality: first.modality,
        size: samples.len(),
        classes,
        labels: samples.iter().map(|s| s.label).collect(),
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "dataset schema version {} (expected {DATASET_SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    if m.labels.len() != m.size || m.files.len() != m.size {
        return Err(Error::Format("manifest size disagrees with labels/files".into()));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<VisualSample>)> {
    let m = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(m.size);
    for (file, &label) in m.files.iter().zip(&m.labels) {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (shape, data) = decode_tensor(&bytes)?;
        let shape: [usize; 4] = shape
            .try_into()
            .map_err(|s| Error::Format(format!("{file}: expected rank-4 tensor, got {s:?}")))?;
        if label >= m.classes {
            return Err(Error::Format(format!("{file}: label {label} >= {} classes", m.classes)));
        }
        samples.push(VisualSample::new(m.modality, shape, data, label, m.dataset_id.clone())?);
    }
    Ok((m, samples))
}
