//! Tensor container used for checkpoints and feature indices: a JSON
//! manifest naming each tensor's shape, dtype and byte range, next to one
//! little-endian blob.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/blob.bin
//! ```

use std::fs;
use std::path::Path;

use omnivore_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "blob.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    kind: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
    blob: Vec<u8>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            entries: Vec::new(),
            blob: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, shape: &[usize], data: &[T]) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "container entry `{name}`: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("container entry `{name}` written twice")));
        }
        let offset = self.blob.len() as u64;
        for &v in data {
            v.write_le(&mut self.blob);
        }
        self.entries.push(Entry {
            name,
            shape: shape.to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            nbytes: self.blob.len() as u64 - offset,
        });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("container has no entry `{name}`")))
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let e = self.entry(name)?;
        if e.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "entry `{name}` is {} but {} was requested",
                e.dtype,
                T::DTYPE
            )));
        }
        let bytes = &self.blob[e.offset as usize..(e.offset + e.nbytes) as usize];
        Ok((e.shape.clone(), bytes.chunks_exact(T::BYTES).map(T::read_le).collect()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            schema_version: CONTAINER_SCHEMA_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries: self.entries.clone(),
        };
        let mpath = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB);
        fs::write(&bpath, &self.blob).map_err(|e| Error::io(&bpath, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema_version != CONTAINER_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "container schema version {} (expected {CONTAINER_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        let bpath = dir.join(BLOB);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut end = 0u64;
        for e in &m.entries {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Format(format!("entry `{}` has unknown dtype {other}", e.name))),
            };
            let numel: usize = e.shape.iter().product();
            if e.offset != end || e.nbytes != (numel * width) as u64 {
                return Err(Error::Format(format!("entry `{}` has an inconsistent byte range", e.name)));
            }
            end += e.nbytes;
        }
        if end != blob.len() as u64 {
            return Err(Error::Format(format!("blob holds {} bytes, manifest describes {end}", blob.len())));
        }
        Ok(Container {
            kind: m.kind,
            meta: m.meta,
            entries: m.entries,
            blob,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)));
        }
        Ok(())
    }
}
