//! Binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `AFKTCKPT`                          |
//! | 8      | 4    | format version (`u32`, currently 1)       |
//! | 12     | 8    | header length `h` in bytes (`u64`)        |
//! | 20     | h    | UTF-8 JSON header                         |
//! | 20 + h | ...  | tensor payload, `f64` row-major           |
//!
//! The header carries `kind`, free-form `config`, `step` and a `tensors`
//! table of `{name, shape, dtype, offset}` where `offset` counts bytes from
//! the start of the payload. Tensors are stored in name order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datamodel::write_file;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"AFKTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// What the tensors parameterise, e.g. `mae`, `finetune`, `tmf`.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, step: u64, params: ParamStore) -> Result<Self> {
        Ok(Checkpoint {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            step,
            params,
        })
    }

    /// Deserialises the stored config.
    pub fn config_as<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{} config: {e}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                dtype: "f64".into(),
                offset: payload.len() as u64,
            });
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[body..];
        let mut params = ParamStore::new();
        for t in &header.tensors {
            if t.dtype != "f64" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
            }
            let n = t.shape[0] * t.shape[1];
            let start = t.offset as usize;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("{}: payload truncated", t.name)));
            }
            let values = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("length checked");
            params.insert(t.name.clone(), m);
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            step: header.step,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
