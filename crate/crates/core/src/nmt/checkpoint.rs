//! Checkpoint files: `model.json` (config and tensor manifest) next to
//! `model.bin` (raw little-endian f32 tensors in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{Model, Params};
use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";
const FORMAT: &str = "headprune-checkpoint-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Params<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `model.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub dtype: String,
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self {
            config,
            step: 0,
            params,
        })
    }

    pub fn model(&self) -> Model<f32> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn header(&self) -> Header {
        let mut offset = 0;
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name,
                    shape: t.shape,
                    offset,
                    len: t.data.len(),
                };
                offset += t.data.len() * 4;
                e
            })
            .collect();
        Header {
            format: FORMAT.into(),
            dtype: "f32-le".into(),
            config: self.config.clone(),
            step: self.step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let header = serde_json::to_vec_pretty(&self.header())?;
        let mut blob = Vec::with_capacity(self.params.num_params() * 4);
        for t in self.params.tensors() {
            for v in t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok((header, blob))
    }

    pub fn from_bytes(header: &[u8], blob: &[u8]) -> Result<Self> {
        let header: Header = serde_json::from_slice(header)?;
        if header.format != FORMAT || header.dtype != "f32-le" {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} / {}",
                header.format, header.dtype
            )));
        }
        header.config.validate()?;
        let mut params = Params::<f32>::init(&header.config);
        let expected: Vec<_> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (dst, entry)) in expected
            .iter()
            .zip(params.tensors_mut().into_iter().zip(&header.tensors))
        {
            if &entry.name != name || &entry.shape != shape || entry.len != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config implies {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let bytes = blob
                .get(entry.offset..entry.offset + entry.len * 4)
                .ok_or_else(|| Error::Checkpoint(format!("blob too short for {name}")))?;
            for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
                *d = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
        let used: usize = header.tensors.iter().map(|t| t.len * 4).sum();
        if used != blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob has {} bytes, manifest covers {used}",
                blob.len()
            )));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            params,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (header, blob) = self.to_bytes()?;
        let hp = dir.join(HEADER_FILE);
        let bp = dir.join(BLOB_FILE);
        fs::write(&hp, header).map_err(|e| Error::io(&hp, e))?;
        fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hp = dir.join(HEADER_FILE);
        let bp = dir.join(BLOB_FILE);
        let header = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
        let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        Self::from_bytes(&header, &blob)
    }
}
