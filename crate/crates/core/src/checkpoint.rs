//! Binary checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! (`config`, tensor manifest, free-form `meta`), then the payload of
//! little-endian `f32` values in manifest order. Manifest offsets are
//! byte offsets into the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FreeTransformer, ModelConfig};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

const LEN_PREFIX: usize = 8;
const MAX_HEADER: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A decoded checkpoint: configuration, named tensors, metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &FreeTransformer<f32>, meta: serde_json::Value) -> Self {
        let tensors = model.params().named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Self { config: model.config().clone(), tensors, meta }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model from the tensors whose names match its layout;
    /// extra tensors (optimizer moments) are ignored.
    pub fn model(&self) -> Result<FreeTransformer<f32>> {
        let mut model = FreeTransformer::init(self.config.clone(), &mut stream(0, Stream::Init))?;
        for (name, slot) in model.params_mut().named_mut() {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint { offset: 0, msg: format!("missing tensor {name}") })?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint {
                    offset: 0,
                    msg: format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.len() as u64;
        }
        let header = Header { config: self.config.clone(), tensors: entries, meta: self.meta.clone() };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(LEN_PREFIX + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, msg: String| Error::Checkpoint { offset: offset as u64, msg };
        if bytes.len() < LEN_PREFIX {
            return Err(corrupt(0, format!("file of {} bytes has no header length", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[..LEN_PREFIX].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER || LEN_PREFIX as u64 + header_len > bytes.len() as u64 {
            return Err(corrupt(0, format!("header length {header_len} exceeds file size {}", bytes.len())));
        }
        let payload_start = LEN_PREFIX + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[LEN_PREFIX..payload_start])
            .map_err(|e| corrupt(LEN_PREFIX + e.column().saturating_sub(1), format!("bad header: {e}")))?;
        header.config.validate()?;
        let payload = &bytes[payload_start..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(corrupt(
                    payload_start + e.offset as usize,
                    format!("tensor {} at payload offset {}, expected {expected}", e.name, e.offset),
                ));
            }
            let end = expected + 4 * n as u64;
            if end > payload.len() as u64 {
                return Err(corrupt(
                    payload_start + payload.len(),
                    format!("tensor {} needs payload bytes {expected}..{end}, file ends at {}", e.name, payload.len()),
                ));
            }
            let data = payload[expected as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected = end;
        }
        if expected != payload.len() as u64 {
            return Err(corrupt(
                payload_start + expected as usize,
                format!("{} trailing payload bytes", payload.len() as u64 - expected),
            ));
        }
        Ok(Self { config: header.config, tensors, meta: header.meta })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn header(bytes: &[u8]) -> Result<Header> {
        let ck = Self::from_bytes(bytes)?;
        let mut offset = 0;
        let tensors = ck
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        Ok(Header { config: ck.config, tensors, meta: ck.meta })
    }
}
