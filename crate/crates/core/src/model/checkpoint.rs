//! Single-file JSON checkpoints.
//!
//! Layout:
//!
//! ```json
//! {
//!   "format": "rescore-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "vocab": ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", ...],
//!   "params": [{"name": "...", "shape": [..], "data": "<base64>"}, ...],
//!   "meta": { ...free-form provenance... }
//! }
//! ```
//!
//! `data` is the standard base64 encoding of the tensor's values as
//! little-endian IEEE-754 doubles in row-major order, so a save/load cycle is
//! bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EncoderModel, ModelConfig, Vocab};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT: &str = "rescore-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<StoredTensor>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_f64(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::InvalidInput(format!("bad base64 tensor data: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidInput("tensor data is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serializes a model with free-form provenance metadata.
pub fn to_json(model: &EncoderModel, meta: serde_json::Value) -> Result<String> {
    let stored = Stored {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        vocab: model.vocab().clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(n, t)| StoredTensor {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: encode_f64(t.data()),
            })
            .collect(),
        meta,
    };
    Ok(serde_json::to_string(&stored)?)
}

pub fn from_json(text: &str) -> Result<(EncoderModel, serde_json::Value)> {
    let stored: Stored = serde_json::from_str(text)?;
    if stored.format != FORMAT || stored.version != VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint {} v{}",
            stored.format, stored.version
        )));
    }
    let named = stored
        .params
        .into_iter()
        .map(|p| Ok((p.name, Tensor::new(p.shape, decode_f64(&p.data)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let model = EncoderModel::from_parts(stored.config, stored.vocab, named)?;
    Ok((model, stored.meta))
}

pub fn save(model: &EncoderModel, meta: serde_json::Value, path: &Path) -> Result<()> {
    write_atomic(path, to_json(model, meta)?.as_bytes())
}

pub fn load(path: &Path) -> Result<(EncoderModel, serde_json::Value)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
