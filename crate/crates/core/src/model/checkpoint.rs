//! Binary checkpoint: `GEAR1` magic, header length and CRC-32, JSON header,
//! little-endian `f32` payload, payload CRC-32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_shapes, GearModel, ModelConfig, ParamStore, MOMENTUM_PREFIXES};
use crate::error::{CheckpointError, GearError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 5] = b"GEAR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Group {
    Online,
    Momentum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab_hash: u64,
    vocab: Vec<String>,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Serializes the model; `meta` is stored verbatim in the header.
pub fn to_bytes<S: Scalar>(model: &GearModel<S>, meta: &serde_json::Value) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in [(Group::Online, &model.params), (Group::Momentum, &model.momentum)] {
        for (name, t) in store.iter() {
            arrays.push(ArrayEntry { name: name.to_string(), group, shape: t.shape().to_vec(), offset: payload.len() });
            for v in t.data() {
                payload.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        vocab_hash: model.vocab.hash(),
        vocab: model.vocab.words().to_vec(),
        arrays,
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn take(bytes: &[u8], at: usize, n: usize) -> std::result::Result<&[u8], CheckpointError> {
    bytes.get(at..at + n).ok_or(CheckpointError::Truncated { needed: at + n, have: bytes.len() })
}

fn u32_at(bytes: &[u8], at: usize) -> std::result::Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes")))
}

/// Parses a checkpoint. With `expected_vocab`, refuses a different vocabulary.
pub fn from_bytes<S: Scalar>(
    bytes: &[u8],
    expected_vocab: Option<&Vocabulary>,
) -> Result<(GearModel<S>, serde_json::Value)> {
    if take(bytes, 0, MAGIC.len())? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let header_len = u32_at(bytes, 5)? as usize;
    let header_crc = u32_at(bytes, 9)?;
    let header_bytes = take(bytes, 13, header_len)?;
    if crc32fast::hash(header_bytes) != header_crc {
        return Err(CheckpointError::HeaderChecksum.into());
    }
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: header.format_version, expected: FORMAT_VERSION }.into());
    }
    let vocab = Vocabulary::from_words(header.vocab.iter().cloned())
        .map_err(|e| CheckpointError::Header(format!("vocabulary: {e}")))?;
    if vocab.hash() != header.vocab_hash {
        return Err(CheckpointError::Header("stored vocabulary does not match its hash".into()).into());
    }
    if let Some(v) = expected_vocab {
        if v.hash() != header.vocab_hash {
            return Err(CheckpointError::VocabMismatch { stored: header.vocab_hash, supplied: v.hash() }.into());
        }
    }
    header.config.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;

    let payload_start = 13 + header_len;
    let payload_len: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>() * 4).sum();
    let payload = take(bytes, payload_start, payload_len)?;
    let crc = u32_at(bytes, payload_start + payload_len)?;
    if bytes.len() != payload_start + payload_len + 4 {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes after payload",
            bytes.len() - (payload_start + payload_len + 4)
        ))
        .into());
    }
    if crc32fast::hash(payload) != crc {
        return Err(CheckpointError::Checksum.into());
    }

    let expected = param_shapes(&header.config);
    let mut params = ParamStore::new();
    let mut momentum = ParamStore::new();
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let want = expected.iter().find(|(name, _)| *name == a.name).map(|(_, s)| s);
        let mirrored = MOMENTUM_PREFIXES.iter().any(|p| a.name.starts_with(p));
        match want {
            Some(s) if *s == a.shape && (a.group == Group::Online || mirrored) => {}
            Some(s) => {
                return Err(CheckpointError::ShapeMismatch {
                    name: a.name.clone(),
                    detail: format!("stored {:?}, config implies {:?}", a.shape, s),
                }
                .into())
            }
            None => {
                return Err(CheckpointError::ShapeMismatch {
                    name: a.name.clone(),
                    detail: "not part of this architecture".into(),
                }
                .into())
            }
        }
        let raw = payload.get(a.offset..a.offset + n * 4).ok_or_else(|| CheckpointError::ShapeMismatch {
            name: a.name.clone(),
            detail: format!("offset {} outside payload", a.offset),
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::from_f32_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let t = Tensor::new(a.shape.clone(), data)?;
        match a.group {
            Group::Online => params.insert(a.name.clone(), t),
            Group::Momentum => momentum.insert(a.name.clone(), t),
        }
    }
    for (name, _) in &expected {
        let mirrored = MOMENTUM_PREFIXES.iter().any(|p| name.starts_with(p));
        if !params.contains(name) || (mirrored && !momentum.contains(name)) {
            return Err(CheckpointError::ShapeMismatch { name: name.clone(), detail: "missing array".into() }.into());
        }
    }
    let model = GearModel::from_parts(header.config, vocab, params, momentum)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint<S: Scalar>(model: &GearModel<S>, meta: &serde_json::Value, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, meta)).map_err(|e| GearError::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    expected_vocab: Option<&Vocabulary>,
) -> Result<(GearModel<S>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| GearError::io(path, e))?;
    from_bytes(&bytes, expected_vocab)
}
