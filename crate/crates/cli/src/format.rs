//! The model file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "SIDECARM"
//! offset 8   u32       format version (currently 1)
//! offset 12  u32       crc32 of every byte from offset 16 to end of file
//! offset 16  u64       meta length in bytes
//! ...        meta      JSON: {config, trainable_mask, init_records}
//! ...        u32       parameter block count
//! per block: u16 name length, name (utf8),
//!            u64 value count, values as f64 little-endian bits
//! ```
//!
//! Blocks appear in the canonical extension ordering (gates, side-car
//! projections, LoRA factors) followed by the backbone tensors. The backbone
//! is redundant with `(config, seed)` by construction; on load it is checked
//! bit-for-bit against the re-derived backbone and any disagreement rejects
//! the file, which keeps the frozen-donor contract enforceable at rest.

use serde::{Deserialize, Serialize};
use sidecar_core::{HybridModel, ModelConfig, ModelError, TrainableMask};

pub const MAGIC: &[u8; 8] = b"SIDECARM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not a sidecar model file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file is truncated or corrupt: {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed metadata: {0}")]
    MalformedMeta(#[from] serde_json::Error),
    #[error("invalid block layout: {0}")]
    Layout(String),
    #[error("backbone blocks do not match the config/seed derivation ({0})")]
    BackboneMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    trainable_mask: TrainableMask,
    init_records: Vec<(String, Vec<f64>)>,
}

/// Serializes a model to bytes. Byte-identical for identical models.
pub fn encode(model: &HybridModel) -> Vec<u8> {
    let meta = Meta {
        config: model.config().clone(),
        trainable_mask: model.trainable_mask(),
        init_records: model.init_records().to_vec(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta is serializable");

    let mut body = Vec::new();
    body.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&meta_json);

    let extension = model.extension_parameters();
    let backbone = model.backbone_parameters();
    let count = (extension.len() + backbone.len()) as u32;
    body.extend_from_slice(&count.to_le_bytes());
    for (name, values) in extension.into_iter().chain(backbone) {
        let name_bytes = name.as_bytes();
        body.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        body.extend_from_slice(name_bytes);
        body.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(16 + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parses and verifies a model file: magic, version, checksum, metadata,
/// parameter blocks, and the backbone-equals-derivation invariant.
pub fn decode(bytes: &[u8]) -> Result<HybridModel, FormatError> {
    if bytes.len() < 16 {
        return Err(FormatError::Truncated("shorter than the fixed header"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let stored = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let body = &bytes[16..];
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }

    let mut cursor = Cursor { body, pos: 0 };
    let meta_len = cursor.u64()? as usize;
    let meta_bytes = cursor.take(meta_len, "metadata")?;
    let meta: Meta = serde_json::from_slice(meta_bytes)?;

    let mut model = HybridModel::init(meta.config)?;
    model.set_trainable_mask(meta.trainable_mask);
    model.set_init_records(meta.init_records);

    let count = cursor.u32()? as usize;
    let expected_extension = model.extension_parameters().len();
    let expected_backbone = model.backbone_parameters().len();
    if count != expected_extension + expected_backbone {
        return Err(FormatError::Layout(format!(
            "{count} blocks, expected {}",
            expected_extension + expected_backbone
        )));
    }

    let mut blocks: Vec<(String, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cursor.u16()? as usize;
        let name_bytes = cursor.take(name_len, "block name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| FormatError::Layout("block name is not utf8".into()))?
            .to_string();
        let len = cursor.u64()? as usize;
        let raw = cursor.take(
            len.checked_mul(8)
                .ok_or(FormatError::Truncated("block length"))?,
            "block values",
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push((name, values));
    }
    if cursor.pos != body.len() {
        return Err(FormatError::Layout(
            "trailing bytes after final block".into(),
        ));
    }

    for (name, values) in blocks.iter().take(expected_extension) {
        model.set_extension_param(name, values)?;
    }
    for ((file_name, file_values), (derived_name, derived_values)) in blocks
        .iter()
        .skip(expected_extension)
        .zip(model.backbone_parameters())
    {
        if *file_name != derived_name {
            return Err(FormatError::BackboneMismatch(format!(
                "block {file_name} where {derived_name} was expected"
            )));
        }
        let same = file_values.len() == derived_values.len()
            && file_values
                .iter()
                .zip(derived_values)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(FormatError::BackboneMismatch(derived_name));
        }
    }

    Ok(model)
}

struct Cursor<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(FormatError::Truncated(what))?;
        if end > self.body.len() {
            return Err(FormatError::Truncated(what));
        }
        let slice = &self.body[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(
            self.take(2, "u16 field")?.try_into().unwrap(),
        ))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4, "u32 field")?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8, "u64 field")?.try_into().unwrap(),
        ))
    }
}
