//! Single-file model checkpoints.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "SGLUTCKP"
//! 8       4     header length H, u32 little-endian
//! 12      H     UTF-8 JSON header
//! 12+H    ...   payload: f32 little-endian tensors, back to back
//! ```
//!
//! The header holds the format version, the architecture, training metadata,
//! optional skin-tone centers, the tensor list (`name`, `len`) in payload
//! order and the SHA-256 of the payload. Tensor order is the network order of
//! `NetParams::tensor_names` followed by `bank` (all basis lattices).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{
    condition_resized, forward, ArchitectureConfig, BackboneError, NetParams, ResizedImage,
};
use crate::color::ImageBuffer;
use crate::lut::BasisLutBank;
use crate::pipeline::Transform;
use crate::skintone::SkinToneCenters;

pub const MAGIC: &[u8; 8] = b"SGLUTCKP";
pub const FORMAT_VERSION: u32 = 1;
const BANK_TENSOR: &str = "bank";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_completed: usize,
    pub finetune_epochs: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

/// Everything needed to run or resume the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub params: NetParams<f32>,
    pub bank: BasisLutBank,
    pub centers: Option<SkinToneCenters>,
    pub meta: TrainingMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ArchitectureConfig,
    metadata: TrainingMetadata,
    centers: Option<SkinToneCenters>,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

impl ModelCheckpoint {
    /// A freshly initialized model: identity transform for every input.
    pub fn init(arch: &ArchitectureConfig, seed: u64) -> Result<Self, BackboneError> {
        Ok(Self {
            params: NetParams::init(arch, seed)?,
            bank: BasisLutBank::new(arch.lut3d_dim, arch.basis_count)?,
            centers: None,
            meta: TrainingMetadata { seed, ..TrainingMetadata::default() },
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        self.params.arch()
    }

    /// Predicts the image-adaptive transform for `image` under `(score, label)`.
    pub fn transform(
        &self,
        image: &ImageBuffer,
        score: f64,
        label: Option<u8>,
        allow_extended: bool,
    ) -> Result<Transform, BackboneError> {
        let resized = ResizedImage::new(image, self.arch().input_size)?;
        self.transform_resized(&resized, score, label, allow_extended)
    }

    pub fn transform_resized(
        &self,
        resized: &ResizedImage,
        score: f64,
        label: Option<u8>,
        allow_extended: bool,
    ) -> Result<Transform, BackboneError> {
        let x = condition_resized::<f32>(resized, score, label, self.arch(), allow_extended)?;
        let out = forward(&self.params, &x)?;
        Ok(Transform { luts: out.luts, lut3d: self.bank.fuse(&out.weights)? })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity((self.params.param_count() + self.bank.data().len()) * 4);
        let mut tensors = Vec::new();
        for (name, t) in self.params.tensor_names().into_iter().zip(self.params.tensors()) {
            tensors.push(TensorEntry { name, len: t.len() });
            payload.extend(t.iter().flat_map(|v| v.to_le_bytes()));
        }
        tensors.push(TensorEntry { name: BANK_TENSOR.into(), len: self.bank.data().len() });
        payload.extend(self.bank.data().iter().flat_map(|v| v.to_le_bytes()));
        let header = Header {
            version: FORMAT_VERSION,
            arch: self.arch().clone(),
            metadata: self.meta.clone(),
            centers: self.centers.clone(),
            tensors,
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let value: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| corrupt("header lacks a version"))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::VersionMismatch { found: version as u32, expected: FORMAT_VERSION });
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.len * 4).sum();
        if payload.len() != expected {
            return Err(CheckpointError::Corrupt(format!(
                "payload has {} bytes, header lists {expected}",
                payload.len()
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let (bank_entry, net_entries) = header.tensors.split_last().ok_or_else(|| corrupt("no tensors"))?;
        if bank_entry.name != BANK_TENSOR {
            return Err(corrupt("last tensor must be the basis bank"));
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let tensors: Vec<Vec<f32>> = net_entries.iter().map(|t| floats.by_ref().take(t.len).collect()).collect();
        let bank_data: Vec<f32> = floats.collect();
        let params = NetParams::from_tensors(&header.arch, tensors).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let expected_names = params.tensor_names();
        if expected_names.iter().ne(net_entries.iter().map(|t| &t.name)) {
            return Err(corrupt("tensor names do not match the architecture"));
        }
        let bank = BasisLutBank::from_data(header.arch.lut3d_dim, header.arch.basis_count, bank_data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if params.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(corrupt("non-finite parameter"));
        }
        Ok(Self { params, bank, centers: header.centers, meta: header.metadata })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
