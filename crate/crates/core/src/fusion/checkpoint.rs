//! Checkpoint file: `MDXCKPT1`, `u32` header length, JSON header, `u32`
//! tensor count, then every parameter tensor as a matrix blob in
//! [`FusionParams::named_params`] order. All integers little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionParams, ModelConfig, VariantSpec};
use crate::embedstore::{decode_matrix, encode_matrix, DatasetSchema};
use crate::error::{MedmixError, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"MDXCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_hash: String,
    pub schema: DatasetSchema,
    pub model: ModelConfig,
    pub variant: VariantSpec,
    pub epoch: usize,
    /// Seed of the training run; together with the epoch it fixes every
    /// random stream the run would draw next.
    pub seed: u64,
    pub params: Vec<String>,
    pub prior_logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: FusionParams<f32>,
}

impl Checkpoint {
    pub fn new(params: FusionParams<f32>, epoch: usize, seed: u64) -> Self {
        let header = CheckpointHeader {
            schema_hash: params.schema.hash(),
            schema: params.schema.clone(),
            model: params.config.clone(),
            variant: params.variant.clone(),
            epoch,
            seed,
            params: params.named_params().into_iter().map(|(n, _)| n).collect(),
            prior_logits: params.prior_logits.clone(),
        };
        Self { header, params }
    }

    /// Fails unless `schema` has the layout the checkpoint was trained on.
    pub fn check_schema(&self, schema: &DatasetSchema) -> Result<()> {
        let hash = schema.hash();
        if hash != self.header.schema_hash {
            return Err(MedmixError::SchemaMismatch { checkpoint: self.header.schema_hash.clone(), dataset: hash });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(json.len() + 16);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let params = self.params.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (_, p) in params {
            out.extend_from_slice(&encode_matrix(&p.value));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: &str| MedmixError::Truncated { path: path.to_path_buf(), detail: detail.into() };
        if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
            return Err(MedmixError::BadMagic { path: path.to_path_buf(), expected: "MDXCKPT1".into() });
        }
        let read_u32 = |at: usize| -> Result<usize> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| truncated("length field"))
        };
        let json_len = read_u32(8)?;
        let json = bytes.get(12..12 + json_len).ok_or_else(|| truncated("header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        if header.schema.hash() != header.schema_hash {
            return Err(MedmixError::validation("schema_hash", "header hash does not match its schema"));
        }
        let mut params = FusionParams::<f32>::init(&header.schema, &header.model, &header.variant, 0)?;
        params.prior_logits = header.prior_logits.clone();
        let names: Vec<String> = params.named_params().into_iter().map(|(n, _)| n).collect();
        if names != header.params {
            return Err(MedmixError::validation("params", "tensor list does not match the recorded variant"));
        }
        let count = read_u32(12 + json_len)?;
        if count != names.len() {
            return Err(MedmixError::validation("params", format!("{count} tensors, expected {}", names.len())));
        }
        let mut at = 16 + json_len;
        for (name, p) in names.iter().zip(params.params_mut()) {
            let head = bytes.get(at..at + 16).ok_or_else(|| truncated(name))?;
            let rows = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
            let len = 16 + rows * cols * 4;
            let blob = bytes.get(at..at + len).ok_or_else(|| truncated(name))?;
            let value = decode_matrix(blob, path)?;
            if value.shape() != p.shape() {
                return Err(MedmixError::Shape {
                    op: "load_checkpoint",
                    detail: format!("{name}: stored {:?}, expected {:?}", value.shape(), p.shape()),
                });
            }
            p.value = value;
            at += len;
        }
        if at != bytes.len() {
            return Err(MedmixError::validation("checkpoint", "trailing bytes after the last tensor"));
        }
        Ok(Self { header, params })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| MedmixError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| MedmixError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
