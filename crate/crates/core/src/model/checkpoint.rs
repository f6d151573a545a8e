//! Parameter snapshots with lineage.
//!
//! A checkpoint is written as two files: `<id>.ckpt` holds the weights
//! (`b"ESCK"`, `u32` version, `u64` count, then little-endian `f64`s) and
//! `<id>.ckpt.json` holds config, lineage, training metadata and the
//! SHA-256 of the weights file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::io::{read_json, write_bytes, write_json};
use crate::schedule::seeded_rng;

const MAGIC: &[u8; 4] = b"ESCK";
const VERSION: u32 = 1;

/// Where a model sits in the level tree. `M0` is level 0, index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub level_index: usize,
    pub submodel_index: usize,
    pub parent: Option<String>,
}

impl Lineage {
    pub fn root() -> Self {
        Self {
            level_index: 0,
            submodel_index: 0,
            parent: None,
        }
    }

    pub fn id(&self) -> String {
        format!("{}_{}", self.level_index, self.submodel_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub final_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: BackboneConfig,
    lineage: Lineage,
    training_meta: TrainingMeta,
    parameter_count: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub parameters: Vec<u8>,
    pub config: BackboneConfig,
    pub lineage: Lineage,
    pub training_meta: TrainingMeta,
    digest: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_parameters(values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_parameters(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("weights blob has no ESCK header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported weights version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    if payload.len() != count.saturating_mul(8) {
        return Err(Error::Integrity(format!(
            "weights blob declares {count} values but carries {} bytes",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut name = blob.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

impl ModelCheckpoint {
    pub fn from_model(model: &Backbone, lineage: Lineage, training_meta: TrainingMeta) -> Self {
        let parameters = encode_parameters(&model.flat_parameters());
        let digest = sha256_hex(&parameters);
        Self {
            parameters,
            config: *model.config(),
            lineage,
            training_meta,
            digest,
        }
    }

    pub fn id(&self) -> String {
        self.lineage.id()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn verify(&self) -> Result<()> {
        let actual = sha256_hex(&self.parameters);
        if actual != self.digest {
            return Err(Error::Integrity(format!(
                "checkpoint {} digest mismatch (expected {}, found {actual})",
                self.id(),
                self.digest
            )));
        }
        decode_parameters(&self.parameters).map(|_| ())
    }

    pub fn to_model(&self) -> Result<Backbone> {
        self.verify()?;
        let values = decode_parameters(&self.parameters)?;
        // Initial values are overwritten right away.
        let mut model = Backbone::new(self.config, &mut seeded_rng(0))?;
        model.load_flat_parameters(&values)?;
        Ok(model)
    }

    /// Writes `path` (weights) and `path.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.parameters)?;
        write_json(
            &sidecar_path(path),
            &Sidecar {
                format_version: VERSION,
                config: self.config,
                lineage: self.lineage.clone(),
                training_meta: self.training_meta.clone(),
                parameter_count: (self.parameters.len().saturating_sub(16)) / 8,
                sha256: self.digest.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let parameters = fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta_path = sidecar_path(path);
        let sidecar: Sidecar = read_json(&meta_path).map_err(|e| match e {
            Error::Json(j) => Error::Integrity(format!("{}: {j}", meta_path.display())),
            other => other,
        })?;
        let ckpt = Self {
            parameters,
            config: sidecar.config,
            lineage: sidecar.lineage,
            training_meta: sidecar.training_meta,
            digest: sidecar.sha256,
        };
        ckpt.verify()?;
        Ok(ckpt)
    }
}

/// Parameter-identical copy under a new lineage.
pub fn copy_model(src: &ModelCheckpoint, new_lineage: Lineage) -> Result<ModelCheckpoint> {
    src.verify()?;
    Ok(ModelCheckpoint {
        parameters: src.parameters.clone(),
        config: src.config,
        lineage: new_lineage,
        training_meta: TrainingMeta::default(),
        digest: src.digest.clone(),
    })
}
