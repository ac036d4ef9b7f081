use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::AvclModel;
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

/// A trained model together with everything needed to rebuild and verify it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AvclModel,
    pub config: TrainConfig,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Epoch the parameters were taken from (0 = initialization).
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    config_hash: String,
    visual_dim: usize,
    audio_dim: usize,
    epoch: usize,
    val_loss: Option<f64>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// SHA-256 (hex) of the canonical JSON encoding of a config.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Writes `dir/manifest.json` and `dir/params.bin` atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let named = self.model.named_params();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            visual_dim: self.visual_dim,
            audio_dim: self.audio_dim,
            epoch: self.epoch,
            val_loss: self.val_loss,
            params: named
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut bin = Vec::new();
        for (_, t) in &named {
            t.write_to(&mut bin).expect("writing to Vec cannot fail");
        }
        crate::fsutil::write_dir_atomic(dir, |tmp| {
            crate::fsutil::write_atomic(&tmp.join(MANIFEST), &json)?;
            crate::fsutil::write_atomic(&tmp.join(PARAMS), &bin)
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            std::fs::read(dir.join(name))
                .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        if config_hash(&manifest.config) != manifest.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let cfg = &manifest.config;
        let mut model = AvclModel::init(&cfg.model, manifest.visual_dim, manifest.audio_dim, cfg.amfm_enabled, 0)
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let found: Vec<(String, Vec<usize>)> = manifest.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "parameter layout mismatch: expected {expected:?}, found {found:?}"
            )));
        }

        let bin = read(PARAMS)?;
        let mut cursor = bin.as_slice();
        for (slot, (name, shape)) in model.params_mut().into_iter().zip(&expected) {
            let t = Tensor::read_from(&mut cursor).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
            *slot = t;
        }
        if !cursor.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes in {PARAMS}", cursor.len())));
        }
        Ok(Self {
            model,
            config: manifest.config,
            visual_dim: manifest.visual_dim,
            audio_dim: manifest.audio_dim,
            epoch: manifest.epoch,
            val_loss: manifest.val_loss,
        })
    }

    /// Checks that the checkpoint's encoders accept features of these sizes.
    pub fn check_dims(&self, visual_dim: usize, audio_dim: usize) -> Result<()> {
        if (self.visual_dim, self.audio_dim) != (visual_dim, audio_dim) {
            return Err(Error::Checkpoint(format!(
                "input dimension mismatch: checkpoint expects visual [*, {}] and audio [*, {}], data has visual [*, {visual_dim}] and audio [*, {audio_dim}]",
                self.visual_dim, self.audio_dim
            )));
        }
        Ok(())
    }
}
