use std::path::{Path, PathBuf};

use avcl_core::audio::StftParams;
use avcl_core::data::SyntheticSpec;
use avcl_core::train::{AblationAxis, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything one run needs. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic generator settings (ignored when `corpus` is set).
    pub data: SyntheticSpec,
    /// Load a WAV corpus instead of generating data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusSource>,
    pub stft: StftParams,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    #[serde(skip_serializing)]
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub dir: PathBuf,
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
}

fn default_manifest() -> PathBuf {
    PathBuf::from("manifest.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub axes: Vec<AblationAxis>,
    pub seeds: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { axes: Vec::new(), seeds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::config(format!(
                "{} line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.out_dir);
        if let Some(c) = cfg.paths.checkpoint.as_mut() {
            resolve(c);
        }
        if let Some(c) = cfg.corpus.as_mut() {
            resolve(&mut c.dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.corpus.is_none() {
            self.data.validate()?;
        }
        self.stft.validate()?;
        self.train.validate()?;
        if self.ablation.seeds == 0 {
            return Err(CliError::config("ablation.seeds must be at least 1"));
        }
        Ok(())
    }

    /// Seeds the generator and the training run from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    /// The experiment definition without run-location paths, as JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
