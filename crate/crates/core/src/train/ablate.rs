use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{linear_probe, pretrain, TrainConfig};
use crate::data::PreparedData;
use crate::error::Result;

/// `(λ_cor, λ_self)` settings of the weighting sweep.
pub const LAMBDA_SWEEP: [(f64, f64); 5] = [(0.1, 0.9), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3), (0.9, 0.1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Amfm,
    Cgra,
    Selfcl,
    LambdaSweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

/// Expands axes into named configurations. The unmodified baseline
/// (`full`) is included unless the only axis is the λ sweep.
pub fn variants(base: &TrainConfig, axes: &[AblationAxis]) -> Vec<Variant> {
    let mut out = Vec::new();
    let modules = axes.iter().any(|a| *a != AblationAxis::LambdaSweep);
    if axes.is_empty() || modules {
        out.push(Variant {
            name: "full".into(),
            config: base.clone(),
        });
    }
    let mut seen = Vec::new();
    for &axis in axes {
        if seen.contains(&axis) {
            continue;
        }
        seen.push(axis);
        match axis {
            AblationAxis::Amfm => out.push(Variant {
                name: "amfm_off".into(),
                config: TrainConfig { amfm_enabled: false, ..base.clone() },
            }),
            AblationAxis::Cgra => out.push(Variant {
                name: "cgra_off".into(),
                config: TrainConfig { cgra_enabled: false, ..base.clone() },
            }),
            AblationAxis::Selfcl => out.push(Variant {
                name: "selfcl_off".into(),
                config: TrainConfig { selfcl_enabled: false, ..base.clone() },
            }),
            AblationAxis::LambdaSweep => {
                for (cor, slf) in LAMBDA_SWEEP {
                    let mut config = base.clone();
                    config.loss.lambda_cor = cor;
                    config.loss.lambda_self = slf;
                    out.push(Variant {
                        name: format!("lambda_{cor}_{slf}"),
                        config,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn from_rows(rows: Vec<AblationRow>) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for r in &rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        let summary = names
            .iter()
            .map(|&name| {
                let acc: Vec<f64> = rows.iter().filter(|r| r.variant == name).map(|r| r.accuracy).collect();
                let n = acc.len() as f64;
                let mean = acc.iter().sum::<f64>() / n;
                let sd = if acc.len() > 1 {
                    (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                AblationSummary {
                    variant: name.to_string(),
                    mean,
                    sd,
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn summary_for(&self, variant: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    /// `variant,seed,accuracy`
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("variant,seed,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.variant, r.seed, r.accuracy));
        }
        s
    }

    /// `variant,mean,sd`
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,mean,sd\n");
        for r in &self.summary {
            s.push_str(&format!("{},{},{}\n", r.variant, r.mean, r.sd));
        }
        s
    }
}

/// Standard deviation pooled over two equally sized groups.
pub fn pooled_sd(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

/// Pretrains and probes every variant on seeds `base.seed .. base.seed + n_seeds`.
/// Seeds are shared across variants so comparisons are paired. Runs execute
/// in parallel; the table order is fixed (variant, then seed).
pub fn ablate(base: &TrainConfig, axes: &[AblationAxis], data: &PreparedData, n_seeds: u64) -> Result<AblationTable> {
    base.validate()?;
    let jobs: Vec<(String, TrainConfig)> = variants(base, axes)
        .into_iter()
        .flat_map(|v| {
            (0..n_seeds).map(move |k| {
                let config = TrainConfig {
                    seed: base.seed.wrapping_add(k),
                    ..v.config.clone()
                };
                (v.name.clone(), config)
            })
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|(name, cfg)| {
            let out = pretrain(cfg, data)?;
            let report = linear_probe(&out.best, data, &cfg.probe)?;
            log::info!("{name} seed {}: accuracy {:.4}", cfg.seed, report.test_accuracy);
            Ok(AblationRow {
                variant: name.clone(),
                seed: cfg.seed,
                accuracy: report.test_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable::from_rows(rows))
}
