//! Experiment files: one JSON document describing the loss, the
//! regularizer anchors, the dataset recipe, and the schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qcface_core::margin::MarginSpec;
use qcface_core::reg::{BMode, RegParams};
use qcface_core::synth::SyntheticSpec;
use qcface_core::train::{ParamMode, TrainConfig};
use qcface_core::{Error, Result};

/// Decimal 64-bit seed that, when set, replaces both the data and the
/// trainer seed from the file. Recorded in the run manifest.
pub const SEED_ENV: &str = "QCP_SEED_OVERRIDE";

/// Regularizer block. The calibration weight is always re-derived from
/// the anchors, never read from disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub l_a: f64,
    pub u_a: f64,
    pub b_mode: BMode,
    pub lambda_g: f64,
}

impl RegConfig {
    pub fn resolve(&self) -> Result<RegParams> {
        RegParams::new(self.l_a, self.u_a, self.b_mode, self.lambda_g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub mode: ParamMode,
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "one")]
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

/// Exports the analyzer can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitKind {
    History,
    Magnitudes,
    Projection,
    Metrics,
}

impl EmitKind {
    pub fn file_name(self) -> &'static str {
        match self {
            EmitKind::History => "history.csv",
            EmitKind::Magnitudes => "magnitudes.csv",
            EmitKind::Projection => "projection.csv",
            EmitKind::Metrics => "metrics.json",
        }
    }

    /// Parses a comma list like "history,metrics". Order is kept,
    /// duplicates dropped.
    pub fn parse_list(s: &str) -> Result<Vec<EmitKind>> {
        let mut out = Vec::new();
        for tok in s.split(',') {
            let kind = match tok.trim() {
                "history" => EmitKind::History,
                "magnitudes" => EmitKind::Magnitudes,
                "projection" => EmitKind::Projection,
                "metrics" => EmitKind::Metrics,
                other => {
                    return Err(Error::InvalidConfig {
                        reason: format!("unknown emit kind {other:?}"),
                    })
                }
            };
            if !out.contains(&kind) {
                out.push(kind);
            }
        }
        Ok(out)
    }
}

fn default_emit() -> Vec<EmitKind> {
    vec![EmitKind::Projection, EmitKind::Metrics]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub loss: MarginSpec,
    pub reg: RegConfig,
    pub data: SyntheticSpec,
    pub train: TrainSchedule,
    pub output_dir: PathBuf,
    #[serde(default = "default_emit")]
    pub emit: Vec<EmitKind>,
}

/// Everything validated and ready to hand to the core crate.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig {
            reason: format!("config parse error: {e}"),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn apply_seed_override(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        self.data.validate()?;
        let train = TrainConfig {
            mode: self.train.mode,
            warmup_epochs: self.train.warmup_epochs,
            main_epochs: self.train.main_epochs,
            lr: self.train.lr,
            lr_milestones: self.train.lr_milestones.clone(),
            lr_decay: self.train.lr_decay,
            batch_size: self.train.batch_size,
            spec: self.loss.clone(),
            reg: self.reg.resolve()?,
            seed: self.train.seed,
        };
        train.validate()?;
        Ok(ResolvedConfig {
            train,
            data: self.data.clone(),
        })
    }
}

/// Reads the seed override from the environment, if present.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse::<u64>().map(Some).map_err(|_| Error::InvalidConfig {
            reason: format!("{SEED_ENV} must be a decimal 64-bit integer, got {v:?}"),
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::InvalidConfig {
            reason: format!("{SEED_ENV}: {e}"),
        }),
    }
}
