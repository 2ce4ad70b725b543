use std::path::{Path, PathBuf};

use histofuse_core::data::{AugmentationConfig, Magnification, TumorClass};
use histofuse_core::models::{Architecture, BackboneConfig, ModelKind};
use histofuse_core::optim::{Rule, TrainConfig};
use histofuse_core::pso::SwarmConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The JSON document accepted by `train` and `tune`. Omitted fields take the
/// defaults of the chosen model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<bool>,
    /// Fusion-head dropout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
    /// Subtype family for `subclass_initial`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<TumorClass>,
    /// `false` disables augmentation, `true` or an object enables it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationSetting>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub tune: TuneConfig,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AugmentationSetting {
    Enabled(bool),
    Custom(AugmentationConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    /// Keep only this magnification (40, 100, 200 or 400).
    pub magnification: Option<u32>,
    /// Train one model per magnification, each in its own subdirectory.
    pub per_magnification: bool,
    /// Down-sample every class to at most this many images before splitting.
    pub balance: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_fraction: 0.2,
            magnification: None,
            per_magnification: false,
            balance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    /// Epochs per fitness run.
    pub epochs: usize,
    pub swarm: SwarmConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            epochs: 5,
            swarm: SwarmConfig {
                particles: 10,
                iterations: 10,
                ..SwarmConfig::default()
            },
        }
    }
}

/// Per-kind defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KindDefaults {
    pub input_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: bool,
    pub early_stop: bool,
    pub augmentation: bool,
}

pub fn kind_defaults(kind: ModelKind) -> KindDefaults {
    match kind {
        ModelKind::Baseline => KindDefaults {
            input_size: 128,
            batch_size: 32,
            epochs: 20,
            scheduler: false,
            early_stop: false,
            augmentation: false,
        },
        ModelKind::SubclassInitial => KindDefaults {
            input_size: 256,
            batch_size: 32,
            epochs: 30,
            scheduler: false,
            early_stop: false,
            augmentation: true,
        },
        ModelKind::FusionBinary | ModelKind::Backbone => KindDefaults {
            input_size: 128,
            batch_size: 16,
            epochs: 50,
            scheduler: true,
            early_stop: true,
            augmentation: false,
        },
        ModelKind::FusionBenign | ModelKind::FusionMalignant => KindDefaults {
            input_size: 128,
            batch_size: 16,
            epochs: 50,
            scheduler: true,
            early_stop: true,
            augmentation: true,
        },
    }
}

/// A config with every default filled in and paths made absolute.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub magnification: Option<Magnification>,
    pub tune: TuneConfig,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| bad(format!("invalid config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    /// Fills defaults and resolves relative paths against `base`.
    pub fn resolve(&self, base: &Path) -> Result<Resolved, CliError> {
        let kind = self.model;
        if kind == ModelKind::Backbone {
            return Err(bad("model: `backbone` is a feature extractor and cannot be trained alone"));
        }
        let d = kind_defaults(kind);
        let mut arch = Architecture::new(kind, self.input_size.unwrap_or(d.input_size));
        if self.dropout.is_some() && !kind.is_fusion() {
            return Err(bad(format!("dropout: {} models have no tunable dropout", kind.name())));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(bad(format!("dropout: {p} must be in [0, 1)")));
            }
            arch.dropout = Some(p);
        }
        if let Some(b) = &self.backbone {
            if !kind.is_fusion() {
                return Err(bad(format!("backbone: {} models have no backbone", kind.name())));
            }
            b.validate().map_err(|e| bad(format!("backbone: {e}")))?;
            arch.backbone = Some(b.clone());
        }
        if let Some(g) = self.group {
            if kind != ModelKind::SubclassInitial {
                return Err(bad(format!("group: only subclass_initial models take a group, not {}", kind.name())));
            }
            arch.group = Some(g);
        }
        let optimizer = self.optimizer.unwrap_or_else(Rule::adam);
        optimizer.validate().map_err(|e| bad(format!("optimizer: {e}")))?;
        let lr = self.lr.unwrap_or_else(|| optimizer.default_lr());
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(bad(format!("lr: {lr} must be positive")));
        }
        let augmentation = match &self.augmentation {
            None => d.augmentation.then(AugmentationConfig::default),
            Some(AugmentationSetting::Enabled(on)) => on.then(AugmentationConfig::default),
            Some(AugmentationSetting::Custom(a)) => Some(a.clone()),
        };
        let train = TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed,
            optimizer,
            lr,
            scheduler: self.scheduler.unwrap_or(d.scheduler),
            early_stop: self.early_stop.unwrap_or(d.early_stop),
            augmentation,
        };
        train.validate().map_err(|e| bad(format!("training: {e}")))?;
        let split = self.split.clone();
        if !(split.val_fraction > 0.0 && split.val_fraction < 1.0) {
            return Err(bad(format!("split.val_fraction: {} must be in (0, 1)", split.val_fraction)));
        }
        if split.balance == Some(0) {
            return Err(bad("split.balance: must be at least 1"));
        }
        let magnification = match split.magnification {
            None => None,
            Some(v) => Some(
                Magnification::from_value(v)
                    .ok_or_else(|| bad(format!("split.magnification: {v} is not one of 40, 100, 200, 400")))?,
            ),
        };
        if magnification.is_some() && split.per_magnification {
            return Err(bad("split: magnification and per_magnification are mutually exclusive"));
        }
        if self.tune.epochs == 0 {
            return Err(bad("tune.epochs: must be at least 1"));
        }
        self.tune.swarm.validate().map_err(|e| bad(format!("tune.swarm: {e}")))?;
        Ok(Resolved {
            arch,
            train,
            split,
            magnification,
            tune: self.tune.clone(),
            manifest: base.join(&self.manifest),
            output_dir: base.join(&self.output_dir),
        })
    }
}

pub const SCHEMA: &str = include_str!("../run-config.schema.json");
