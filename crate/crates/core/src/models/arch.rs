use serde::{Deserialize, Serialize};

use crate::data::TumorClass;
use crate::error::{Error, Result};
use crate::models::builders;
use crate::models::graph::ModelGraph;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    FusionBinary,
    SubclassInitial,
    FusionBenign,
    FusionMalignant,
    /// Standalone feature extractor.
    Backbone,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::FusionBinary => "fusion_binary",
            ModelKind::SubclassInitial => "subclass_initial",
            ModelKind::FusionBenign => "fusion_benign",
            ModelKind::FusionMalignant => "fusion_malignant",
            ModelKind::Backbone => "backbone",
        }
    }

    pub fn is_fusion(self) -> bool {
        matches!(
            self,
            ModelKind::FusionBinary | ModelKind::FusionBenign | ModelKind::FusionMalignant
        )
    }

    /// Binary classifiers route on benign vs malignant; the rest score subtypes.
    pub fn is_binary(self) -> bool {
        matches!(self, ModelKind::Baseline | ModelKind::FusionBinary)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub layers: usize,
    pub growth: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            layers: 4,
            growth: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_filters: usize,
    pub blocks: [BlockConfig; 3],
    pub compression: f64,
    /// Concatenate each block layer onto its input. Off is an ablation.
    pub concat: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_filters: 16,
            blocks: [BlockConfig::default(); 3],
            compression: 0.5,
            concat: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_filters == 0 {
            return Err(Error::config("backbone stem_filters must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.layers == 0 || b.growth == 0 {
                return Err(Error::config(format!(
                    "backbone block {} needs positive layers and growth",
                    i + 1
                )));
            }
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::config(format!(
                "backbone compression {} must be in (0, 1]",
                self.compression
            )));
        }
        Ok(())
    }

    /// Channel widths at the three taps.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = self.stem_filters;
        let mut taps = Vec::with_capacity(3);
        for (s, b) in self.blocks.iter().enumerate() {
            let tap = if self.concat { c + b.layers * b.growth } else { b.growth };
            taps.push(tap);
            if s < 2 {
                c = self.transition_width(tap);
            }
        }
        taps
    }

    pub(crate) fn transition_width(&self, channels: usize) -> usize {
        ((channels as f64 * self.compression).floor() as usize).max(1)
    }

    /// Spatial extents at the three taps for a square input.
    pub fn tap_extents(&self, input_size: usize) -> Result<[usize; 3]> {
        let underflow = || {
            Error::config(format!(
                "input size {input_size} is too small for a three-stage backbone"
            ))
        };
        if input_size < 3 {
            return Err(underflow());
        }
        let stem = (input_size - 3) / 2 + 1;
        let mut e = stem / 2;
        let mut out = [0; 3];
        for (s, slot) in out.iter_mut().enumerate() {
            if e == 0 {
                return Err(underflow());
            }
            *slot = e;
            if s < 2 {
                e /= 2;
            }
        }
        Ok(out)
    }
}

/// The model card stored next to a weights file. It is enough to rebuild
/// the graph the weights belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: ModelKind,
    pub input_size: usize,
    /// Subtype family scored by a `subclass_initial` model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<TumorClass>,
    /// Fusion-head dropout rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
}

impl Architecture {
    pub fn new(kind: ModelKind, input_size: usize) -> Self {
        let fusion = kind.is_fusion() || kind == ModelKind::Backbone;
        Architecture {
            kind,
            input_size,
            group: (kind == ModelKind::SubclassInitial).then_some(TumorClass::Benign),
            dropout: kind.is_fusion().then_some(builders::FUSION_DROPOUT),
            backbone: fusion.then(BackboneConfig::default),
        }
    }

    /// Class labels in output order.
    pub fn labels(&self) -> Vec<String> {
        let codes: Vec<&str> = match self.kind {
            ModelKind::Baseline | ModelKind::FusionBinary => {
                vec![TumorClass::Benign.name(), TumorClass::Malignant.name()]
            }
            ModelKind::FusionBenign => TumorClass::Benign.subtype_codes(),
            ModelKind::FusionMalignant => TumorClass::Malignant.subtype_codes(),
            ModelKind::SubclassInitial => self.group.unwrap_or(TumorClass::Benign).subtype_codes(),
            ModelKind::Backbone => Vec::new(),
        };
        codes.into_iter().map(String::from).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels().len()
    }

    pub fn build<T: Real>(&self, seed: u64) -> Result<ModelGraph<T>> {
        let backbone = || {
            self.backbone
                .clone()
                .ok_or_else(|| Error::config(format!("{} model needs a backbone", self.kind.name())))
        };
        if self.dropout.is_some() && !self.kind.is_fusion() {
            return Err(Error::config(format!(
                "{} model has no tunable dropout",
                self.kind.name()
            )));
        }
        match self.kind {
            ModelKind::Baseline => builders::build_baseline_binary_cnn(self.input_size, seed),
            ModelKind::SubclassInitial => builders::build_subclass_initial_cnn(
                self.input_size,
                self.group.unwrap_or(TumorClass::Benign),
                seed,
            ),
            ModelKind::Backbone => builders::build_mini_dense_backbone(&backbone()?, self.input_size, seed),
            ModelKind::FusionBinary | ModelKind::FusionBenign | ModelKind::FusionMalignant => {
                builders::build_fusion(self.clone(), &backbone()?, seed)
            }
        }
    }
}
