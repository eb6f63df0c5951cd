//! Whole-experiment configuration: one JSON document describing the
//! backbone, adaptor, data, text pretraining, multimodal stages, metrics,
//! ablation axes and invariant checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptor::AdaptorConfig;
use crate::backbone::BackboneConfig;
use crate::data::{DataConfig, IMAGE_SIDE, TEXT_LEN};
use crate::error::{Error, Result};
use crate::trainer::{AblationAxes, EvalConfig, Stage, TrainStageConfig};
use crate::verify::VerifyConfig;
use crate::vocab::MIN_VOCAB;

/// Longest prompt plus response any generator emits, in text positions.
pub const MAX_TEXT_POSITIONS: usize = TEXT_LEN + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub adaptor: AdaptorConfig,
    pub data: DataConfig,
    pub pretrain: TrainStageConfig,
    pub stages: Vec<TrainStageConfig>,
    pub eval: EvalConfig,
    pub ablation: AblationAxes,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: BackboneConfig::default(),
            adaptor: AdaptorConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainStageConfig::default_for(Stage::TextPretrain),
            stages: TrainStageConfig::default_pipeline(),
            eval: EvalConfig::default(),
            ablation: AblationAxes::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {} is below the {MIN_VOCAB} ids the generators emit",
                self.backbone.vocab_size
            )));
        }
        self.adaptor.validate(self.backbone.n_layers)?;
        if !IMAGE_SIDE.is_multiple_of(self.adaptor.patch) {
            return Err(Error::Config(format!(
                "patch {} does not tile {IMAGE_SIDE}x{IMAGE_SIDE} images",
                self.adaptor.patch
            )));
        }
        let patches = (IMAGE_SIDE / self.adaptor.patch).pow(2);
        if patches + MAX_TEXT_POSITIONS > self.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} cannot hold {patches} image positions and {MAX_TEXT_POSITIONS} text positions",
                self.backbone.max_seq_len
            )));
        }
        if self.pretrain.stage != Stage::TextPretrain {
            return Err(Error::Config("pretrain must be the text_pretrain stage".into()));
        }
        self.pretrain.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        self.ablation.validate(self.backbone.n_layers)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn stage(&self, stage: Stage) -> Option<&TrainStageConfig> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"data": {"seed": 9, "n_text": 10, "n_caption": 10, "n_instruction": 10, "n_grounding": 10}}"#).unwrap();
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.backbone, BackboneConfig::default());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"backbone": {"vocab_size": 512, "d_modle": 4}}"#),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn small_vocab_and_short_context_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.vocab_size = 300;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.max_seq_len = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mislabeled_stage_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.stages[0].trainable_modules.push(crate::model::Module::Backbone);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generated_sequences_fit_text_budget() {
        let data = crate::data::Datasets::generate(&DataConfig::default()).unwrap();
        let longest = [&data.text, &data.caption, &data.instruction, &data.grounding]
            .iter()
            .flat_map(|d| d.iter())
            .map(|s| s.prompt.len() + s.response.len())
            .max()
            .unwrap();
        assert!(longest <= MAX_TEXT_POSITIONS, "{longest}");
    }
}
