//! One TOML config file describes a full run: dataset, model, training,
//! annotation noise, question templates, metric floors, and the output
//! directory. Every field has a default; unknown keys are rejected so typos
//! fail loudly instead of silently falling back.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::NoiseProfile;
use crate::assembly::SpecialVocab;
use crate::data::{generator_words, DatasetSpec};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

/// Ancillary question templates plus the final question. Ancillary questions
/// each get a trailing answer token in the assembled prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuestionSet {
    pub ancillary: Vec<String>,
    pub final_question: String,
}

impl Default for QuestionSet {
    fn default() -> Self {
        QuestionSet {
            ancillary: vec![
                "does the clip show a diagonal watermark stripe".to_string(),
                "does the clip show a pasted center logo block".to_string(),
                "does the caption claim the clip as original work".to_string(),
                "do the two frames match each other".to_string(),
            ],
            final_question: "should this clip be recommended".to_string(),
        }
    }
}

/// Metric operating points used by reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub r_at_p_floors: Vec<f64>,
    pub p_at_r_floors: Vec<f64>,
    pub f1_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            r_at_p_floors: crate::eval::R_AT_P_FLOORS.to_vec(),
            p_at_r_floors: crate::eval::P_AT_R_FLOORS.to_vec(),
            f1_threshold: crate::eval::F1_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub noise: NoiseProfile,
    pub questions: QuestionSet,
    pub metrics: MetricConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-section consistency: every module's notion of N and the image
    /// geometry must agree.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Inconsistent(msg));
        let n = self.dataset.n_questions;
        if self.model.n_questions != n {
            return fail(format!(
                "model.n_questions {} != dataset.n_questions {n}",
                self.model.n_questions
            ));
        }
        if self.questions.ancillary.len() != n {
            return fail(format!(
                "{} ancillary questions for {n} dataset questions",
                self.questions.ancillary.len()
            ));
        }
        if self.noise.process_accuracy.len() != n {
            return fail(format!(
                "noise profile covers {} questions, dataset has {n}",
                self.noise.process_accuracy.len()
            ));
        }
        if self.train.weights.len() != n + 1 {
            return fail(format!(
                "train.weights has {} entries, expected {}",
                self.train.weights.len(),
                n + 1
            ));
        }
        if self.model.image_size != self.dataset.image_size
            || self.model.n_frames != self.dataset.n_frames
        {
            return fail(format!(
                "model expects {}x{} x{} frames, dataset produces {}x{} x{}",
                self.model.image_size,
                self.model.image_size,
                self.model.n_frames,
                self.dataset.image_size,
                self.dataset.image_size,
                self.dataset.n_frames
            ));
        }
        self.dataset
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        self.train
            .validate(n)
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        self.noise
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        Ok(())
    }

    /// The fixed vocabulary for this run: generator corpus plus question
    /// template words.
    pub fn build_vocab(&self) -> SpecialVocab {
        SpecialVocab::build(
            &generator_words(),
            &self.questions.ancillary,
            &self.questions.final_question,
        )
    }

    /// Model config with `vocab_size` raised to fit the actual vocabulary.
    pub fn resolved_model(&self) -> (ModelConfig, SpecialVocab) {
        let vocab = self.build_vocab();
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(vocab.vocab_size());
        (model, vocab)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn default_config_is_internally_consistent() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let (model, vocab) = config.resolved_model();
        assert!(model.vocab_size >= vocab.vocab_size());
        assert_eq!(vocab.n_questions(), config.dataset.n_questions);
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut config = RunConfig::default();
        config.dataset.seed = 99;
        config.model.variant = Variant::Multitask;
        config.train.learning_rate = 1e-3;
        let text = config.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn empty_file_yields_all_defaults() {
        let config: RunConfig = toml::from_str("").unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(toml::from_str::<RunConfig>("nonsense = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[dataset]\nnonsense = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nnonsense = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nnonsense = 1").is_err());
    }

    #[test]
    fn cross_section_mismatches_detected() {
        let mut config = RunConfig::default();
        config.dataset.n_questions = 3;
        assert!(matches!(config.validate(), Err(ConfigError::Inconsistent(_))));

        let mut config = RunConfig::default();
        config.questions.ancillary.pop();
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.model.image_size = 8;
        config.model.patch_size = 4;
        assert!(config.validate().is_err());

        let mut config = RunConfig::default();
        config.train.weights = vec![1.0; 3];
        assert!(config.validate().is_err());
    }

    #[test]
    fn partial_toml_overrides_only_named_keys() {
        let config: RunConfig =
            toml::from_str("[train]\nlearning_rate = 0.01\n[dataset]\nseed = 7\n").unwrap();
        assert_eq!(config.train.learning_rate, 0.01);
        assert_eq!(config.dataset.seed, 7);
        assert_eq!(config.train.epochs, TrainConfig::default().epochs);
        assert_eq!(config.model, ModelConfig::default());
    }
}
