//! Declarative run configuration: a sectioned key-value (TOML) file.
//! Unknown keys are rejected; defaults reproduce the full experimental
//! protocol (window 24, step 4, batch 32, epochs 500/800). The shipped
//! `configs/desk.toml` overrides the epoch counts and cohort size for
//! laptop-scale runs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{AttentionMode, ClassifyTrainConfig};
use crate::data::SynthParams;
use crate::experiment::{MatrixConfig, Significance, VariantId};
use crate::forecast::{BrainLmShape, ForecastTrainConfig};
use crate::interpret::EvalScope;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub windows: WindowsSection,
    pub forecast: ForecastSection,
    pub classify: ClassifySection,
    pub experiment: ExperimentSection,
    pub interpret: InterpretSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_cn: usize,
    pub n_ad: usize,
    pub t_regular_fraction: f64,
    pub noise_std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { n_cn: 160, n_ad: 40, t_regular_fraction: 0.5, noise_std: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WindowsSection {
    pub window: usize,
    pub step: usize,
}

impl Default for WindowsSection {
    fn default() -> Self {
        WindowsSection { window: 24, step: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub lr: f64,
    pub masked_loss_only: bool,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            batch_size: 32,
            epochs: 500,
            train_fraction: 0.8,
            lr: 1e-3,
            masked_loss_only: true,
            d_model: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// "context" or "literal".
    pub attention: String,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection { batch_size: 32, epochs: 800, lr: 1e-3, attention: "context".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub test_fraction: f64,
    /// Variant letters to evaluate.
    pub variants: Vec<String>,
    pub reference: String,
    /// "ttest" or "wilcoxon".
    pub significance: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2, 3, 4],
            folds: 5,
            test_fraction: 0.10,
            variants: ["a", "b", "c", "d", "e", "f"].map(String::from).to_vec(),
            reference: "d".into(),
            significance: "ttest".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretSection {
    pub top_k: usize,
    /// "all" or "holdout".
    pub scope: String,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection { top_k: 5, scope: "all".into() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.data.n_cn == 0 || self.data.n_ad == 0 {
            return bad("data.n_cn and data.n_ad must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.data.t_regular_fraction) {
            return bad("data.t_regular_fraction must lie in [0, 1]".into());
        }
        if self.windows.window != 24 {
            return bad(format!(
                "windows.window must be 24 (the pipeline's 20+4 split), got {}",
                self.windows.window
            ));
        }
        if self.windows.step == 0 {
            return bad("windows.step must be positive".into());
        }
        if !(self.forecast.train_fraction > 0.0 && self.forecast.train_fraction < 1.0) {
            return bad("forecast.train_fraction must lie in (0, 1)".into());
        }
        if self.forecast.lr <= 0.0 || self.classify.lr <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.forecast.batch_size == 0 || self.classify.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !self.forecast.d_model.is_multiple_of(self.forecast.heads) {
            return bad(format!(
                "forecast.d_model {} must be divisible by heads {}",
                self.forecast.d_model, self.forecast.heads
            ));
        }
        if AttentionMode::parse(&self.classify.attention).is_none() {
            return bad(format!(
                "classify.attention must be \"context\" or \"literal\", got {:?}",
                self.classify.attention
            ));
        }
        if self.experiment.seeds.is_empty() {
            return bad("experiment.seeds must be non-empty".into());
        }
        if self.experiment.folds < 2 {
            return bad("experiment.folds must be at least 2".into());
        }
        if !(self.experiment.test_fraction > 0.0 && self.experiment.test_fraction < 1.0) {
            return bad("experiment.test_fraction must lie in (0, 1)".into());
        }
        if self.experiment.variants.is_empty() {
            return bad("experiment.variants must be non-empty".into());
        }
        for v in &self.experiment.variants {
            if VariantId::parse(v).is_none() {
                return bad(format!("unknown variant {v:?}, expected a..f"));
            }
        }
        if VariantId::parse(&self.experiment.reference).is_none() {
            return bad(format!(
                "unknown reference variant {:?}, expected a..f",
                self.experiment.reference
            ));
        }
        if Significance::parse(&self.experiment.significance).is_none() {
            return bad(format!(
                "experiment.significance must be \"ttest\" or \"wilcoxon\", got {:?}",
                self.experiment.significance
            ));
        }
        if self.interpret.top_k == 0 || self.interpret.top_k > crate::data::CHANNELS {
            return bad(format!(
                "interpret.top_k must lie in 1..=53, got {}",
                self.interpret.top_k
            ));
        }
        if !matches!(self.interpret.scope.as_str(), "all" | "holdout") {
            return bad(format!(
                "interpret.scope must be \"all\" or \"holdout\", got {:?}",
                self.interpret.scope
            ));
        }
        Ok(())
    }

    /// Canonical serialization; the hash input.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams { noise_std: self.data.noise_std, ..SynthParams::default() }
    }

    pub fn brainlm_shape(&self) -> BrainLmShape {
        BrainLmShape {
            channels: crate::data::CHANNELS,
            window: self.windows.window,
            d_model: self.forecast.d_model,
            heads: self.forecast.heads,
            enc_blocks: self.forecast.enc_blocks,
            dec_blocks: self.forecast.dec_blocks,
        }
    }

    pub fn forecast_config(&self, seed: u64) -> ForecastTrainConfig {
        ForecastTrainConfig {
            batch_size: self.forecast.batch_size,
            epochs: self.forecast.epochs,
            train_fraction: self.forecast.train_fraction,
            lr: self.forecast.lr,
            seed,
            masked_loss_only: self.forecast.masked_loss_only,
            brainlm: self.brainlm_shape(),
        }
    }

    pub fn classify_config(&self, seed: u64) -> ClassifyTrainConfig {
        ClassifyTrainConfig {
            batch_size: self.classify.batch_size,
            epochs: self.classify.epochs,
            lr: self.classify.lr,
            seed,
            mode: AttentionMode::parse(&self.classify.attention).expect("validated"),
        }
    }

    pub fn matrix_config(&self, threads: usize) -> MatrixConfig {
        MatrixConfig {
            seeds: self.experiment.seeds.clone(),
            folds: self.experiment.folds,
            test_fraction: self.experiment.test_fraction,
            variants: self
                .experiment
                .variants
                .iter()
                .map(|v| VariantId::parse(v).expect("validated"))
                .collect(),
            reference: VariantId::parse(&self.experiment.reference).expect("validated"),
            significance: Significance::parse(&self.experiment.significance).expect("validated"),
            classify: self.classify_config(0),
            threads,
        }
    }

    pub fn interpret_scope(&self, seed: u64) -> EvalScope {
        match self.interpret.scope.as_str() {
            "holdout" => EvalScope::ForecastHoldout {
                seed,
                train_fraction: self.forecast.train_fraction,
            },
            _ => EvalScope::All,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_protocol_constants() {
        let c = RunConfig::default();
        assert_eq!(c.windows.window, 24);
        assert_eq!(c.windows.step, 4);
        assert_eq!(c.forecast.batch_size, 32);
        assert_eq!(c.forecast.epochs, 500);
        assert_eq!(c.classify.batch_size, 32);
        assert_eq!(c.classify.epochs, 800);
        assert_eq!(c.experiment.seeds.len(), 5);
        assert_eq!(c.experiment.folds, 5);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[forecast]\nnonsense = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn negative_epochs_rejected_at_parse() {
        let err = RunConfig::parse("[classify]\nepochs = -1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn invalid_values_rejected_with_message() {
        let err = RunConfig::parse("[experiment]\nreference = \"x\"\n").unwrap_err();
        assert!(err.to_string().contains("reference"));
        let err = RunConfig::parse("[windows]\nwindow = 23\n").unwrap_err();
        assert!(err.to_string().contains("24"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.classify.epochs = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let a = RunConfig::default();
        let b = RunConfig::parse(&a.canonical_toml()).unwrap();
        assert_eq!(a, b);
    }
}
