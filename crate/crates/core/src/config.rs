//! Run configuration: a sectioned plain-text (TOML) file in which every
//! field has a default and unknown keys are hard errors — a silent typo
//! in epsilon or tau would invalidate an experiment.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::seeding::fnv1a;
use crate::synth::{DatasetSpec, EncoderDims};
use crate::trainer::{SeedBlock, TrainConfig};

/// Dataset shape; the generation seed comes from `[seeds] data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_classes: usize,
    pub image_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DatasetSection {
            n_classes: d.n_classes,
            image_dim: d.image_dim,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            noise_sigma: d.noise_sigma,
        }
    }
}

/// Encoder widths; the image dimension is taken from `[dataset]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub token_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderDims::default();
        EncoderSection { hidden_dim: d.hidden_dim, feature_dim: d.feature_dim, token_dim: d.token_dim }
    }
}

/// Evaluation attack and sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// L∞ budget at evaluation; defaults to the training budget
    pub epsilon: Option<f64>,
    pub pgd_steps: usize,
    /// seeds per cell in the sweep/ablation recipes
    pub n_seeds: usize,
    /// world seed of the foreign dataset in the transfer recipe
    pub transfer_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { epsilon: None, pgd_steps: 20, n_seeds: 5, transfer_seed: 9090 }
    }
}

/// The complete run configuration. A fully-defaulted config runs end to
/// end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub seeds: SeedBlock,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.train.validate()?;
        self.eval_attack().validate()?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_classes: self.dataset.n_classes,
            image_dim: self.dataset.image_dim,
            train_per_class: self.dataset.train_per_class,
            test_per_class: self.dataset.test_per_class,
            noise_sigma: self.dataset.noise_sigma,
            seed: self.seeds.data,
        }
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            image_dim: self.dataset.image_dim,
            hidden_dim: self.encoder.hidden_dim,
            feature_dim: self.encoder.feature_dim,
            token_dim: self.encoder.token_dim,
        }
    }

    /// Random-start PGD with step ε/4, per the evaluation protocol.
    pub fn eval_attack(&self) -> AttackConfig {
        let epsilon = self.eval.epsilon.unwrap_or(self.train.attack.epsilon);
        AttackConfig::eval_default(epsilon, self.eval.pgd_steps)
    }

    /// Fingerprint of the full producing configuration (seeds included).
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }

    /// Fingerprint with the training attack neutralized; standard- and
    /// adversarially-trained runs of the same setup share this key.
    pub fn pair_key(&self) -> u64 {
        let mut c = self.clone();
        c.train.attack = AttackConfig { epsilon: 0.0, steps: 0, step_size: 1.0, random_start: false };
        fnv1a(c.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = RunConfig::from_toml_str("[train]\nepislon = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("epislon"), "{err}");
        let err = RunConfig::from_toml_str("[nosuchsection]\nx = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partial_sections_use_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nepochs = 3\n[seeds]\ndata = 99\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
        assert_eq!(cfg.seeds.data, 99);
        assert_eq!(cfg.dataset_spec().seed, 99);
    }

    #[test]
    fn pair_key_ignores_training_attack_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.attack.epsilon = 0.0;
        b.train.attack.steps = 0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.pair_key(), b.pair_key());
        let mut c = a.clone();
        c.train.prompt_count = 1;
        assert_ne!(a.pair_key(), c.pair_key());
    }

    #[test]
    fn eval_attack_inherits_train_epsilon() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.eval_attack().epsilon, cfg.train.attack.epsilon);
        let with = RunConfig::from_toml_str("[eval]\nepsilon = 0.05\n").unwrap();
        assert_eq!(with.eval_attack().epsilon, 0.05);
        assert!(with.eval_attack().random_start);
    }
}
