use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conrt::DistanceSign;
use crate::corpus::SyntheticSpec;
use crate::encoders::ModelDims;
use crate::error::{Error, Result};
use crate::identifier::IdentifierConfig;
use crate::numeric::BackwardFault;
use crate::selfrl::SelfRLConfig;

/// Flat run configuration. Every key is optional in the file; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `external.jsonl` and `eci.jsonl`. When unset the
    /// synthetic corpus is generated in memory.
    pub corpus_dir: Option<PathBuf>,
    /// Teacher checkpoint written by `train-selfrl`. When unset, teachers
    /// are trained per seed as needed.
    pub teacher_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub dev_topics: usize,
    /// Variant for `evaluate` and `train-eci`.
    pub variant: String,
    /// Variants for `ablate`.
    pub variants: Vec<String>,
    /// Held-out fold for `train-eci`.
    pub test_fold: usize,

    pub vocab_size: usize,
    pub n_patterns: usize,
    pub n_external_statements: usize,
    pub n_eci_examples: usize,
    pub pattern_overlap: f64,
    pub noise_rate: f64,
    pub corpus_seed: u64,
    pub positive_fraction: f64,
    pub n_topics: usize,
    pub docs_per_topic: usize,

    pub d_emb: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub space: usize,
    pub provider_std: f64,

    pub selfrl_lr: f64,
    pub tau: f64,
    pub selfrl_batch_size: usize,
    pub selfrl_steps: usize,
    pub copy_init: bool,
    pub selfrl_weight_decay: f64,
    /// Write an intermediate teacher checkpoint every this many steps (0: never).
    pub checkpoint_every: usize,

    pub eci_lr: f64,
    pub eci_batch_size: usize,
    pub negative_keep_rate: f64,
    pub temperature: f64,
    pub external_batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub threshold: f64,
    pub eci_weight_decay: f64,
    pub distance_sign: DistanceSign,

    pub gradcheck_seeds: usize,
    pub gradcheck_step: f64,
    /// Inject a backward fault for the gradient check: `none`,
    /// `negate-log-softmax` or `tanh-as-identity`.
    pub gradcheck_fault: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticSpec::default();
        let dims = ModelDims::default();
        let srl = SelfRLConfig::default();
        let eci = IdentifierConfig::default();
        RunConfig {
            corpus_dir: None,
            teacher_checkpoint: None,
            out_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3],
            k: 5,
            dev_topics: crate::corpus::DEV_TOPICS,
            variant: "full".into(),
            variants: super::Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            test_fold: 0,
            vocab_size: syn.vocab_size,
            n_patterns: syn.n_patterns,
            n_external_statements: syn.n_external_statements,
            n_eci_examples: syn.n_eci_examples,
            pattern_overlap: syn.pattern_overlap,
            noise_rate: syn.noise_rate,
            corpus_seed: syn.seed,
            positive_fraction: syn.positive_fraction,
            n_topics: syn.n_topics,
            docs_per_topic: syn.docs_per_topic,
            d_emb: dims.d_emb,
            hidden: dims.hidden,
            head_hidden: dims.head_hidden,
            space: dims.space,
            provider_std: 0.1,
            selfrl_lr: srl.learning_rate,
            tau: srl.tau,
            selfrl_batch_size: srl.batch_size,
            selfrl_steps: srl.max_steps,
            copy_init: srl.copy_init,
            selfrl_weight_decay: srl.weight_decay,
            checkpoint_every: 0,
            eci_lr: eci.learning_rate,
            eci_batch_size: eci.batch_size,
            negative_keep_rate: eci.negative_keep_rate,
            temperature: eci.temperature,
            external_batch_size: eci.external_batch_size,
            patience: eci.patience,
            max_epochs: eci.max_epochs,
            threshold: eci.threshold,
            eci_weight_decay: eci.weight_decay,
            distance_sign: eci.distance_sign,
            gradcheck_seeds: 20,
            gradcheck_step: 1e-5,
            gradcheck_fault: "none".into(),
        }
    }
}

/// A manifest stores the config under this key; a config file may be either.
#[derive(Deserialize)]
struct ManifestConfig {
    config: RunConfig,
}

impl RunConfig {
    /// Reads a TOML config, or the `config` section of a JSON manifest.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str::<ManifestConfig>(&text)?.config
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        self.synthetic_spec().validate()?;
        self.dims().validate()?;
        self.selfrl_config(0).validate()?;
        self.identifier_config(0).validate()?;
        for v in &self.variants {
            v.parse::<super::Variant>()?;
        }
        self.variant.parse::<super::Variant>()?;
        self.fault()?;
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: self.vocab_size,
            n_patterns: self.n_patterns,
            n_external_statements: self.n_external_statements,
            n_eci_examples: self.n_eci_examples,
            pattern_overlap: self.pattern_overlap,
            noise_rate: self.noise_rate,
            seed: self.corpus_seed,
            positive_fraction: self.positive_fraction,
            n_topics: self.n_topics,
            docs_per_topic: self.docs_per_topic,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_emb: self.d_emb,
            hidden: self.hidden,
            head_hidden: self.head_hidden,
            space: self.space,
        }
    }

    pub fn selfrl_config(&self, seed: u64) -> SelfRLConfig {
        SelfRLConfig {
            learning_rate: self.selfrl_lr,
            tau: self.tau,
            batch_size: self.selfrl_batch_size,
            max_steps: self.selfrl_steps,
            seed,
            copy_init: self.copy_init,
            weight_decay: self.selfrl_weight_decay,
        }
    }

    pub fn identifier_config(&self, seed: u64) -> IdentifierConfig {
        IdentifierConfig {
            learning_rate: self.eci_lr,
            batch_size: self.eci_batch_size,
            negative_keep_rate: self.negative_keep_rate,
            temperature: self.temperature,
            external_batch_size: self.external_batch_size,
            patience: self.patience,
            max_epochs: self.max_epochs,
            threshold: self.threshold,
            weight_decay: self.eci_weight_decay,
            distance_sign: self.distance_sign,
            seed,
        }
    }

    pub fn fault(&self) -> Result<Option<BackwardFault>> {
        match self.gradcheck_fault.as_str() {
            "none" | "" => Ok(None),
            "negate-log-softmax" => Ok(Some(BackwardFault::NegateLogSoftmax)),
            "tanh-as-identity" => Ok(Some(BackwardFault::TanhAsIdentity)),
            other => Err(Error::InvalidConfig(format!("unknown gradcheck_fault {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("no_such_key = 1").is_err());
    }

    #[test]
    fn partial_override() {
        let cfg: RunConfig = toml::from_str("k = 2\nseeds = [7]\ndistance_sign = \"literal\"").unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.distance_sign, DistanceSign::Literal);
    }

    #[test]
    fn unknown_variant_is_rejected() {
        let cfg = RunConfig {
            variants: vec!["full".into(), "bogus".into()],
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::UnknownVariant(_))));
    }
}
