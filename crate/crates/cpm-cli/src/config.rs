//! Run configuration: one TOML document with namespaced sections, every key
//! mirroring a library config field. Unknown keys are rejected, defaults
//! fill the gaps, and the fully resolved document is echoed into each run's
//! output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cpm_core::attribution::IgConfig;
use cpm_core::error::{CoreError, Result};
use cpm_core::eval::DistMetric;
use cpm_core::explain::{GroupKeyMode, SLearnerConfig};
use cpm_core::model::EncoderConfig;
use cpm_core::scm::{PairStrategy, ScmConfig, VocabLayout};
use cpm_core::train::{LossWeights, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scm: ScmSection,
    pub model: EncoderConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ig: IgConfig,
}

/// Generator parameters plus split sizes and the pair-building strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScmSection {
    pub k: usize,
    pub vocab_noise: usize,
    pub tokens_per_concept_value: usize,
    pub seq_len: usize,
    pub concept_priors: Vec<[f64; 3]>,
    pub label_noise: f64,
    pub emit_prob: f64,
    pub p_style: f64,
    pub null_rate: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub pair_strategy: PairStrategy,
    pub seed: u64,
}

impl Default for ScmSection {
    fn default() -> Self {
        let scm = ScmConfig::default();
        Self {
            k: scm.k,
            vocab_noise: scm.vocab_noise,
            tokens_per_concept_value: scm.tokens_per_concept_value,
            seq_len: scm.seq_len,
            concept_priors: scm.concept_priors,
            label_noise: scm.label_noise,
            emit_prob: scm.emit_prob,
            p_style: scm.p_style,
            null_rate: scm.null_rate,
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            pair_strategy: PairStrategy::HumanLike,
            seed: 0,
        }
    }
}

impl ScmSection {
    pub fn scm_config(&self) -> ScmConfig {
        ScmConfig {
            k: self.k,
            vocab_noise: self.vocab_noise,
            tokens_per_concept_value: self.tokens_per_concept_value,
            seq_len: self.seq_len,
            concept_priors: self.concept_priors.clone(),
            label_noise: self.label_noise,
            emit_prob: self.emit_prob,
            p_style: self.p_style,
            null_rate: self.null_rate,
        }
    }
}

/// Optimization schedule plus loss-term weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_interval_steps: usize,
    pub patience: usize,
    pub seed: u64,
    pub mimic_weight: f64,
    pub intervention_weight: f64,
    pub interchange_weight: f64,
    pub multi_weight: f64,
    pub temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        let weights = LossWeights::default();
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            eval_interval_steps: cfg.eval_interval_steps,
            patience: cfg.patience,
            seed: cfg.seed,
            mimic_weight: weights.mimic,
            intervention_weight: weights.intervention,
            interchange_weight: weights.interchange,
            multi_weight: weights.multi,
            temperature: weights.temperature,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            eval_interval_steps: self.eval_interval_steps,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mimic: self.mimic_weight,
            intervention: self.intervention_weight,
            interchange: self.interchange_weight,
            multi: self.multi_weight,
            temperature: self.temperature,
        }
    }
}

/// Benchmark settings: estimate-time seeds, requested explainers and
/// distances, and the group-mean / regression baseline knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub explainers: Vec<String>,
    pub metrics: Vec<String>,
    pub group_mode: GroupKeyMode,
    pub slearner_iterations: usize,
    pub slearner_learning_rate: f64,
    pub slearner_temperature: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let sl = SLearnerConfig::default();
        Self {
            seeds: vec![0],
            explainers: vec![
                "cpm-in".into(),
                "cpm-hi-gold".into(),
                "slearner".into(),
                "approx".into(),
                "random".into(),
                "cace".into(),
                "ate".into(),
            ],
            metrics: DistMetric::ALL.iter().map(|m| m.to_string()).collect(),
            group_mode: GroupKeyMode::default(),
            slearner_iterations: sl.iterations,
            slearner_learning_rate: sl.learning_rate,
            slearner_temperature: sl.temperature,
        }
    }
}

impl EvalSection {
    pub fn slearner_config(&self) -> SLearnerConfig {
        SLearnerConfig {
            iterations: self.slearner_iterations,
            learning_rate: self.slearner_learning_rate,
            temperature: self.slearner_temperature,
        }
    }

    pub fn parsed_metrics(&self) -> Result<Vec<DistMetric>> {
        if self.metrics.is_empty() {
            return Err(CoreError::Config("at least one metric is required".into()));
        }
        self.metrics.iter().map(|m| m.parse()).collect()
    }
}

impl RunConfig {
    /// Reads a TOML config; a missing path yields defaults only when `path`
    /// is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Replaces every seed in the document (generation, training, and all
    /// estimate-time draws).
    pub fn override_seed(&mut self, seed: u64) {
        self.scm.seed = seed;
        self.train.seed = seed;
        self.eval.seeds = vec![seed];
    }

    /// Fills derived fields and validates the whole document. The model's
    /// vocabulary size is owned by the token layout: an explicit value must
    /// match it, and the stock default is silently replaced.
    pub fn resolve(&mut self) -> Result<()> {
        let scm = self.scm.scm_config();
        scm.validate()?;
        let layout = VocabLayout::from_config(&scm);
        let expected = layout.vocab_size();
        let stock = EncoderConfig::default().vocab_size;
        if self.model.vocab_size != expected && self.model.vocab_size != stock {
            return Err(CoreError::Config(format!(
                "model.vocab_size = {} conflicts with the token layout's {expected}; \
                 omit the key to let the layout decide",
                self.model.vocab_size
            )));
        }
        self.model.vocab_size = expected;
        self.model.validate()?;
        self.train.train_config().validate()?;
        self.train.loss_weights().validate()?;
        if self.eval.seeds.is_empty() {
            return Err(CoreError::Config("eval.seeds must not be empty".into()));
        }
        if self.eval.explainers.is_empty() {
            return Err(CoreError::Config("eval.explainers must not be empty".into()));
        }
        self.eval.parsed_metrics()?;
        self.ig.validate(self.model.classes)?;
        Ok(())
    }

    /// The resolved document as TOML, as echoed into output directories.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CoreError::Format(format!("cannot serialize config: {e}")))
    }
}
