//! Experiment configuration files.
//!
//! A config is a flat TOML table. Every key is optional and falls back to the
//! desk-scale default; unknown keys are rejected. The resolved config
//! (defaults filled in) serializes back to TOML and parses to the same value.

use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::objectives::{Aggregation, ObjectiveKind, ObjectiveSpec};
use crate::ratios::ClipRange;
use crate::trainer::{OptimizerKind, TrainConfig};

/// Upper bound on sizes accepted from a file, so a hostile config cannot
/// request absurd allocations.
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Echo,
    SumMod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Objective used by `train`.
    pub objective: ObjectiveKind,
    /// Objectives compared by `compare`.
    pub objectives: Vec<ObjectiveKind>,

    pub env: EnvName,
    /// EchoEnv vocabulary size (EOS included).
    pub vocab_size: usize,
    /// SumModEnv base, digit count and reasoning budget.
    pub base: usize,
    pub digits: usize,
    pub reasoning_budget: usize,
    pub dataset_seed: u64,

    pub context_len: usize,
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub minibatch_count: usize,
    pub staleness: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerName,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub global_steps: usize,
    pub seed: u64,
    pub t_max: usize,

    /// Overrides of the per-objective clip defaults, applied to every
    /// objective that clips.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<Aggregation>,
    pub m2_budget: f64,
    pub filter_quantile: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::MinPro,
            objectives: vec![
                ObjectiveKind::Grpo,
                ObjectiveKind::Gspo,
                ObjectiveKind::Cispo,
                ObjectiveKind::M2po,
                ObjectiveKind::MinPro,
            ],
            env: EnvName::SumMod,
            vocab_size: 3,
            base: 4,
            digits: 3,
            reasoning_budget: 8,
            dataset_seed: 0,
            context_len: 3,
            prompts_per_batch: 64,
            group_size: 8,
            minibatch_count: 16,
            staleness: 0,
            learning_rate: 0.05,
            optimizer: OptimizerName::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 10,
            global_steps: 60,
            seed: 1,
            t_max: 16,
            eps_low: None,
            eps_high: None,
            aggregation: None,
            m2_budget: crate::objectives::M2_BUDGET,
            filter_quantile: crate::objectives::FILTER_QUANTILE,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file body.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved config as TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn environment(&self) -> Result<Environment> {
        match self.env {
            EnvName::Echo => Environment::echo(self.vocab_size, self.dataset_seed),
            EnvName::SumMod => {
                Environment::sum_mod(self.base, self.digits, self.reasoning_budget, self.dataset_seed)
            }
        }
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn objective_spec(&self, kind: ObjectiveKind) -> Result<ObjectiveSpec> {
        let mut spec = ObjectiveSpec::default_for(kind);
        if let Some(r) = spec.clip {
            let lo = self.eps_low.unwrap_or(r.eps_low);
            let hi = self.eps_high.unwrap_or(r.eps_high);
            spec.clip = Some(ClipRange::new(lo, hi).map_err(|e| Error::Config(e.to_string()))?);
        }
        if spec.m2_budget.is_some() {
            spec.m2_budget = Some(self.m2_budget);
        }
        if spec.filter_quantile.is_some() {
            spec.filter_quantile = Some(self.filter_quantile);
        }
        if let Some(a) = self.aggregation {
            if kind != ObjectiveKind::Gspo {
                spec.aggregation = a;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn train_config(&self, kind: ObjectiveKind) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            objective: self.objective_spec(kind)?,
            env: self.environment()?,
            context_len: self.context_len,
            prompts_per_batch: self.prompts_per_batch,
            group_size: self.group_size,
            minibatch_count: self.minibatch_count,
            staleness: self.staleness,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer_kind(),
            warmup_steps: self.warmup_steps,
            global_steps: self.global_steps,
            seed: self.seed,
            t_max: self.t_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("base", self.base),
            ("digits", self.digits),
            ("reasoning_budget", self.reasoning_budget),
            ("context_len", self.context_len),
            ("prompts_per_batch", self.prompts_per_batch),
            ("group_size", self.group_size),
            ("minibatch_count", self.minibatch_count),
            ("staleness", self.staleness),
            ("global_steps", self.global_steps),
            ("t_max", self.t_max),
        ];
        for (name, v) in dims {
            if v > MAX_DIM {
                return Err(Error::Config(format!("{name} = {v} exceeds {MAX_DIM}")));
            }
        }
        if self.objectives.is_empty() {
            return Err(Error::Config("objectives must not be empty".into()));
        }
        self.train_config(self.objective)?;
        for &kind in &self.objectives {
            self.objective_spec(kind)?;
        }
        Ok(())
    }
}
