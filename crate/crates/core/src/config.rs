//! TOML configuration.
//!
//! Every key is optional; missing keys take the built-in defaults. Unknown
//! keys are rejected, and the error lists all of them by dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::backend::{make_linear_schedule, BackendOptions, DiffusionSchedule};
use crate::conditioner::DEFAULT_CONDITIONERS;
use crate::encoder::{EncoderConfig, PhaseSchedule, TrainOptions};
use crate::error::{Error, Result};
use crate::loss::{ConditionalTarget, Reduction};
use crate::pgd::{Init, PgdOptions};
use crate::types::{LossWeights, NoiseBudget, DEFAULT_RADIUS};

/// Pass this instead of a path to get the built-in configuration.
pub const DEFAULT_CONFIG: &str = "default";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { num_timesteps: 1000, beta_start: 0.00085, beta_end: 0.012 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub ids: Vec<String>,
    pub options: BackendOptions,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self { ids: vec!["toy:0".into()], options: BackendOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub conditioners: Vec<String>,
    pub reduction: Reduction,
    pub target: ConditionalTarget,
    pub num_samples: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            conditioners: DEFAULT_CONDITIONERS.iter().map(|s| s.to_string()).collect(),
            reduction: Reduction::Mean,
            target: ConditionalTarget::SelfReconstruction,
            num_samples: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub radius: f64,
    pub alpha: f64,
    pub steps: usize,
    pub weights: LossWeights,
    pub init: Init,
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        let o = PgdOptions::default();
        Self {
            radius: DEFAULT_RADIUS,
            alpha: 1e-3,
            steps: 300,
            weights: LossWeights::pgd_default(),
            init: o.init,
            eval_every: o.eval_every,
            eval_samples: o.eval_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub phases: PhaseSchedule,
    pub optimizer: TrainOptions,
    /// Clamp applied to encoder noise at protection time; none by default.
    pub clamp_radius: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { weights: LossWeights::encoder_default(), phases: PhaseSchedule::default(), optimizer: TrainOptions::default(), clamp_radius: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Identity scorer for ISM; ISM is skipped when unset.
    pub embedding_scorer: Option<String>,
    /// Quality scorer; skipped when unset.
    pub quality_scorer: Option<String>,
    /// Backend whose prediction error serves as the robustness probe; the
    /// first configured backend when unset.
    pub probe_backend: Option<String>,
    pub probe_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { embedding_scorer: None, quality_scorer: None, probe_backend: None, probe_samples: 8 }
    }
}

/// The resolved configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub backends: BackendsConfig,
    pub objective: ObjectiveConfig,
    pub augment: AugmentSpec,
    pub pgd: PgdConfig,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// A configuration with every optional field set, so that its serialized
    /// form names every accepted key.
    fn exemplar() -> Self {
        let mut c = Self::default();
        c.training.clamp_radius = Some(DEFAULT_RADIUS);
        c.training.optimizer.max_steps = Some(1);
        c.eval.embedding_scorer = Some(String::new());
        c.eval.quality_scorer = Some(String::new());
        c.eval.probe_backend = Some(String::new());
        c
    }

    pub fn validate(&self) -> Result<()> {
        let n_cond = self.objective.conditioners.len();
        for (name, w) in [("pgd.weights", &self.pgd.weights), ("training.weights", &self.training.weights)] {
            if w.w_con.len() != n_cond {
                return Err(Error::Config(format!("{name}.w_con has {} entries but {n_cond} conditioners are configured", w.w_con.len())));
            }
            w.validate()?;
        }
        if self.backends.ids.is_empty() {
            return Err(Error::Config("backends.ids must not be empty".into()));
        }
        if self.objective.num_samples == 0 {
            return Err(Error::Config("objective.num_samples must be >= 1".into()));
        }
        if self.eval.probe_samples == 0 {
            return Err(Error::Config("eval.probe_samples must be >= 1".into()));
        }
        if let Some(r) = self.training.clamp_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("training.clamp_radius must be positive, got {r}")));
            }
        }
        self.pgd_budget()?;
        self.diffusion_schedule()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.training.phases.validate()?;
        self.training.optimizer.validate()?;
        Ok(())
    }

    pub fn pgd_budget(&self) -> Result<NoiseBudget> {
        NoiseBudget::new(self.pgd.radius, self.pgd.alpha, self.pgd.steps)
    }

    pub fn pgd_options(&self) -> PgdOptions {
        PgdOptions { augment: self.augment.clone(), init: self.pgd.init, eval_every: self.pgd.eval_every, eval_samples: self.pgd.eval_samples }
    }

    pub fn diffusion_schedule(&self) -> Result<DiffusionSchedule> {
        let s = &self.schedule;
        make_linear_schedule(s.num_timesteps, s.beta_start, s.beta_end)
    }
}

/// Dotted paths of keys in `given` that `known` does not have. Arrays are not
/// descended into; their elements are checked during deserialization.
fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(path),
            Some(toml::Value::Table(kt)) => {
                if let toml::Value::Table(gt) = v {
                    unknown_keys(gt, kt, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

/// Parses configuration text. An empty string yields the defaults.
pub fn parse_config_str(text: &str) -> Result<Config> {
    let given: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let known = toml::Table::try_from(Config::exemplar()).map_err(|e| Error::Config(e.to_string()))?;
    let mut unknown = Vec::new();
    unknown_keys(&given, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Reads and validates a configuration file. [`DEFAULT_CONFIG`] selects the
/// built-in defaults.
pub fn parse_config(path: &str) -> Result<Config> {
    if path == DEFAULT_CONFIG {
        return Ok(Config::default());
    }
    let text = std::fs::read_to_string(Path::new(path)).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
