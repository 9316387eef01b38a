//! Two-phase encoder training.
//!
//! Phase 1 trains against a fixed objective. Phase 2 resamples the active
//! backend from a pool every `switch_interval` steps and refreshes the
//! conditional weights with [`perturb_condition_weights`]. The encoder
//! minimizes `-J` with Adam and global gradient-norm clipping.
//!
//! Every random draw is a function of `(seed, step)`, so a run interrupted
//! after step `k` and resumed from a checkpoint reproduces the same steps.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, AneEncoder};
use crate::augment::{apply_augment, AugmentSpec};
use crate::backend::NoisePredictor;
use crate::conditioner::perturb_condition_weights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::loss::Objective;
use crate::types::{ImageTensor, LossWeights};

/// Stream offset for switch-event draws, kept apart from per-step streams.
const SWITCH_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub switch_interval: u64,
    /// Backend identifiers sampled from in phase 2.
    pub backend_pool: Vec<String>,
    pub weight_perturb_range: (f64, f64),
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            phase1_steps: 1000,
            phase2_steps: 1000,
            switch_interval: 1000,
            backend_pool: vec!["toy:0".into(), "toy:0~1".into(), "toy:0~2".into()],
            weight_perturb_range: (0.5, 1.5),
        }
    }
}

impl PhaseSchedule {
    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.switch_interval < 1 {
            return Err(Error::invalid("phase schedule", "switch_interval must be >= 1"));
        }
        if self.phase2_steps > 0 && self.backend_pool.is_empty() {
            return Err(Error::invalid("phase schedule", "backend_pool must be non-empty when phase2_steps > 0"));
        }
        let (lo, hi) = self.weight_perturb_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("phase schedule", format!("weight_perturb_range needs 0 < lo <= hi, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub learning_rate: f64,
    /// Inverse-time decay: `lr_t = lr / (1 + decay * t)`.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm threshold; `0` disables clipping.
    pub grad_clip: f64,
    /// Stop after this many steps in this call, even if the schedule is not done.
    pub max_steps: Option<u64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { learning_rate: 1e-3, lr_decay: 1e-4, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8, batch_size: 8, grad_clip: 1.0, max_steps: None }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.learning_rate) || !pos(self.adam_eps) {
            return Err(Error::invalid("train options", "learning_rate and adam_eps must be positive"));
        }
        if !(self.lr_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::invalid("train options", "lr_decay and grad_clip must be >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("train options", "betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train options", "batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One optimizer step. Objective components are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: u64,
    pub phase: u8,
    pub backend: String,
    pub objective: f64,
    pub unconditional: f64,
    pub conditional: Vec<f64>,
    pub regularization: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub noise_mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    PhaseStart { step: u64, phase: u8 },
    BackendSwitch { step: u64, backend: String },
    WeightRefresh { step: u64, w_con: Vec<f64> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
    pub events: Vec<TrainEvent>,
}

impl TrainLog {
    pub fn switch_steps(&self) -> Vec<u64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TrainEvent::BackendSwitch { step, .. } => Some(*step),
                _ => None,
            })
            .collect()
    }
}

/// Backend and weights in force at a given step.
struct ActiveSetup {
    backend: Arc<dyn NoisePredictor>,
    weights: LossWeights,
}

/// Draws the setup chosen at the phase-2 switch event with local index `k`.
fn switch_setup(pool: &[Arc<dyn NoisePredictor>], base: &LossWeights, range: (f64, f64), seed: u64, k: u64) -> Result<ActiveSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SWITCH_STREAM + k);
    let backend = pool[rng.random_range(0..pool.len())].clone();
    let weights = perturb_condition_weights(base, &mut rng, range)?;
    Ok(ActiveSetup { backend, weights })
}

fn resolve_pool(ids: &[String], available: &[Arc<dyn NoisePredictor>]) -> Result<Vec<Arc<dyn NoisePredictor>>> {
    ids.iter().map(|id| available.iter().find(|b| b.id() == id).cloned().ok_or_else(|| Error::Unknown { kind: "backend", id: id.clone() })).collect()
}

/// Trains `encoder` in place from its current step to the end of `phases`.
///
/// `objective` fixes the phase-1 backends, conditioners and base weights.
/// Phase-2 backends are looked up by id in `available`. On divergence the
/// encoder keeps the parameters of the last good step and
/// [`Error::Diverged`] is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_ane(
    encoder: &mut AneEncoder,
    dataset: &[ImageTensor],
    objective: &Objective,
    augment: &AugmentSpec,
    phases: &PhaseSchedule,
    available: &[Arc<dyn NoisePredictor>],
    options: &TrainOptions,
    seed: u64,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    train_ane_into(encoder, dataset, objective, augment, phases, available, options, seed, &mut log)?;
    Ok(log)
}

/// [`train_ane`] appending to `log`, which keeps the entries of completed
/// steps when training stops with an error.
#[allow(clippy::too_many_arguments)]
pub fn train_ane_into(
    encoder: &mut AneEncoder,
    dataset: &[ImageTensor],
    objective: &Objective,
    augment: &AugmentSpec,
    phases: &PhaseSchedule,
    available: &[Arc<dyn NoisePredictor>],
    options: &TrainOptions,
    seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("training", "dataset is empty"));
    }
    for img in dataset {
        encoder.check_resolution(&img.shape())?;
    }
    phases.validate()?;
    options.validate()?;
    augment.validate()?;
    let pool = if phases.phase2_steps > 0 { resolve_pool(&phases.backend_pool, available)? } else { Vec::new() };

    let total = phases.total_steps();
    let end = match options.max_steps {
        Some(n) => total.min(encoder.step + n),
        None => total,
    };
    let mut adam = encoder.adam.take().unwrap_or_else(|| AdamState {
        t: 0,
        m: encoder.params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
        v: encoder.params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
    });
    let phase1 = ActiveSetup { backend: objective.backends[0].clone(), weights: objective.weights.clone() };
    let mut active: Option<ActiveSetup> = None;

    let result = (|| -> Result<()> {
        for step in encoder.step..end {
            let (phase, setup) = if step < phases.phase1_steps {
                if step == 0 {
                    log.events.push(TrainEvent::PhaseStart { step, phase: 1 });
                }
                (1u8, &phase1)
            } else {
                let local = step - phases.phase1_steps;
                if local == 0 {
                    log.events.push(TrainEvent::PhaseStart { step, phase: 2 });
                }
                let k = local / phases.switch_interval;
                if local.is_multiple_of(phases.switch_interval) || active.is_none() {
                    let s = switch_setup(&pool, &objective.weights, phases.weight_perturb_range, seed, k)?;
                    if local.is_multiple_of(phases.switch_interval) {
                        log.events.push(TrainEvent::BackendSwitch { step, backend: s.backend.id().to_string() });
                        log.events.push(TrainEvent::WeightRefresh { step, w_con: s.weights.w_con.clone() });
                    }
                    active = Some(s);
                }
                (2u8, active.as_ref().expect("set above"))
            };

            let mut obj = objective.clone();
            if phase == 2 {
                obj.backends = vec![setup.backend.clone()];
            }
            obj.weights = setup.weights.clone();

            let record = train_step(encoder, &mut adam, dataset, &obj, augment, options, seed, step)?;
            log.steps.push(TrainStep { phase, backend: setup.backend.id().to_string(), ..record });
        }
        Ok(())
    })();
    encoder.adam = Some(adam);
    result
}

/// Runs one batch and updates the parameters. Leaves them untouched if the
/// objective or any gradient is non-finite.
#[allow(clippy::too_many_arguments)]
fn train_step(
    encoder: &mut AneEncoder,
    adam: &mut AdamState,
    dataset: &[ImageTensor],
    objective: &Objective,
    augment: &AugmentSpec,
    options: &TrainOptions,
    seed: u64,
    step: u64,
) -> Result<TrainStep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let diverged = || Error::Diverged { step: step as usize, last_good: encoder.step };

    let n = options.batch_size as f64;
    let mut grads: Vec<Tensor> = encoder.params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect();
    let mut rec = TrainStep {
        step,
        phase: 0,
        backend: String::new(),
        objective: 0.0,
        unconditional: 0.0,
        conditional: vec![0.0; objective.conditioners.len()],
        regularization: 0.0,
        grad_norm: 0.0,
        noise_mean_abs: 0.0,
    };
    for _ in 0..options.batch_size {
        let image = &dataset[rng.random_range(0..dataset.len())];
        let mut g = Graph::new();
        let params = encoder.param_vars(&mut g);
        let x = g.constant(image.to_tensor());
        let noise = encoder.forward_graph(&mut g, x, &params)?;
        let sum = g.add(x, noise);
        let protected = g.clamp(sum, 0.0, 1.0);
        let (attacked, _) = apply_augment(&mut g, protected, augment, &mut rng)?;
        let draws = objective.sample_draws(&mut rng, image.len());
        let terms = objective.build(&mut g, attacked, protected, image, &draws)?;
        let v = terms.values(&g);
        if !v.total.is_finite() {
            return Err(diverged());
        }
        rec.objective += v.total / n;
        rec.unconditional += v.unconditional / n;
        for (acc, c) in rec.conditional.iter_mut().zip(&v.conditional) {
            *acc += c / n;
        }
        rec.regularization += v.regularization / n;
        let nv = g.value(noise);
        rec.noise_mean_abs += nv.data.iter().map(|a| a.abs()).sum::<f64>() / nv.len() as f64 / n;

        let mut gr = g.backward(terms.total);
        for (acc, &p) in grads.iter_mut().zip(&params) {
            let d = gr.take(p);
            for (a, b) in acc.data.iter_mut().zip(&d.data) {
                // descend -J
                *a -= b / n;
            }
        }
    }

    let norm = grads.iter().flat_map(|t| &t.data).map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(diverged());
    }
    rec.grad_norm = norm;
    let clip = if options.grad_clip > 0.0 && norm > options.grad_clip { options.grad_clip / norm } else { 1.0 };

    adam.t += 1;
    let t = adam.t as f64;
    let lr = options.learning_rate / (1.0 + options.lr_decay * step as f64);
    let (b1, b2) = (options.beta1, options.beta2);
    let (c1, c2) = (1.0 - b1.powf(t), 1.0 - b2.powf(t));
    for (((p, g), m), v) in encoder.params.iter_mut().zip(&grads).zip(&mut adam.m).zip(&mut adam.v) {
        for i in 0..p.data.len() {
            let gi = g.data[i] * clip;
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + options.adam_eps);
        }
    }
    encoder.step = step + 1;
    Ok(rec)
}
