//! Iterative protector: signed-gradient ascent on the objective with
//! l-infinity projection around the original image.
//!
//! ```text
//! I_adv <- Proj_{I, r}( I_adv + step * sign(dJ/dI_adv) )
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augment, AugmentSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{Objective, ObjectiveDraws};
use crate::types::{clamp_to_pixel_range, ImageTensor, Method, NoiseBudget, Perturbation, ProtectionRecord};

/// Slack allowed on the ball invariant.
pub const BALL_TOLERANCE: f64 = 1e-6;

/// Clamps `candidate` into `[original - radius, original + radius]`, then into
/// `[0, 1]`.
pub fn project_linf(candidate: &[f64], original: &ImageTensor, radius: f64) -> Result<ImageTensor> {
    if candidate.len() != original.len() {
        return Err(Error::LengthMismatch { what: "candidate", expected: original.len(), actual: candidate.len() });
    }
    let projected: Vec<f64> = candidate.iter().zip(original.data()).map(|(&c, &o)| c.clamp(o - radius, o + radius)).collect();
    clamp_to_pixel_range(original.height(), original.width(), &projected)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step: `project(current + step * sign(gradient))`. `sign(0) = 0`.
pub fn pgd_step(current: &[f64], gradient: &[f64], original: &ImageTensor, budget: &NoiseBudget) -> Result<ImageTensor> {
    if gradient.len() != current.len() {
        return Err(Error::LengthMismatch { what: "gradient", expected: current.len(), actual: gradient.len() });
    }
    if let Some(index) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::GradientOverflow { index });
    }
    let moved: Vec<f64> = current.iter().zip(gradient).map(|(&x, &g)| x + budget.step * sign(g)).collect();
    project_linf(&moved, original, budget.radius)
}

/// Starting point of the iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Original,
    /// Uniform in the ball, then projected.
    RandomInBall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdOptions {
    pub augment: AugmentSpec,
    pub init: Init,
    /// Evaluate the frozen objective every this many steps; 0 disables it.
    pub eval_every: usize,
    /// Monte-Carlo draws per term in the frozen evaluation set.
    pub eval_samples: usize,
}

impl Default for PgdOptions {
    fn default() -> Self {
        Self { augment: AugmentSpec::default(), init: Init::Original, eval_every: 25, eval_samples: 8 }
    }
}

/// What an observer sees after each step.
pub struct StepInfo<'a> {
    /// 1-based index of the step just taken.
    pub step: usize,
    /// Stochastic objective at the image the step started from.
    pub objective: f64,
    pub image: &'a ImageTensor,
}

/// A PGD run in progress. Steps can be taken one batch at a time; the record is
/// produced by [`PgdRun::finish`].
pub struct PgdRun<'a> {
    objective: &'a Objective,
    budget: NoiseBudget,
    options: PgdOptions,
    seed: u64,
    original: ImageTensor,
    current: ImageTensor,
    rng: ChaCha8Rng,
    eval_draws: Option<ObjectiveDraws>,
    step: usize,
    objective_trace: Vec<(usize, f64)>,
    eval_trace: Vec<(usize, f64)>,
}

impl<'a> PgdRun<'a> {
    pub fn new(image: &ImageTensor, objective: &'a Objective, budget: NoiseBudget, options: PgdOptions, seed: u64) -> Result<Self> {
        budget.validate()?;
        options.augment.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = match options.init {
            Init::Original => image.clone(),
            Init::RandomInBall => {
                let r = budget.radius;
                let start: Vec<f64> = image.data().iter().map(|&v| v + rng.random_range(-r..=r)).collect();
                project_linf(&start, image, r)?
            }
        };
        let eval_draws = (options.eval_every > 0).then(|| {
            let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
            eval_rng.set_stream(1);
            objective.sample_draws_n(&mut eval_rng, image.len(), options.eval_samples.max(1))
        });
        let mut run = Self {
            objective,
            budget,
            options,
            seed,
            original: image.clone(),
            current,
            rng,
            eval_draws,
            step: 0,
            objective_trace: Vec::with_capacity(budget.iterations + 1),
            eval_trace: Vec::new(),
        };
        run.record_eval()?;
        Ok(run)
    }

    pub fn current(&self) -> &ImageTensor {
        &self.current
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn objective_trace(&self) -> &[(usize, f64)] {
        &self.objective_trace
    }

    pub fn eval_trace(&self) -> &[(usize, f64)] {
        &self.eval_trace
    }

    /// Frozen-set objective at the current image, or `None` when disabled.
    pub fn eval_objective(&self) -> Result<Option<f64>> {
        match &self.eval_draws {
            Some(d) => Ok(Some(self.objective.evaluate(&self.current, &self.original, d)?.total)),
            None => Ok(None),
        }
    }

    fn record_eval(&mut self) -> Result<()> {
        if let Some(v) = self.eval_objective()? {
            self.eval_trace.push((self.step, v));
        }
        Ok(())
    }

    /// Stochastic objective at the current image, with its gradient when
    /// `with_grad` is set.
    fn sample_objective(&mut self, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let draws = self.objective.sample_draws(&mut self.rng, self.current.len());
        let mut g = Graph::new();
        let x = if with_grad { g.param(self.current.to_tensor()) } else { g.constant(self.current.to_tensor()) };
        let (attacked, _) = apply_augment(&mut g, x, &self.options.augment, &mut self.rng)?;
        let terms = self.objective.build(&mut g, attacked, x, &self.original, &draws)?;
        let j = g.scalar(terms.total);
        if !j.is_finite() {
            return Err(Error::NonFiniteObjective { step: self.step });
        }
        if !with_grad {
            return Ok((j, Vec::new()));
        }
        let mut grads = g.backward(terms.total);
        Ok((j, grads.take(x).data))
    }

    /// Takes `n` steps, calling `observer` after each one.
    pub fn run_steps(&mut self, n: usize, mut observer: impl FnMut(&StepInfo)) -> Result<()> {
        for _ in 0..n {
            let (j, grad) = self.sample_objective(true)?;
            let next = pgd_step(self.current.data(), &grad, &self.original, &self.budget)?;
            let dist = next.linf_distance(&self.original)?;
            if dist > self.budget.radius + BALL_TOLERANCE {
                return Err(Error::Invariant(format!("step {} left the ball: {dist}", self.step + 1)));
            }
            self.objective_trace.push((self.step, j));
            self.current = next;
            self.step += 1;
            if self.options.eval_every > 0 && self.step.is_multiple_of(self.options.eval_every) {
                self.record_eval()?;
            }
            observer(&StepInfo { step: self.step, objective: j, image: &self.current });
        }
        Ok(())
    }

    /// Closes the trace with the stochastic objective at the final image and
    /// builds the record.
    pub fn finish(mut self) -> Result<ProtectionRecord> {
        let (j, _) = self.sample_objective(false)?;
        self.objective_trace.push((self.step, j));
        if self.options.eval_every > 0 && !self.step.is_multiple_of(self.options.eval_every) {
            self.record_eval()?;
        }
        let mut budget = self.budget;
        budget.iterations = self.step;
        let perturbation = Perturbation::between(&self.original, &self.current, Some(self.budget.radius))?;
        let record = ProtectionRecord {
            original: self.original,
            perturbation,
            protected: self.current,
            method: Method::Pgd,
            seed: self.seed,
            budget,
            objective_trace: self.objective_trace,
            eval_trace: self.eval_trace,
            backend_ids: self.objective.backend_ids(),
            forward_calls: 0,
        };
        record.check_consistency()?;
        Ok(record)
    }
}

/// Runs `budget.iterations` steps from `image` and returns the record.
pub fn pgd_protect(image: &ImageTensor, objective: &Objective, budget: NoiseBudget, options: PgdOptions, seed: u64) -> Result<ProtectionRecord> {
    pgd_protect_observed(image, objective, budget, options, seed, |_| {})
}

/// [`pgd_protect`] with a per-step observer.
pub fn pgd_protect_observed(
    image: &ImageTensor,
    objective: &Objective,
    budget: NoiseBudget,
    options: PgdOptions,
    seed: u64,
    observer: impl FnMut(&StepInfo),
) -> Result<ProtectionRecord> {
    let mut run = PgdRun::new(image, objective, budget, options, seed)?;
    run.run_steps(budget.iterations, observer)?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::backend::{make_toy_backend, DiffusionSchedule, NoisePredictor};
    use crate::conditioner::ConditionerRegistry;
    use crate::types::{LossWeights, DEFAULT_RADIUS};
    use proptest::prelude::*;

    fn objective(weights: LossWeights, conditioners: usize) -> Objective {
        let backend: Arc<dyn NoisePredictor> = Arc::new(make_toy_backend(1, 8).unwrap());
        let specs = ConditionerRegistry::with_defaults().specs()[..conditioners].to_vec();
        Objective::new(vec![backend], specs, weights, DiffusionSchedule::default()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let orig = ImageTensor::uniform(1, 1, 0.5).unwrap();
        let out = project_linf(&[0.58; 3], &orig, DEFAULT_RADIUS).unwrap();
        assert!((out.data()[0] - 0.550_980_392_156_862_7).abs() < 1e-12);
        assert!((out.data()[0] - 0.55098).abs() < 1e-5);

        let zero = ImageTensor::uniform(1, 1, 0.0).unwrap();
        let out = project_linf(&[-0.04; 3], &zero, DEFAULT_RADIUS).unwrap();
        assert_eq!(out.data(), &[0.0; 3]);

        let img = ImageTensor::random(3, 3, 1);
        let inside: Vec<f64> = img.data().iter().map(|v| (v + 0.01).min(1.0)).collect();
        assert_eq!(project_linf(&inside, &img, DEFAULT_RADIUS).unwrap().data(), &inside[..]);
    }

    #[test]
    fn step_examples() {
        let budget = NoiseBudget::default();
        let img = ImageTensor::uniform(2, 2, 0.4).unwrap();
        let zero = vec![0.0; img.len()];
        assert_eq!(pgd_step(img.data(), &zero, &img, &budget).unwrap(), img);

        let up = vec![1.0; img.len()];
        let one = pgd_step(img.data(), &up, &img, &budget).unwrap();
        assert!(one.data().iter().all(|&v| (v - 0.401).abs() < 1e-15));

        let mut cur = img.clone();
        for _ in 0..300 {
            cur = pgd_step(cur.data(), &up, &img, &budget).unwrap();
        }
        assert!(cur.data().iter().all(|&v| (v - (0.4 + 13.0 / 255.0)).abs() < 1e-12));
    }

    #[test]
    fn non_finite_gradient_is_overflow() {
        let img = ImageTensor::uniform(2, 2, 0.4).unwrap();
        let mut grad = vec![1.0; img.len()];
        grad[5] = f64::NAN;
        let err = pgd_step(img.data(), &grad, &img, &NoiseBudget::default()).unwrap_err();
        assert!(matches!(err, Error::GradientOverflow { index: 5 }));
        assert!(err.to_string().contains("gradient overflow"));
    }

    #[test]
    fn zero_steps_leave_image_unchanged() {
        let obj = objective(LossWeights::new(1.0, vec![], 0.0).unwrap(), 0);
        let img = ImageTensor::random(8, 8, 2);
        let run = PgdRun::new(&img, &obj, NoiseBudget::default(), PgdOptions::default(), 0).unwrap();
        let rec = run.finish().unwrap();
        assert_eq!(rec.protected, img);
        assert_eq!(rec.objective_trace.len(), 1);
    }

    #[test]
    fn regularization_alone_is_stationary() {
        // Validation insists on an attack weight, so set the fields directly.
        let mut obj = objective(LossWeights::new(1.0, vec![1.0], 0.0).unwrap(), 1);
        obj.weights = LossWeights { w_adv: 0.0, w_con: vec![0.0], w_reg: 5.0 };
        let img = ImageTensor::random(8, 8, 3);
        let budget = NoiseBudget::new(DEFAULT_RADIUS, 1e-3, 30).unwrap();
        let rec = pgd_protect(&img, &obj, budget, PgdOptions::default(), 0).unwrap();
        assert_eq!(rec.protected, img);
    }

    #[test]
    fn run_is_deterministic_and_respects_ball() {
        let obj = objective(LossWeights::new(3.0, vec![5.0], 0.0).unwrap(), 1);
        let img = ImageTensor::pattern(16, 16, 4);
        let budget = NoiseBudget::new(DEFAULT_RADIUS, 5e-3, 20).unwrap();
        let mut worst: f64 = 0.0;
        let a = pgd_protect_observed(&img, &obj, budget, PgdOptions::default(), 9, |s| {
            worst = worst.max(s.image.linf_distance(&img).unwrap());
        })
        .unwrap();
        let b = pgd_protect(&img, &obj, budget, PgdOptions::default(), 9).unwrap();
        assert!(worst <= DEFAULT_RADIUS + BALL_TOLERANCE);
        assert_eq!(a.protected, b.protected);
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.eval_trace, b.eval_trace);
        assert_eq!(a.objective_trace.len(), 21);
        a.check_consistency().unwrap();
        let c = pgd_protect(&img, &obj, budget, PgdOptions::default(), 10).unwrap();
        assert_ne!(a.protected, c.protected);
    }

    #[test]
    fn random_start_lies_in_ball() {
        let obj = objective(LossWeights::new(1.0, vec![], 0.0).unwrap(), 0);
        let img = ImageTensor::random(8, 8, 5);
        let opts = PgdOptions { init: Init::RandomInBall, ..PgdOptions::default() };
        let run = PgdRun::new(&img, &obj, NoiseBudget::default(), opts, 1).unwrap();
        let d = run.current().linf_distance(&img).unwrap();
        assert!(d > 0.0 && d <= DEFAULT_RADIUS + BALL_TOLERANCE);
    }

    #[test]
    fn frozen_objective_rises() {
        let obj = objective(LossWeights::new(3.0, vec![5.0], 0.0).unwrap(), 1);
        let img = ImageTensor::pattern(16, 16, 6);
        let budget = NoiseBudget::new(DEFAULT_RADIUS, 2e-3, 50).unwrap();
        let opts = PgdOptions { augment: AugmentSpec::identity(), ..PgdOptions::default() };
        let rec = pgd_protect(&img, &obj, budget, opts, 3).unwrap();
        let (first, last) = (rec.eval_trace[0].1, rec.eval_trace.last().unwrap().1);
        assert!(last > first, "{first} -> {last}");
        assert_eq!(rec.eval_trace.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 25, 50]);
    }

    proptest! {
        #[test]
        fn step_stays_in_ball(
            seed in 0u64..1000,
            radius in 1e-3f64..0.2,
            step in 1e-4f64..0.1,
            grad in proptest::collection::vec(-1.0f64..1.0, 12),
        ) {
            let img = ImageTensor::random(2, 2, seed);
            let budget = NoiseBudget::new(radius, step, 1).unwrap();
            let mut cur = img.clone();
            for _ in 0..5 {
                cur = pgd_step(cur.data(), &grad, &img, &budget).unwrap();
                prop_assert!(cur.linf_distance(&img).unwrap() <= radius + BALL_TOLERANCE);
                prop_assert!(cur.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
