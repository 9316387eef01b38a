//! The attack objective.
//!
//! Sign convention: every attack term is the *positive* noise-prediction error
//! `E ||eps - eps_theta(x_t, t, [c])||^2`, and the combined objective
//!
//! ```text
//! J = w_adv * E_adv + sum_i w_con_i * E_con_i - w_reg * MSE(I, I_adv)
//! ```
//!
//! is *ascended* by the iterative protector and by encoder training. Larger `J`
//! means the denoiser is worse at recovering the protected image while the
//! protected image stays close to the original.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{add_noise_var, CondInput, DiffusionSchedule, NoisePredictor};
use crate::conditioner::{ConditionFeatures, ConditionerSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::types::{ImageTensor, LossWeights};

/// How a per-sample squared error is reduced over image elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over elements; keeps weights independent of resolution.
    #[default]
    Mean,
    /// Plain squared L2 norm.
    Sum,
}

/// What the denoiser reconstructs in a conditional term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalTarget {
    /// Both `x_t` and the condition come from the protected image.
    #[default]
    SelfReconstruction,
    /// `x_t` comes from the clean image, the condition from the protected one.
    CleanImage,
}

/// One Monte-Carlo sample: a timestep and a standard Gaussian noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample(rng: &mut impl Rng, schedule: &DiffusionSchedule, len: usize) -> Self {
        let t = rng.random_range(0..schedule.num_timesteps());
        let eps = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        Self { t, eps }
    }

    pub fn sample_n(rng: &mut impl Rng, schedule: &DiffusionSchedule, len: usize, n: usize) -> Vec<Self> {
        (0..n).map(|_| Self::sample(rng, schedule, len)).collect()
    }
}

/// Monte-Carlo mean of the prediction error of `backend` on `x0` over `draws`.
pub fn prediction_error_var(
    g: &mut Graph,
    backend: &dyn NoisePredictor,
    x0: Var,
    draws: &[NoiseDraw],
    schedule: &DiffusionSchedule,
    cond: Option<CondInput>,
    reduction: Reduction,
) -> Result<Var> {
    if draws.is_empty() {
        return Err(Error::invalid("prediction error", "num_samples must be >= 1"));
    }
    let shape = g.shape(x0).to_vec();
    let n = shape.iter().product::<usize>() as f64;
    let mut terms = Vec::with_capacity(draws.len());
    for d in draws {
        let x_t = add_noise_var(g, x0, &d.eps, d.t, schedule)?;
        let pred = backend.predict(g, x_t, d.t, cond)?;
        if g.shape(pred) != shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: shape, actual: g.shape(pred).to_vec() });
        }
        let eps = g.constant(Tensor::new(shape.clone(), d.eps.clone()));
        let se = g.squared_distance(eps, pred);
        let per = match reduction {
            Reduction::Mean => 1.0 / n,
            Reduction::Sum => 1.0,
        };
        terms.push((per / draws.len() as f64, se));
    }
    Ok(g.weighted_sum(&terms))
}

/// Positive prediction error of `backend` on `image`, averaged over
/// `num_samples` draws of `(t, eps)`. With `condition`, the features are fed
/// to the denoiser as constants.
pub fn adv_term(
    backend: &dyn NoisePredictor,
    image: &ImageTensor,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
    condition: Option<&ConditionFeatures>,
    num_samples: usize,
    reduction: Reduction,
) -> Result<f64> {
    let draws = NoiseDraw::sample_n(rng, schedule, image.len(), num_samples);
    adv_term_with_draws(backend, image, schedule, &draws, condition, reduction)
}

/// [`adv_term`] with caller-supplied draws, for frozen evaluation sets.
pub fn adv_term_with_draws(
    backend: &dyn NoisePredictor,
    image: &ImageTensor,
    schedule: &DiffusionSchedule,
    draws: &[NoiseDraw],
    condition: Option<&ConditionFeatures>,
    reduction: Reduction,
) -> Result<f64> {
    let mut g = Graph::new();
    let x0 = g.constant(image.to_tensor());
    let cond = condition.map(|c| CondInput { route: c.route, features: g.constant(Tensor::new(vec![c.features.len()], c.features.clone())) });
    let e = prediction_error_var(&mut g, backend, x0, draws, schedule, cond, reduction)?;
    Ok(g.scalar(e))
}

/// Mean squared error between two images.
pub fn reg_loss(original: &ImageTensor, protected: &ImageTensor) -> Result<f64> {
    original.same_shape(protected)?;
    let n = original.len() as f64;
    Ok(original.data().iter().zip(protected.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Differentiable [`reg_loss`] with respect to `protected`.
pub fn reg_loss_var(g: &mut Graph, original: &ImageTensor, protected: Var) -> Result<Var> {
    if g.shape(protected) != original.shape() {
        return Err(Error::ShapeMismatch { expected: original.shape().to_vec(), actual: g.shape(protected).to_vec() });
    }
    let o = g.constant(original.to_tensor());
    let se = g.squared_distance(protected, o);
    Ok(g.scale(se, 1.0 / original.len() as f64))
}

fn check_len(weights: &LossWeights, n: usize) -> Result<()> {
    if n != weights.w_con.len() {
        return Err(Error::LengthMismatch { what: "conditional errors", expected: weights.w_con.len(), actual: n });
    }
    Ok(())
}

/// `w_adv * e_adv + sum_i w_con_i * e_con_i - w_reg * reg`.
pub fn total_objective(weights: &LossWeights, unconditional_error: f64, conditional_errors: &[f64], regularization: f64) -> Result<f64> {
    check_len(weights, conditional_errors.len())?;
    let attack: f64 = weights.w_con.iter().zip(conditional_errors).map(|(w, e)| w * e).sum();
    Ok(weights.w_adv * unconditional_error + attack - weights.w_reg * regularization)
}

/// Differentiable [`total_objective`].
pub fn total_objective_var(g: &mut Graph, weights: &LossWeights, unconditional: Var, conditional: &[Var], regularization: Var) -> Result<Var> {
    check_len(weights, conditional.len())?;
    let mut terms = vec![(weights.w_adv, unconditional)];
    terms.extend(weights.w_con.iter().copied().zip(conditional.iter().copied()));
    terms.push((-weights.w_reg, regularization));
    Ok(g.weighted_sum(&terms))
}

/// Noise draws for one evaluation of [`Objective`]: one set per backend for
/// the unconditional term and one set per conditioner.
#[derive(Clone, Debug)]
pub struct ObjectiveDraws {
    pub unconditional: Vec<Vec<NoiseDraw>>,
    pub conditional: Vec<Vec<NoiseDraw>>,
}

/// Node handles of every objective component.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub unconditional: Var,
    pub conditional: Vec<Var>,
    pub regularization: Var,
}

/// Scalar values of an [`ObjectiveTerms`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValues {
    pub total: f64,
    pub unconditional: f64,
    pub conditional: Vec<f64>,
    pub regularization: f64,
}

impl ObjectiveTerms {
    pub fn values(&self, g: &Graph) -> ObjectiveValues {
        ObjectiveValues {
            total: g.scalar(self.total),
            unconditional: g.scalar(self.unconditional),
            conditional: self.conditional.iter().map(|&v| g.scalar(v)).collect(),
            regularization: g.scalar(self.regularization),
        }
    }
}

/// The full objective over a set of backends and conditioners.
///
/// The unconditional term averages over all backends; conditional terms use
/// the first backend, which hosts the conditioners. Terms with zero weight are
/// not evaluated and report zero.
#[derive(Clone)]
pub struct Objective {
    pub backends: Vec<Arc<dyn NoisePredictor>>,
    pub conditioners: Vec<ConditionerSpec>,
    pub weights: LossWeights,
    pub schedule: DiffusionSchedule,
    pub reduction: Reduction,
    pub target: ConditionalTarget,
    pub num_samples: usize,
}

impl Objective {
    pub fn new(
        backends: Vec<Arc<dyn NoisePredictor>>,
        conditioners: Vec<ConditionerSpec>,
        weights: LossWeights,
        schedule: DiffusionSchedule,
    ) -> Result<Self> {
        if backends.is_empty() {
            return Err(Error::invalid("objective", "at least one backend is required"));
        }
        check_len(&weights, conditioners.len())?;
        weights.validate()?;
        // w_con is aligned with the order given here, not registry positions.
        let conditioners = conditioners
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                s.weight_index = i;
                s
            })
            .collect();
        Ok(Self {
            backends,
            conditioners,
            weights,
            schedule,
            reduction: Reduction::Mean,
            target: ConditionalTarget::SelfReconstruction,
            num_samples: 1,
        })
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends.iter().map(|b| b.id().to_string()).collect()
    }

    pub fn sample_draws(&self, rng: &mut impl Rng, len: usize) -> ObjectiveDraws {
        self.sample_draws_n(rng, len, self.num_samples)
    }

    pub fn sample_draws_n(&self, rng: &mut impl Rng, len: usize, n: usize) -> ObjectiveDraws {
        let unconditional = self.backends.iter().map(|_| NoiseDraw::sample_n(rng, &self.schedule, len, n)).collect();
        let conditional = self.conditioners.iter().map(|_| NoiseDraw::sample_n(rng, &self.schedule, len, n)).collect();
        ObjectiveDraws { unconditional, conditional }
    }

    /// Builds `J` on the graph.
    ///
    /// `attacked` is what the denoiser and conditioners see (typically the
    /// augmented protected image); `protected` is the un-augmented protected
    /// image used for regularization; `clean` is the original.
    pub fn build(&self, g: &mut Graph, attacked: Var, protected: Var, clean: &ImageTensor, draws: &ObjectiveDraws) -> Result<ObjectiveTerms> {
        let zero = g.constant(Tensor::scalar(0.0));

        let unconditional = if self.weights.w_adv > 0.0 {
            let mut parts = Vec::with_capacity(self.backends.len());
            for (b, d) in self.backends.iter().zip(&draws.unconditional) {
                let e = prediction_error_var(g, b.as_ref(), attacked, d, &self.schedule, None, self.reduction)?;
                parts.push((1.0 / self.backends.len() as f64, e));
            }
            g.weighted_sum(&parts)
        } else {
            zero
        };

        let host = self.backends[0].as_ref();
        let mut conditional = Vec::with_capacity(self.conditioners.len());
        let clean_var = match self.target {
            ConditionalTarget::CleanImage => {
                let c = g.constant(clean.to_tensor());
                if g.shape(c) != g.shape(attacked) {
                    return Err(Error::ShapeMismatch { expected: g.shape(attacked).to_vec(), actual: clean.shape().to_vec() });
                }
                Some(c)
            }
            ConditionalTarget::SelfReconstruction => None,
        };
        for (spec, d) in self.conditioners.iter().zip(&draws.conditional) {
            let w = self.weights.w_con[spec.weight_index];
            debug_assert_eq!(spec.weight_index, conditional.len());
            if w == 0.0 {
                conditional.push(zero);
                continue;
            }
            let feats = spec.conditioner.extract(g, attacked)?;
            let cond = CondInput { route: spec.route(), features: feats };
            let x0 = clean_var.unwrap_or(attacked);
            conditional.push(prediction_error_var(g, host, x0, d, &self.schedule, Some(cond), self.reduction)?);
        }
        let regularization = if self.weights.w_reg > 0.0 { reg_loss_var(g, clean, protected)? } else { zero };
        let total = total_objective_var(g, &self.weights, unconditional, &conditional, regularization)?;
        Ok(ObjectiveTerms { total, unconditional, conditional, regularization })
    }

    /// `J` at a concrete image with fixed draws and no augmentation.
    pub fn evaluate(&self, image: &ImageTensor, clean: &ImageTensor, draws: &ObjectiveDraws) -> Result<ObjectiveValues> {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let terms = self.build(&mut g, x, x, clean, draws)?;
        Ok(terms.values(&g))
    }

    /// `J` and its gradient with respect to the image, with fixed draws and no
    /// augmentation.
    pub fn value_and_grad(&self, image: &ImageTensor, clean: &ImageTensor, draws: &ObjectiveDraws) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let x = g.param(image.to_tensor());
        let terms = self.build(&mut g, x, x, clean, draws)?;
        let mut grads = g.backward(terms.total);
        Ok((g.scalar(terms.total), grads.take(x).data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::make_toy_backend;
    use crate::conditioner::{extract_condition, ConditionerRegistry};
    use crate::graph::tests::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct ZeroPredictor;

    impl NoisePredictor for ZeroPredictor {
        fn id(&self) -> &str {
            "zero"
        }
        fn predict(&self, g: &mut Graph, x_t: Var, _t: usize, _c: Option<CondInput>) -> Result<Var> {
            let shape = g.shape(x_t).to_vec();
            Ok(g.constant(Tensor::zeros(shape)))
        }
    }

    /// Recovers eps exactly from x_t using the known clean image.
    struct OraclePredictor {
        x0: Vec<f64>,
        schedule: DiffusionSchedule,
    }

    impl NoisePredictor for OraclePredictor {
        fn id(&self) -> &str {
            "oracle"
        }
        fn predict(&self, g: &mut Graph, x_t: Var, t: usize, _c: Option<CondInput>) -> Result<Var> {
            let a = self.schedule.at(t)?;
            let v = g.value(x_t);
            let data = v.data.iter().zip(&self.x0).map(|(x, x0)| (x - a.sqrt() * x0) / (1.0 - a).sqrt()).collect();
            let shape = v.shape.clone();
            Ok(g.constant(Tensor::new(shape, data)))
        }
    }

    #[test]
    fn perfect_denoiser_scores_zero() {
        let schedule = DiffusionSchedule::default();
        let img = ImageTensor::random(8, 8, 1);
        let oracle = OraclePredictor { x0: img.data().to_vec(), schedule: schedule.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = adv_term(&oracle, &img, &schedule, &mut rng, None, 4, Reduction::Sum).unwrap();
        assert!(v.abs() < 1e-18, "{v}");
    }

    #[test]
    fn zero_predictor_matches_chi_square_expectation() {
        // E||eps||^2 = n for n = 8*8*3 = 192; per-sample variance is 2n.
        let schedule = DiffusionSchedule::default();
        let img = ImageTensor::random(8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = 1000;
        let v = adv_term(&ZeroPredictor, &img, &schedule, &mut rng, None, samples, Reduction::Sum).unwrap();
        let se = (2.0 * 192.0 / samples as f64).sqrt();
        assert!((v - 192.0).abs() < 4.0 * se, "mean {v}, 4 s.e. = {}", 4.0 * se);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = adv_term(&ZeroPredictor, &img, &schedule, &mut rng, None, samples, Reduction::Mean).unwrap();
        assert!((m - v / 192.0).abs() < 1e-12);
    }

    #[test]
    fn condition_changes_adv_term() {
        let schedule = DiffusionSchedule::default();
        let b = make_toy_backend(3, 8).unwrap();
        let reg = ConditionerRegistry::with_defaults();
        let img = ImageTensor::pattern(8, 8, 5);
        let feats = extract_condition(&reg.specs()[0], &img).unwrap();
        let plain = adv_term(&b, &img, &schedule, &mut ChaCha8Rng::seed_from_u64(4), None, 2, Reduction::Mean).unwrap();
        let cond = adv_term(&b, &img, &schedule, &mut ChaCha8Rng::seed_from_u64(4), Some(&feats), 2, Reduction::Mean).unwrap();
        assert_ne!(plain, cond);
        assert!(plain >= 0.0 && cond >= 0.0);
    }

    #[test]
    fn reg_loss_values() {
        let a = ImageTensor::uniform(4, 4, 0.3).unwrap();
        assert_eq!(reg_loss(&a, &a).unwrap(), 0.0);
        let b = ImageTensor::uniform(4, 4, 0.4).unwrap();
        assert!((reg_loss(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        let c = ImageTensor::uniform(4, 4, 0.3 + 13.0 / 255.0).unwrap();
        assert!((reg_loss(&a, &c).unwrap() - 0.0025990).abs() < 1e-7);
        assert!(reg_loss(&a, &ImageTensor::uniform(4, 3, 0.3).unwrap()).is_err());
    }

    #[test]
    fn total_objective_hand_sums() {
        let pgd = LossWeights::pgd_default();
        assert_eq!(total_objective(&pgd, 1.0, &[1.0; 4], 123.0).unwrap(), 17.0);
        let only_reg = LossWeights { w_adv: 0.0, w_con: vec![0.0; 4], w_reg: 2.5 };
        assert_eq!(total_objective(&only_reg, 9.0, &[9.0; 4], 0.4).unwrap(), -1.0);
        let ane = LossWeights::encoder_default();
        assert!((total_objective(&ane, 1.0, &[1.0; 4], 0.001).unwrap() - 199.8).abs() < 1e-12);
        assert!(matches!(total_objective(&ane, 1.0, &[1.0; 3], 0.0), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn graph_objective_matches_scalar() {
        let w = LossWeights::new(2.0, vec![3.0, 0.5], 7.0).unwrap();
        let mut g = Graph::new();
        let u = g.constant(Tensor::scalar(1.25));
        let c1 = g.constant(Tensor::scalar(0.5));
        let c2 = g.constant(Tensor::scalar(4.0));
        let r = g.constant(Tensor::scalar(0.01));
        let j = total_objective_var(&mut g, &w, u, &[c1, c2], r).unwrap();
        assert!((g.scalar(j) - total_objective(&w, 1.25, &[0.5, 4.0], 0.01).unwrap()).abs() < 1e-15);
    }

    fn toy_objective(weights: LossWeights, n_cond: usize) -> Objective {
        let reg = ConditionerRegistry::with_defaults();
        let b: Arc<dyn NoisePredictor> = Arc::new(make_toy_backend(11, 8).unwrap());
        Objective::new(vec![b], reg.specs()[..n_cond].to_vec(), weights, DiffusionSchedule::default()).unwrap()
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let obj = toy_objective(LossWeights::new(1.0, vec![1.0], 1.0).unwrap(), 1);
        let clean = ImageTensor::pattern(8, 8, 3);
        let start = ImageTensor::from_fn(8, 8, |y, x, c| clean.get(y, x, c) + 0.02 * ((y + 2 * x + c) as f64).sin());
        let draws = obj.sample_draws_n(&mut ChaCha8Rng::seed_from_u64(8), clean.len(), 2);
        let err = fd_check(&start.to_tensor(), |g, v| obj.build(g, v, v, &clean, &draws).unwrap().total);
        assert!(err < 1e-3, "relative L2 error {err}");
    }

    #[test]
    fn pure_unconditional_configuration_reduces_to_adv_term() {
        let obj = toy_objective(LossWeights::new(2.5, vec![0.0, 0.0], 0.0).unwrap(), 2);
        let img = ImageTensor::pattern(8, 8, 1);
        let draws = obj.sample_draws_n(&mut ChaCha8Rng::seed_from_u64(3), img.len(), 3);
        let v = obj.evaluate(&img, &img, &draws).unwrap();
        let direct = adv_term_with_draws(obj.backends[0].as_ref(), &img, &obj.schedule, &draws.unconditional[0], None, Reduction::Mean).unwrap();
        assert!((v.total - 2.5 * direct).abs() < 1e-12);
        assert_eq!(v.conditional, vec![0.0, 0.0]);
    }

    #[test]
    fn clean_target_differs_from_self_reconstruction() {
        let mut obj = toy_objective(LossWeights::new(0.0, vec![1.0], 0.0).unwrap(), 1);
        let clean = ImageTensor::pattern(8, 8, 1);
        let adv = ImageTensor::from_fn(8, 8, |y, x, c| clean.get(y, x, c) + 0.05);
        let draws = obj.sample_draws_n(&mut ChaCha8Rng::seed_from_u64(3), clean.len(), 1);
        let a = obj.evaluate(&adv, &clean, &draws).unwrap().total;
        obj.target = ConditionalTarget::CleanImage;
        let b = obj.evaluate(&adv, &clean, &draws).unwrap().total;
        assert_ne!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn objective_is_linear_in_each_component(
            w_adv in 0.0f64..50.0, w1 in 0.0f64..50.0, w_reg in 0.0f64..300.0,
            u in 0.0f64..5.0, c in 0.0f64..5.0, r in 0.0f64..1.0, bump in 0.01f64..2.0,
        ) {
            let w = LossWeights { w_adv, w_con: vec![w1], w_reg };
            let base = total_objective(&w, u, &[c], r).unwrap();
            let du = total_objective(&w, u + bump, &[c], r).unwrap() - base;
            let dc = total_objective(&w, u, &[c + bump], r).unwrap() - base;
            let dr = total_objective(&w, u, &[c], r + bump).unwrap() - base;
            proptest::prop_assert!((du - w_adv * bump).abs() < 1e-9);
            proptest::prop_assert!((dc - w1 * bump).abs() < 1e-9);
            proptest::prop_assert!((dr + w_reg * bump).abs() < 1e-9);
        }
    }
}
