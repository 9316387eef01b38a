//! Reference-feature extractors standing in for the attacked conditional
//! modules.
//!
//! An adapter-route conditioner produces features that a denoiser consumes
//! through cross-attention; a reference-net-route conditioner produces features
//! consumed through self-attention. The shipped toy conditioners are seeded
//! pooled projections; real extractors register through
//! [`ConditionerRegistry::register`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::maps;
use crate::types::{ImageTensor, LossWeights, CHANNELS};

/// Width of every toy feature vector.
pub const COND_DIM: usize = 16;

/// Pooling grid used by toy conditioners.
pub const TOY_POOL_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    CrossAttention,
    SelfAttention,
}

/// Features extracted from one image by one conditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionFeatures {
    pub conditioner_id: String,
    pub route: Route,
    pub features: Vec<f64>,
    /// Whether gradients flow from the features back to the source image.
    pub source_traceable: bool,
}

pub trait Conditioner: Send + Sync {
    fn id(&self) -> &str;
    fn route(&self) -> Route;
    /// Differentiable extraction from an `[h, w, 3]` image node.
    fn extract(&self, g: &mut Graph, image: Var) -> Result<Var>;
}

/// A registered conditioner and the index of its weight in `LossWeights::w_con`.
#[derive(Clone)]
pub struct ConditionerSpec {
    pub conditioner: Arc<dyn Conditioner>,
    pub weight_index: usize,
}

impl ConditionerSpec {
    pub fn id(&self) -> &str {
        self.conditioner.id()
    }

    pub fn route(&self) -> Route {
        self.conditioner.route()
    }
}

impl std::fmt::Debug for ConditionerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConditionerSpec").field("id", &self.id()).field("route", &self.route()).field("weight_index", &self.weight_index).finish()
    }
}

/// Runs a conditioner on a concrete image.
pub fn extract_condition(spec: &ConditionerSpec, image: &ImageTensor) -> Result<ConditionFeatures> {
    let mut g = Graph::new();
    let v = g.param(image.to_tensor());
    let f = spec.conditioner.extract(&mut g, v)?;
    let features = g.value(f).data.clone();
    if let Some(index) = features.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid("condition features", format!("non-finite entry at {index}")));
    }
    Ok(ConditionFeatures { conditioner_id: spec.id().to_string(), route: spec.route(), features, source_traceable: g.requires_grad(f) })
}

/// Seeded toy extractor over a 4x4 average-pooled image.
#[derive(Clone, Debug)]
pub struct ToyConditioner {
    id: String,
    route: Route,
    /// Fixed input size, if the conditioner only accepts one.
    resolution: Option<(usize, usize)>,
    w1: Tensor,
    b1: Tensor,
    /// Second layer of the reference-net variant.
    w2: Option<(Tensor, Tensor)>,
}

const POOLED: usize = TOY_POOL_GRID * TOY_POOL_GRID * CHANNELS;
const REF_HIDDEN: usize = 32;

fn gaussian(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect(),
    )
}

impl ToyConditioner {
    /// Adapter-route toy: `features = pool(image) @ W + b`.
    pub fn adapter(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 4.0 / (POOLED as f64).sqrt();
        Self {
            id: id.into(),
            route: Route::CrossAttention,
            resolution: None,
            w1: gaussian(vec![POOLED, COND_DIM], scale, &mut rng),
            b1: gaussian(vec![COND_DIM], 0.5, &mut rng),
            w2: None,
        }
    }

    /// Reference-net-route toy: `features = tanh(pool(image) @ W1 + b1) @ W2 + b2`.
    pub fn reference_net(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            id: id.into(),
            route: Route::SelfAttention,
            resolution: None,
            w1: gaussian(vec![POOLED, REF_HIDDEN], 4.0 / (POOLED as f64).sqrt(), &mut rng),
            b1: gaussian(vec![REF_HIDDEN], 0.5, &mut rng),
            w2: Some((gaussian(vec![REF_HIDDEN, COND_DIM], 2.0 / (REF_HIDDEN as f64).sqrt(), &mut rng), gaussian(vec![COND_DIM], 0.2, &mut rng))),
        }
    }

    /// Restricts the conditioner to one input resolution.
    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.resolution = Some((height, width));
        self
    }

    /// Bias of the output layer.
    pub fn output_bias(&self) -> &[f64] {
        match &self.w2 {
            Some((_, b)) => &b.data,
            None => &self.b1.data,
        }
    }
}

impl Conditioner for ToyConditioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn route(&self) -> Route {
        self.route
    }

    fn extract(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        let (h, w) = (shape[0], shape[1]);
        if let Some((eh, ew)) = self.resolution {
            if (h, w) != (eh, ew) {
                return Err(Error::Resolution {
                    what: format!("conditioner `{}`", self.id),
                    expected: format!("{eh}x{ew}"),
                    actual: format!("{h}x{w}"),
                });
            }
        }
        if shape.len() != 3 || shape[2] != CHANNELS || h % TOY_POOL_GRID != 0 || w % TOY_POOL_GRID != 0 {
            return Err(Error::Resolution {
                what: format!("conditioner `{}`", self.id),
                expected: format!("HxWx3 with H and W multiples of {TOY_POOL_GRID}"),
                actual: format!("{shape:?}"),
            });
        }
        let pooled = g.sparse(image, maps::avg_pool(h, w, TOY_POOL_GRID));
        let pooled = g.reshape(pooled, vec![1, POOLED]);
        let w1 = g.constant(self.w1.clone());
        let b1 = g.constant(self.b1.clone());
        let mut out = g.matmul(pooled, w1);
        out = g.add_row(out, b1);
        if let Some((w2, b2)) = &self.w2 {
            out = g.tanh(out);
            let w2 = g.constant(w2.clone());
            let b2 = g.constant(b2.clone());
            out = g.matmul(out, w2);
            out = g.add_row(out, b2);
        }
        Ok(g.reshape(out, vec![COND_DIM]))
    }
}

/// Identifiers of the four default toy conditioners, in weight order.
pub const DEFAULT_CONDITIONERS: [&str; 4] = ["toy-ip-adapter", "toy-reference-only", "toy-magic-animate", "toy-echomimic"];

fn default_toy(id: &str) -> Option<ToyConditioner> {
    Some(match id {
        "toy-ip-adapter" => ToyConditioner::adapter(id, 101),
        "toy-reference-only" => ToyConditioner::reference_net(id, 102),
        "toy-magic-animate" => ToyConditioner::reference_net(id, 103),
        "toy-echomimic" => ToyConditioner::reference_net(id, 104),
        _ => return None,
    })
}

/// Ordered set of conditioners with unique identifiers.
#[derive(Clone, Default)]
pub struct ConditionerRegistry {
    specs: Vec<ConditionerSpec>,
}

impl ConditionerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The four default toy conditioners.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        for id in DEFAULT_CONDITIONERS {
            r.register(Arc::new(default_toy(id).expect("known toy"))).expect("unique ids");
        }
        r
    }

    /// Resolves identifiers to conditioners. Default toys resolve by name;
    /// anything else must already be present in `plugins`.
    pub fn from_ids(ids: &[String], plugins: &ConditionerRegistry) -> Result<Self> {
        let mut r = Self::new();
        for id in ids {
            let c: Arc<dyn Conditioner> = match plugins.lookup(id) {
                Some(spec) => spec.conditioner.clone(),
                None => match default_toy(id) {
                    Some(t) => Arc::new(t),
                    None => {
                        return Err(Error::Unavailable {
                            kind: "conditioner",
                            id: id.clone(),
                            reason: format!("no plugin registered; see {}", crate::backend::PLUGIN_DIR_ENV),
                        })
                    }
                },
            };
            r.register(c)?;
        }
        Ok(r)
    }

    /// Appends a conditioner; its weight index is its position.
    pub fn register(&mut self, conditioner: Arc<dyn Conditioner>) -> Result<&ConditionerSpec> {
        if self.lookup(conditioner.id()).is_some() {
            return Err(Error::Duplicate { kind: "conditioner", id: conditioner.id().to_string() });
        }
        let weight_index = self.specs.len();
        self.specs.push(ConditionerSpec { conditioner, weight_index });
        Ok(self.specs.last().unwrap())
    }

    pub fn lookup(&self, id: &str) -> Option<&ConditionerSpec> {
        self.specs.iter().find(|s| s.id() == id)
    }

    pub fn specs(&self) -> &[ConditionerSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.id().to_string()).collect()
    }
}

/// Multiplies each conditional weight by an independent draw from
/// `U[lo, hi]`. `w_adv` and `w_reg` are left as they are.
pub fn perturb_condition_weights(weights: &LossWeights, rng: &mut impl Rng, (lo, hi): (f64, f64)) -> Result<LossWeights> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::invalid("weight perturbation range", format!("need 0 < lo <= hi, got ({lo}, {hi})")));
    }
    let w_con = weights
        .w_con
        .iter()
        .map(|&w| {
            let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            w * f
        })
        .collect();
    Ok(LossWeights { w_adv: weights.w_adv, w_con, w_reg: weights.w_reg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: ToyConditioner) -> ConditionerSpec {
        ConditionerSpec { conditioner: Arc::new(c), weight_index: 0 }
    }

    #[test]
    fn adapter_on_zero_image_returns_bias() {
        let c = ToyConditioner::adapter("a", 1);
        let bias = c.output_bias().to_vec();
        let f = extract_condition(&spec(c), &ImageTensor::uniform(8, 8, 0.0).unwrap()).unwrap();
        assert_eq!(f.features, bias);
        assert_eq!(f.route, Route::CrossAttention);
        assert!(f.source_traceable);
    }

    #[test]
    fn extraction_is_deterministic_and_pixel_sensitive() {
        let reg = ConditionerRegistry::with_defaults();
        let img = ImageTensor::random(16, 16, 3);
        let mut data = img.data().to_vec();
        data[5] = 1.0 - data[5];
        let other = ImageTensor::new(16, 16, data).unwrap();
        for s in reg.specs() {
            let a = extract_condition(s, &img).unwrap();
            assert_eq!(a, extract_condition(s, &img).unwrap());
            let b = extract_condition(s, &other).unwrap();
            let diff = a.features.iter().zip(&b.features).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff > 0.0, "{} insensitive to pixel change", s.id());
        }
    }

    #[test]
    fn finite_difference_sensitivity_exists_for_every_default() {
        let reg = ConditionerRegistry::with_defaults();
        let img = ImageTensor::random(8, 8, 9);
        for s in reg.specs() {
            let base = extract_condition(s, &img).unwrap().features;
            let mut data = img.data().to_vec();
            data[40] += 1e-4;
            let bumped = ImageTensor::new(8, 8, data).unwrap();
            let f = extract_condition(s, &bumped).unwrap().features;
            let sens = base.iter().zip(&f).map(|(a, b)| ((b - a) / 1e-4).abs()).fold(0.0, f64::max);
            assert!(sens > 1e-6, "{} has no gradient path", s.id());
        }
    }

    #[test]
    fn resolution_mismatch_names_expected_resolution() {
        let c = ToyConditioner::adapter("fixed", 2).with_resolution(16, 16);
        let err = extract_condition(&spec(c), &ImageTensor::uniform(8, 8, 0.5).unwrap()).unwrap_err();
        assert!(err.to_string().contains("16x16"), "{err}");
        let c = ToyConditioner::reference_net("odd", 2);
        let err = extract_condition(&spec(c), &ImageTensor::uniform(6, 8, 0.5).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Resolution { .. }));
    }

    #[test]
    fn registry_roundtrip_and_uniqueness() {
        let mut reg = ConditionerRegistry::new();
        let c = Arc::new(ToyConditioner::reference_net("r", 7));
        reg.register(c.clone()).unwrap();
        assert!(reg.register(c.clone()).is_err());
        let probe = ImageTensor::pattern(8, 8, 1);
        let looked = reg.lookup("r").unwrap();
        let direct = ConditionerSpec { conditioner: c, weight_index: 0 };
        assert_eq!(extract_condition(looked, &probe).unwrap(), extract_condition(&direct, &probe).unwrap());
        let defaults = ConditionerRegistry::with_defaults();
        assert_eq!(defaults.ids(), DEFAULT_CONDITIONERS.map(String::from).to_vec());
        assert_eq!(defaults.specs()[2].weight_index, 2);
        assert_eq!(defaults.specs()[0].route(), Route::CrossAttention);
        assert!(ConditionerRegistry::from_ids(&["nope".into()], &ConditionerRegistry::new()).is_err());
    }

    #[test]
    fn perturbation_degenerate_range_is_identity() {
        let w = LossWeights::encoder_default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_condition_weights(&w, &mut rng, (1.0, 1.0)).unwrap(), w);
    }

    #[test]
    fn perturbation_stays_in_band_and_keeps_other_weights() {
        let w = LossWeights::encoder_default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let p = perturb_condition_weights(&w, &mut rng, (0.5, 1.5)).unwrap();
            assert_eq!(p.w_adv, 30.0);
            assert_eq!(p.w_reg, 200.0);
            for (a, b) in p.w_con.iter().zip(&w.w_con) {
                assert!(*a >= 0.5 * b && *a <= 1.5 * b);
            }
        }
        assert!(perturb_condition_weights(&w, &mut rng, (0.0, 1.0)).is_err());
        assert!(perturb_condition_weights(&w, &mut rng, (1.5, 1.0)).is_err());
    }
}
