//! Noise-predicting denoisers and the diffusion forward process.
//!
//! [`NoisePredictor`] is the contract every denoiser satisfies: given a noised
//! image `x_t`, a timestep and optionally reference features, predict the noise
//! that was added. [`ToyDenoiser`] is a small seeded network that satisfies the
//! contract with no pretrained weights; real denoisers plug in through
//! [`BackendRegistry`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioner::{Route, COND_DIM};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::maps;
use crate::types::CHANNELS;

/// Environment variable naming the directory that holds plugin weights.
pub const PLUGIN_DIR_ENV: &str = "ANTIREF_PLUGIN_DIR";

/// Cumulative signal coefficients of the forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Accepts any strictly decreasing sequence in `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::invalid("schedule", "no timesteps"));
        }
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid("schedule", format!("alpha_bar[{t}] = {a} outside (0, 1]")));
            }
            if t > 0 && a >= alpha_bar[t - 1] {
                return Err(Error::invalid("schedule", format!("alpha_bar not strictly decreasing at t = {t}")));
            }
        }
        Ok(Self { alpha_bar })
    }

    pub fn num_timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::TimestepOutOfRange { t, max: self.alpha_bar.len() })
    }
}

impl Default for DiffusionSchedule {
    /// 1000 steps, beta from 0.00085 to 0.012.
    fn default() -> Self {
        make_linear_schedule(1000, 0.00085, 0.012).expect("default schedule is valid")
    }
}

/// Linearly spaced betas and their cumulative products.
pub fn make_linear_schedule(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if num_timesteps < 1 {
        return Err(Error::invalid("schedule", "num_timesteps must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid("schedule", format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let mut acc = 1.0;
    let alpha_bar = (0..num_timesteps)
        .map(|t| {
            let beta = if num_timesteps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * t as f64 / (num_timesteps - 1) as f64 };
            acc *= 1.0 - beta;
            acc
        })
        .collect();
    DiffusionSchedule::from_alpha_bar(alpha_bar)
}

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn add_noise(x0: &[f64], eps: &[f64], t: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch { expected: vec![x0.len()], actual: vec![eps.len()] });
    }
    let a = schedule.at(t)?;
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

/// Differentiable [`add_noise`]; `eps` enters as a constant.
pub fn add_noise_var(g: &mut Graph, x0: Var, eps: &[f64], t: usize, schedule: &DiffusionSchedule) -> Result<Var> {
    let a = schedule.at(t)?;
    let shape = g.shape(x0).to_vec();
    if shape.iter().product::<usize>() != eps.len() {
        return Err(Error::ShapeMismatch { expected: shape, actual: vec![eps.len()] });
    }
    let signal = g.scale(x0, a.sqrt());
    let noise = g.constant(Tensor::new(shape, eps.iter().map(|e| (1.0 - a).sqrt() * e).collect()));
    Ok(g.add(signal, noise))
}

/// Reference features injected into a denoiser.
#[derive(Clone, Copy, Debug)]
pub struct CondInput {
    pub route: Route,
    pub features: Var,
}

/// A noise-predicting denoiser `eps_theta(x_t, t, [c])`.
///
/// Implementations must be deterministic and must not mutate state during
/// [`predict`](NoisePredictor::predict); one instance is shared across workers.
pub trait NoisePredictor: Send + Sync {
    fn id(&self) -> &str;

    /// Predicts the noise in `x_t` (shape `[h, w, 3]`), returning a node of the
    /// same shape.
    fn predict(&self, g: &mut Graph, x_t: Var, t: usize, cond: Option<CondInput>) -> Result<Var>;
}

const TIME_DIM: usize = 8;

fn time_embedding(t: usize) -> [f64; TIME_DIM] {
    let mut e = [0.0; TIME_DIM];
    for i in 0..TIME_DIM / 2 {
        let freq = 1.0 / 10_000f64.powf(i as f64 / (TIME_DIM / 2) as f64);
        e[2 * i] = (t as f64 * freq).sin();
        e[2 * i + 1] = (t as f64 * freq).cos();
    }
    e
}

fn gaussian(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data)
}

/// Seeded convolutional denoiser used wherever a real U-Net would be.
///
/// Layout: 3x3 convolution to `width` channels plus a timestep embedding,
/// tanh, additive condition injection (one projection per route), a 1x1 mixing
/// layer, tanh, and a 1x1 projection back to 3 channels.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    id: String,
    width: usize,
    conv_w: Tensor,
    conv_b: Tensor,
    time_w: Tensor,
    cross_w: Tensor,
    self_w: Tensor,
    mix_w: Tensor,
    mix_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

/// Builds the seeded toy denoiser `toy:<seed>`.
pub fn make_toy_backend(seed: u64, width: usize) -> Result<ToyDenoiser> {
    if width < 4 {
        return Err(Error::invalid("toy backend", format!("width must be >= 4, got {width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e57);
    let k = 9 * CHANNELS;
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    Ok(ToyDenoiser {
        id: format!("toy:{seed}"),
        width,
        conv_w: gaussian(vec![k, width], 2.0 * inv(k), &mut rng),
        conv_b: gaussian(vec![width], 0.1, &mut rng),
        time_w: gaussian(vec![TIME_DIM, width], 0.5 * inv(TIME_DIM), &mut rng),
        cross_w: gaussian(vec![COND_DIM, width], inv(COND_DIM), &mut rng),
        self_w: gaussian(vec![COND_DIM, width], inv(COND_DIM), &mut rng),
        mix_w: gaussian(vec![width, width], 1.5 * inv(width), &mut rng),
        mix_b: gaussian(vec![width], 0.1, &mut rng),
        out_w: gaussian(vec![width, CHANNELS], inv(width), &mut rng),
        out_b: gaussian(vec![CHANNELS], 0.05, &mut rng),
    })
}

impl ToyDenoiser {
    pub fn width(&self) -> usize {
        self.width
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.time_w,
            &mut self.cross_w,
            &mut self.self_w,
            &mut self.mix_w,
            &mut self.mix_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    /// A structurally identical copy whose weights carry Gaussian jitter of
    /// `relative_scale` times each tensor's RMS.
    pub fn sibling(&self, jitter_seed: u64, relative_scale: f64) -> ToyDenoiser {
        let mut out = self.clone();
        out.id = format!("{}~{jitter_seed}", self.id);
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed ^ 0x0051_b11e);
        for t in out.tensors_mut() {
            let rms = (t.data.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
            for v in t.data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += relative_scale * rms * z;
            }
        }
        out
    }

    /// Largest absolute weight difference to another toy denoiser.
    pub fn max_weight_diff(&self, other: &ToyDenoiser) -> f64 {
        let mut a = self.clone();
        let mut b = other.clone();
        a.tensors_mut()
            .iter()
            .zip(b.tensors_mut().iter())
            .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

impl NoisePredictor for ToyDenoiser {
    fn id(&self) -> &str {
        &self.id
    }

    fn predict(&self, g: &mut Graph, x_t: Var, t: usize, cond: Option<CondInput>) -> Result<Var> {
        let shape = g.shape(x_t).to_vec();
        if shape.len() != 3 || shape[2] != CHANNELS {
            return Err(Error::ShapeMismatch { expected: vec![0, 0, CHANNELS], actual: shape });
        }
        let (h, w) = (shape[0], shape[1]);

        let cols = g.sparse(x_t, maps::im2col3x3(h, w));
        let conv_w = g.constant(self.conv_w.clone());
        let mut hidden = g.matmul(cols, conv_w);

        let temb = time_embedding(t);
        let mut bias = self.conv_b.data.clone();
        for (i, e) in temb.iter().enumerate() {
            for (j, b) in bias.iter_mut().enumerate() {
                *b += e * self.time_w.data[i * self.width + j];
            }
        }
        let bias = g.constant(Tensor::new(vec![self.width], bias));
        hidden = g.add_row(hidden, bias);
        hidden = g.tanh(hidden);

        if let Some(c) = cond {
            let feats = g.value(c.features);
            if feats.len() != COND_DIM {
                return Err(Error::ShapeMismatch { expected: vec![COND_DIM], actual: feats.shape.clone() });
            }
            let f = g.reshape(c.features, vec![1, COND_DIM]);
            let proj = g.constant(match c.route {
                Route::CrossAttention => self.cross_w.clone(),
                Route::SelfAttention => self.self_w.clone(),
            });
            let inj = g.matmul(f, proj);
            let inj = g.reshape(inj, vec![self.width]);
            hidden = g.add_row(hidden, inj);
        }

        let mix_w = g.constant(self.mix_w.clone());
        let mix_b = g.constant(self.mix_b.clone());
        hidden = g.matmul(hidden, mix_w);
        hidden = g.add_row(hidden, mix_b);
        hidden = g.tanh(hidden);

        let out_w = g.constant(self.out_w.clone());
        let out_b = g.constant(self.out_b.clone());
        let out = g.matmul(hidden, out_w);
        let out = g.add_row(out, out_b);
        Ok(g.reshape(out, vec![h, w, CHANNELS]))
    }
}

/// Options handed to backend factories.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackendOptions {
    /// Hidden width of toy denoisers.
    pub toy_width: usize,
    /// Checkpoint for real backends; ignored by toy ones.
    pub checkpoint: String,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self { toy_width: 8, checkpoint: String::new() }
    }
}

type BackendFactory = Box<dyn Fn(&BackendOptions) -> Result<Arc<dyn NoisePredictor>> + Send + Sync>;

/// Resolves backend identifiers to predictors.
///
/// `toy:<seed>` and `toy:<seed>~<jitter>` (a sibling with relative jitter 1e-2)
/// are always available. Other identifiers must be registered.
#[derive(Default)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

/// Relative weight jitter of sibling toy backends.
pub const SIBLING_JITTER: f64 = 1e-2;

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        id: impl Into<String>,
        factory: impl Fn(&BackendOptions) -> Result<Arc<dyn NoisePredictor>> + Send + Sync + 'static,
    ) -> Result<()> {
        let id = id.into();
        if self.factories.contains_key(&id) || id.starts_with("toy:") {
            return Err(Error::Duplicate { kind: "backend", id });
        }
        self.factories.insert(id, Box::new(factory));
        Ok(())
    }

    pub fn resolve(&self, id: &str, options: &BackendOptions) -> Result<Arc<dyn NoisePredictor>> {
        if let Some(rest) = id.strip_prefix("toy:") {
            let bad = || Error::Unknown { kind: "backend", id: id.to_string() };
            let (seed, jitter) = match rest.split_once('~') {
                Some((s, j)) => (s.parse::<u64>().map_err(|_| bad())?, Some(j.parse::<u64>().map_err(|_| bad())?)),
                None => (rest.parse::<u64>().map_err(|_| bad())?, None),
            };
            let base = make_toy_backend(seed, options.toy_width)?;
            return Ok(match jitter {
                Some(j) => Arc::new(base.sibling(j, SIBLING_JITTER)),
                None => Arc::new(base),
            });
        }
        match self.factories.get(id) {
            Some(f) => f(options),
            None => Err(Error::Unavailable {
                kind: "backend",
                id: id.to_string(),
                reason: format!("no plugin registered; point {PLUGIN_DIR_ENV} at the plugin weights and register it"),
            }),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graph::tests::fd_check;
    use crate::types::ImageTensor;
    use rand::Rng;

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[0.5]);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_linear_schedule(2, 0.0, 0.0).is_err());
        assert!(make_linear_schedule(2, 0.1, 0.05).is_err());
        assert!(make_linear_schedule(2, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::from_alpha_bar(vec![0.5, 0.5]).is_err());
        assert!(DiffusionSchedule::from_alpha_bar(vec![1.1]).is_err());
    }

    #[test]
    fn default_schedule_shape() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.num_timesteps(), 1000);
        assert!((s.alpha_bar()[0] - 0.99915).abs() < 1e-15);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar()[999] > 0.0);
    }

    #[test]
    fn add_noise_hand_value() {
        let s = DiffusionSchedule::from_alpha_bar(vec![0.25]).unwrap();
        let out = add_noise(&[0.5; 4], &[1.0; 4], 0, &s).unwrap();
        for v in out {
            assert!((v - (0.25 + 0.75f64.sqrt())).abs() < 1e-12);
            assert!((v - 1.11603).abs() < 1e-5);
        }
    }

    #[test]
    fn add_noise_limits_are_exact() {
        let x0 = [0.1, 0.7, 0.3];
        let eps = [1.5, -0.25, 0.75];
        let s = DiffusionSchedule::from_alpha_bar(vec![1.0, 1e-300]).unwrap();
        assert_eq!(add_noise(&x0, &eps, 0, &s).unwrap(), x0.to_vec());
        assert_eq!(add_noise(&x0, &eps, 1, &s).unwrap(), eps.to_vec());
        assert!(matches!(add_noise(&x0, &eps, 2, &s), Err(Error::TimestepOutOfRange { t: 2, max: 2 })));
    }

    #[test]
    fn add_noise_graph_matches_plain() {
        let s = DiffusionSchedule::default();
        let x0 = ImageTensor::random(4, 4, 1);
        let eps: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let v = g.constant(x0.to_tensor());
        let n = add_noise_var(&mut g, v, &eps, 500, &s).unwrap();
        let plain = add_noise(x0.data(), &eps, 500, &s).unwrap();
        for (a, b) in g.value(n).data.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    pub(crate) fn predict_plain(b: &dyn NoisePredictor, x: &ImageTensor, t: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.to_tensor());
        let out = b.predict(&mut g, v, t, None).unwrap();
        g.value(out).data.clone()
    }

    #[test]
    fn toy_backend_contracts() {
        assert!(make_toy_backend(0, 3).is_err());
        let a = make_toy_backend(7, 8).unwrap();
        let a2 = make_toy_backend(7, 8).unwrap();
        let b = make_toy_backend(8, 8).unwrap();
        let x = ImageTensor::random(32, 32, 11);
        let pa = predict_plain(&a, &x, 100);
        assert_eq!(pa.len(), 32 * 32 * 3);
        assert_eq!(pa, predict_plain(&a2, &x, 100));
        let diff = pa.iter().zip(predict_plain(&b, &x, 100)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn condition_changes_prediction() {
        let b = make_toy_backend(3, 8).unwrap();
        let x = ImageTensor::random(8, 8, 2);
        let mut g = Graph::new();
        let v = g.constant(x.to_tensor());
        let f = g.constant(Tensor::filled(vec![COND_DIM], 0.3));
        let plain = b.predict(&mut g, v, 10, None).unwrap();
        let cross = b.predict(&mut g, v, 10, Some(CondInput { route: Route::CrossAttention, features: f })).unwrap();
        let selfr = b.predict(&mut g, v, 10, Some(CondInput { route: Route::SelfAttention, features: f })).unwrap();
        assert_ne!(g.value(plain).data, g.value(cross).data);
        assert_ne!(g.value(cross).data, g.value(selfr).data);
    }

    #[test]
    fn prediction_error_gradient_matches_finite_differences() {
        let b = make_toy_backend(5, 8).unwrap();
        let x = ImageTensor::random(8, 8, 4).to_tensor();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = fd_check(&x, |g, v| {
            let pred = b.predict(g, v, 300, None).unwrap();
            let e = g.constant(Tensor::new(vec![8, 8, 3], eps.clone()));
            g.squared_distance(e, pred)
        });
        assert!(err < 1e-3, "relative L2 error {err}");
    }

    #[test]
    fn sibling_is_close_but_distinct() {
        let a = make_toy_backend(1, 8).unwrap();
        let s = a.sibling(2, SIBLING_JITTER);
        assert_eq!(s.id(), "toy:1~2");
        let d = a.max_weight_diff(&s);
        assert!(d > 0.0 && d < 0.1, "{d}");
    }

    #[test]
    fn registry_resolves_toys_and_rejects_unknown() {
        let mut reg = BackendRegistry::new();
        let opts = BackendOptions::default();
        assert_eq!(reg.resolve("toy:4", &opts).unwrap().id(), "toy:4");
        assert_eq!(reg.resolve("toy:4~1", &opts).unwrap().id(), "toy:4~1");
        assert!(matches!(reg.resolve("toy:x", &opts), Err(Error::Unknown { .. })));
        let err = reg.resolve("sd15", &opts).err().unwrap();
        assert!(err.to_string().contains(PLUGIN_DIR_ENV));
        reg.register("zero", |_| Ok(Arc::new(make_toy_backend(0, 4)?) as Arc<dyn NoisePredictor>)).unwrap();
        assert!(reg.resolve("zero", &opts).is_ok());
        assert!(reg.register("zero", |_| unreachable!()).is_err());
    }
}
