//! Domain types shared across the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tensor;

pub const CHANNELS: usize = 3;

/// Default l-infinity radius, 13/255 in unit pixel range.
pub const DEFAULT_RADIUS: f64 = 13.0 / 255.0;

/// An RGB image stored row-major as `[height, width, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Validates finiteness and range.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len())?;
        for (index, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinitePixel { index });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("image", format!("value {v} at index {index} outside [0, 1]")));
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Builds an image from `f(row, col, channel)`, clamping into range.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    /// Uniform random pixels from a seeded generator.
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..height * width * CHANNELS).map(|_| rng.random::<f64>()).collect();
        Self { height, width, data }
    }

    /// A smooth structured test pattern, useful where uniform noise is a poor stand-in
    /// for a photograph.
    pub fn pattern(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let freqs: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..3.0)).collect();
        Self::from_fn(height, width, |y, x, c| {
            let u = x as f64 / width as f64 * std::f64::consts::TAU;
            let v = y as f64 / height as f64 * std::f64::consts::TAU;
            0.5 + 0.25 * (freqs[c] * u + phases[c]).sin() + 0.2 * (freqs[c + 3] * v + phases[c + 3]).cos()
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, CHANNELS]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone())
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch { expected: self.shape().to_vec(), actual: other.shape().to_vec() });
        }
        Ok(())
    }

    /// Largest absolute per-element difference.
    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("image", "zero-sized dimension"));
    }
    if len != height * width * CHANNELS {
        return Err(Error::ShapeMismatch { expected: vec![height, width, CHANNELS], actual: vec![len] });
    }
    Ok(())
}

/// Clamps an unconstrained array into the valid pixel range.
pub fn clamp_to_pixel_range(height: usize, width: usize, values: &[f64]) -> Result<ImageTensor> {
    check_len(height, width, values.len())?;
    let mut data = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinitePixel { index });
        }
        data.push(v.clamp(0.0, 1.0));
    }
    Ok(ImageTensor { height, width, data })
}

/// Signed additive noise with the shape of its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    height: usize,
    width: usize,
    data: Vec<f64>,
    /// Radius the values were projected into, if any.
    projected: Option<f64>,
}

impl Perturbation {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len(height, width, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePixel { index });
        }
        Ok(Self { height, width, data, projected: None })
    }

    /// `protected - original`, tagged as projected to `radius`.
    pub fn between(original: &ImageTensor, protected: &ImageTensor, radius: Option<f64>) -> Result<Self> {
        original.same_shape(protected)?;
        let data: Vec<f64> = protected.data.iter().zip(&original.data).map(|(p, o)| p - o).collect();
        let p = Self { height: original.height, width: original.width, data, projected: None };
        match radius {
            Some(r) => p.tag_projected(r),
            None => Ok(p),
        }
    }

    pub fn zeros_like(image: &ImageTensor) -> Self {
        Self { height: image.height, width: image.width, data: vec![0.0; image.len()], projected: None }
    }

    /// Marks the perturbation as lying in the l-infinity ball of `radius`.
    pub fn tag_projected(mut self, radius: f64) -> Result<Self> {
        let norm = self.linf_norm();
        if norm > radius + 1e-6 {
            return Err(Error::Invariant(format!("perturbation norm {norm} exceeds radius {radius}")));
        }
        self.projected = Some(radius);
        Ok(self)
    }

    /// Clamps every entry to `[-radius, radius]` and tags the result.
    pub fn clamped(&self, radius: f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v.clamp(-radius, radius)).collect(), projected: Some(radius) }
    }

    pub fn projected_radius(&self) -> Option<f64> {
        self.projected
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, CHANNELS]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    /// `clamp(image + self)`.
    pub fn apply(&self, image: &ImageTensor) -> Result<ImageTensor> {
        if image.shape() != self.shape() {
            return Err(Error::ShapeMismatch { expected: image.shape().to_vec(), actual: self.shape().to_vec() });
        }
        let sum: Vec<f64> = image.data.iter().zip(&self.data).map(|(a, b)| a + b).collect();
        clamp_to_pixel_range(self.height, self.width, &sum)
    }
}

/// The constraint set of the iterative protector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBudget {
    /// l-infinity radius in unit pixel range.
    pub radius: f64,
    /// Step size of each signed-gradient update.
    pub step: f64,
    pub iterations: usize,
}

impl Default for NoiseBudget {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, step: 1e-3, iterations: 300 }
    }
}

impl NoiseBudget {
    pub fn new(radius: f64, step: f64, iterations: usize) -> Result<Self> {
        let b = Self { radius, step, iterations };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid("budget", format!("radius must be > 0, got {}", self.radius)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("budget", format!("step must be > 0, got {}", self.step)));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("budget", "iterations must be >= 1"));
        }
        Ok(())
    }
}

/// Weights of the attack objective: unconditional term, one weight per
/// conditioner, and the regularization penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_con: Vec<f64>,
    pub w_reg: f64,
}

impl LossWeights {
    pub fn new(w_adv: f64, w_con: Vec<f64>, w_reg: f64) -> Result<Self> {
        let w = Self { w_adv, w_con, w_reg };
        w.validate()?;
        Ok(w)
    }

    /// Weights used by the iterative protector: (3, [5, 5, 2, 2], 0).
    pub fn pgd_default() -> Self {
        Self { w_adv: 3.0, w_con: vec![5.0, 5.0, 2.0, 2.0], w_reg: 0.0 }
    }

    /// Weights used to train the noise encoder: (30, [50, 60, 30, 30], 200).
    pub fn encoder_default() -> Self {
        Self { w_adv: 30.0, w_con: vec![50.0, 60.0, 30.0, 30.0], w_reg: 200.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.w_adv).chain(self.w_con.iter().copied()).chain(std::iter::once(self.w_reg));
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("loss weights", format!("weight {w} is negative or non-finite")));
            }
        }
        if self.w_adv == 0.0 && self.w_con.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("loss weights", "at least one attack weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pgd,
    Encoder,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Pgd => "pgd",
            Method::Encoder => "encoder",
        })
    }
}

/// Everything needed to reproduce and audit one protection.
#[derive(Clone, Debug)]
pub struct ProtectionRecord {
    pub original: ImageTensor,
    pub perturbation: Perturbation,
    pub protected: ImageTensor,
    pub method: Method,
    pub seed: u64,
    pub budget: NoiseBudget,
    /// Per-iteration stochastic objective, `(iteration, value)`.
    pub objective_trace: Vec<(usize, f64)>,
    /// Objective on a frozen evaluation set, sampled periodically.
    pub eval_trace: Vec<(usize, f64)>,
    pub backend_ids: Vec<String>,
    /// Number of encoder forward passes spent on this record.
    pub forward_calls: usize,
}

impl ProtectionRecord {
    /// Checks `protected == clamp(original + perturbation)` within 1e-6.
    pub fn check_consistency(&self) -> Result<()> {
        let rebuilt = self.perturbation.apply(&self.original)?;
        let gap = rebuilt.linf_distance(&self.protected)?;
        if gap > 1e-6 {
            return Err(Error::Invariant(format!("protected image deviates from original + perturbation by {gap}")));
        }
        if self.method == Method::Pgd && self.objective_trace.len() != self.budget.iterations + 1 {
            return Err(Error::Invariant(format!(
                "objective trace has {} entries, expected {}",
                self.objective_trace.len(),
                self.budget.iterations + 1
            )));
        }
        Ok(())
    }
}
