//! Adversarial noise encoder: a ViT that maps an image to protective noise in a
//! single forward pass.
//!
//! The image is split into `patch x patch` tiles, embedded, given learned
//! position embeddings, passed through pre-norm transformer blocks, and each
//! token is mapped back to a pixel tile by a zero-initialized linear head.

mod checkpoint;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, SparseMap, Tensor, Var};
use crate::maps;
use crate::types::{ImageTensor, Method, NoiseBudget, Perturbation, ProtectionRecord, CHANNELS};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{train_ane, train_ane_into, PhaseSchedule, TrainEvent, TrainLog, TrainOptions, TrainStep};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub resolution: usize,
    /// MLP width as a multiple of `hidden`.
    pub mlp_ratio: f64,
    /// Multiplier on the head output, in pixel units.
    pub output_scale: f64,
}

impl Default for EncoderConfig {
    /// The full-size architecture: 12 layers, hidden 384, 6 heads, 8x8
    /// patches, 512x512 input.
    fn default() -> Self {
        Self { layers: 12, hidden: 384, heads: 6, patch: 8, resolution: 512, mlp_ratio: 4.0, output_scale: 0.05 }
    }
}

impl EncoderConfig {
    /// A small configuration for tests and desk-scale training.
    pub fn test_scale(resolution: usize, layers: usize, hidden: usize, heads: usize) -> Self {
        Self { layers, hidden, heads, resolution, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("encoder config", reason));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.patch == 0 || self.resolution == 0 {
            return bad("layers, hidden, heads, patch and resolution must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.resolution.is_multiple_of(self.patch) {
            return bad(format!("resolution {} is not divisible by patch {}", self.resolution, self.patch));
        }
        if !(self.mlp_ratio > 0.0 && self.output_scale > 0.0) {
            return bad("mlp_ratio and output_scale must be positive".into());
        }
        if self.mlp_hidden() == 0 {
            return bad("mlp_ratio * hidden rounds to zero".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.resolution / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden as f64 * self.mlp_ratio).round() as usize
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Adam moments carried across training sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Encoder parameters plus bookkeeping.
#[derive(Debug)]
pub struct AneEncoder {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    /// Training steps taken so far.
    pub step: u64,
    pub adam: Option<AdamState>,
    forward_calls: AtomicUsize,
}

impl Clone for AneEncoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            step: self.step,
            adam: self.adam.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

fn normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data)
}

/// Initializes an encoder deterministically from `seed`. The output head is
/// zero, so a fresh encoder produces zero noise.
pub fn ane_init(config: &EncoderConfig, seed: u64) -> Result<AneEncoder> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, pd, mlp) = (config.hidden, config.patch_dim(), config.mlp_hidden());
    let std = 0.02;
    let mut names = Vec::new();
    let mut params = Vec::new();
    let mut add = |name: String, t: Tensor| {
        names.push(name);
        params.push(t);
    };
    add("patch.w".into(), normal(vec![pd, h], (1.0 / pd as f64).sqrt(), &mut rng));
    add("patch.b".into(), Tensor::zeros(vec![h]));
    add("pos".into(), normal(vec![config.tokens(), h], std, &mut rng));
    for l in 0..config.layers {
        add(format!("block{l}.ln1.g"), Tensor::filled(vec![h], 1.0));
        add(format!("block{l}.ln1.b"), Tensor::zeros(vec![h]));
        add(format!("block{l}.qkv.w"), normal(vec![h, 3 * h], (1.0 / h as f64).sqrt(), &mut rng));
        add(format!("block{l}.qkv.b"), Tensor::zeros(vec![3 * h]));
        add(format!("block{l}.proj.w"), normal(vec![h, h], std, &mut rng));
        add(format!("block{l}.proj.b"), Tensor::zeros(vec![h]));
        add(format!("block{l}.ln2.g"), Tensor::filled(vec![h], 1.0));
        add(format!("block{l}.ln2.b"), Tensor::zeros(vec![h]));
        add(format!("block{l}.fc1.w"), normal(vec![h, mlp], (1.0 / h as f64).sqrt(), &mut rng));
        add(format!("block{l}.fc1.b"), Tensor::zeros(vec![mlp]));
        add(format!("block{l}.fc2.w"), normal(vec![mlp, h], std, &mut rng));
        add(format!("block{l}.fc2.b"), Tensor::zeros(vec![h]));
    }
    add("final_ln.g".into(), Tensor::filled(vec![h], 1.0));
    add("final_ln.b".into(), Tensor::zeros(vec![h]));
    add("head.w".into(), Tensor::zeros(vec![h, pd]));
    add("head.b".into(), Tensor::zeros(vec![pd]));
    Ok(AneEncoder { config: config.clone(), names, params, step: 0, adam: None, forward_calls: AtomicUsize::new(0) })
}

/// Column slice `[.., start, start + width)` of a `[rows, cols]` matrix.
fn column_slice(rows: usize, cols: usize, start: usize, width: usize) -> Arc<SparseMap> {
    let idx = (0..rows).flat_map(|r| (start..start + width).map(move |c| Some(r * cols + c)));
    Arc::new(SparseMap::gather(vec![rows, width], rows * cols, idx))
}

impl AneEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Number of forward passes run through [`ane_forward`].
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub(crate) fn from_parts(config: EncoderConfig, names: Vec<String>, params: Vec<Tensor>, step: u64, adam: Option<AdamState>) -> Result<Self> {
        let fresh = ane_init(&config, 0)?;
        if fresh.names != names {
            return Err(Error::Checkpoint("parameter names do not match the configuration".into()));
        }
        for ((name, want), got) in names.iter().zip(&fresh.params).zip(&params) {
            if want.shape != got.shape {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", got.shape, want.shape)));
            }
        }
        Ok(Self { config, names, params, step, adam, forward_calls: AtomicUsize::new(0) })
    }

    fn check_resolution(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.resolution;
        if shape != [r, r, CHANNELS] {
            return Err(Error::Resolution {
                what: "encoder".into(),
                expected: format!("{r}x{r}x{CHANNELS}"),
                actual: shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
            });
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. `params` are the graph nodes holding
    /// this encoder's tensors, in order.
    pub fn forward_graph(&self, g: &mut Graph, image: Var, params: &[Var]) -> Result<Var> {
        self.check_resolution(g.shape(image))?;
        let c = &self.config;
        let (r, p, h, t) = (c.resolution, c.patch, c.hidden, c.tokens());
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter list too short");

        let centred = g.shift(image, -0.5);
        let tiles = g.sparse(centred, maps::patchify(r, r, p));
        let (pw, pb, pos) = (next(), next(), next());
        let x = g.matmul(tiles, pw);
        let x = g.add_row(x, pb);
        let mut x = g.add(x, pos);

        let dh = c.head_dim();
        let qkv_cols = 3 * h;
        let att_scale = 1.0 / (dh as f64).sqrt();
        for _ in 0..c.layers {
            let (ln1g, ln1b, qkvw, qkvb, projw, projb) = (next(), next(), next(), next(), next(), next());
            let (ln2g, ln2b, fc1w, fc1b, fc2w, fc2b) = (next(), next(), next(), next(), next(), next());

            let y = g.layer_norm_rows(x, LN_EPS);
            let y = g.mul_row(y, ln1g);
            let y = g.add_row(y, ln1b);
            let qkv = g.matmul(y, qkvw);
            let qkv = g.add_row(qkv, qkvb);
            let mut heads = Vec::with_capacity(c.heads);
            for head in 0..c.heads {
                let q = g.sparse(qkv, column_slice(t, qkv_cols, head * dh, dh));
                let k = g.sparse(qkv, column_slice(t, qkv_cols, h + head * dh, dh));
                let v = g.sparse(qkv, column_slice(t, qkv_cols, 2 * h + head * dh, dh));
                let scores = g.matmul_nt(q, k);
                let scores = g.scale(scores, att_scale);
                let att = g.softmax_rows(scores);
                heads.push(g.matmul(att, v));
            }
            let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            let o = g.matmul(merged, projw);
            let o = g.add_row(o, projb);
            x = g.add(x, o);

            let y = g.layer_norm_rows(x, LN_EPS);
            let y = g.mul_row(y, ln2g);
            let y = g.add_row(y, ln2b);
            let y = g.matmul(y, fc1w);
            let y = g.add_row(y, fc1b);
            let y = g.gelu(y);
            let y = g.matmul(y, fc2w);
            let y = g.add_row(y, fc2b);
            x = g.add(x, y);
        }

        let (lng, lnb, hw, hb) = (next(), next(), next(), next());
        let y = g.layer_norm_rows(x, LN_EPS);
        let y = g.mul_row(y, lng);
        let y = g.add_row(y, lnb);
        let out = g.matmul(y, hw);
        let out = g.add_row(out, hb);
        let out = g.scale(out, c.output_scale);
        Ok(g.sparse(out, maps::unpatchify(r, r, p)))
    }

    /// Adds this encoder's tensors to `g` as trainable leaves.
    pub fn param_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.clone())).collect()
    }

    fn constant_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.constant(t.clone())).collect()
    }
}

/// One forward pass: the (unclamped) noise for `image`.
pub fn ane_forward(encoder: &AneEncoder, image: &ImageTensor) -> Result<Perturbation> {
    encoder.check_resolution(&image.shape())?;
    let mut g = Graph::new();
    let params = encoder.constant_vars(&mut g);
    let x = g.constant(image.to_tensor());
    let noise = encoder.forward_graph(&mut g, x, &params)?;
    encoder.forward_calls.fetch_add(1, Ordering::Relaxed);
    Perturbation::new(image.height(), image.width(), g.value(noise).data.clone())
}

/// Protects `image` with exactly one encoder pass. With `clamp_radius`, the
/// noise is clamped to `[-r, r]` before it is added.
pub fn encoder_protect(encoder: &AneEncoder, image: &ImageTensor, clamp_radius: Option<f64>) -> Result<ProtectionRecord> {
    if let Some(r) = clamp_radius {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid("clamp radius", format!("must be positive, got {r}")));
        }
    }
    let before = encoder.forward_calls();
    let raw = ane_forward(encoder, image)?;
    let forward_calls = encoder.forward_calls() - before;
    if forward_calls != 1 {
        return Err(Error::Invariant(format!("encoder protection ran {forward_calls} forward passes")));
    }
    let noise = match clamp_radius {
        Some(r) => raw.clamped(r),
        None => raw,
    };
    let protected = noise.apply(image)?;
    // Store the perturbation that was effectively applied after the pixel clamp.
    let perturbation = Perturbation::between(image, &protected, clamp_radius)?;
    let radius = clamp_radius.unwrap_or_else(|| perturbation.linf_norm().max(f64::MIN_POSITIVE));
    let record = ProtectionRecord {
        original: image.clone(),
        perturbation,
        protected,
        method: Method::Encoder,
        seed: 0,
        budget: NoiseBudget { radius, step: 0.0, iterations: 1 },
        objective_trace: Vec::new(),
        eval_trace: Vec::new(),
        backend_ids: Vec::new(),
        forward_calls,
    };
    record.check_consistency()?;
    Ok(record)
}
