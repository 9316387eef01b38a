//! Differentiable augmentations applied to the protected image before the
//! objective is evaluated, so that optimized noise survives common
//! preprocessing.
//!
//! Each call to [`apply_augment`] samples exactly one transform from an [`AugmentSpec`]
//! (a single-sample estimate of the expectation over transformations). All
//! transforms are built from graph operations, so gradients reach the input.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, SparseMap, Tensor, Var};
use crate::maps;
use crate::types::{ImageTensor, CHANNELS};

/// One entry of an [`AugmentSpec`], with its selection probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    Identity {
        probability: f64,
    },
    /// Random crop covering `fraction` of each side, resized back bilinearly.
    CropResize {
        probability: f64,
        fraction: (f64, f64),
    },
    /// Differentiable JPEG at a quality drawn uniformly from the range.
    Jpeg {
        probability: f64,
        quality: (u8, u8),
    },
    GaussianNoise {
        probability: f64,
        sigma: f64,
    },
    /// Per-channel gain drawn from `channel_factor` plus a brightness offset
    /// drawn from `[-brightness, brightness]`.
    ColorJitter {
        probability: f64,
        channel_factor: (f64, f64),
        brightness: f64,
    },
}

impl AugmentOp {
    pub fn probability(&self) -> f64 {
        match *self {
            AugmentOp::Identity { probability }
            | AugmentOp::CropResize { probability, .. }
            | AugmentOp::Jpeg { probability, .. }
            | AugmentOp::GaussianNoise { probability, .. }
            | AugmentOp::ColorJitter { probability, .. } => probability,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AugmentOp::Identity { .. } => "identity",
            AugmentOp::CropResize { .. } => "crop_resize",
            AugmentOp::Jpeg { .. } => "jpeg",
            AugmentOp::GaussianNoise { .. } => "gaussian_noise",
            AugmentOp::ColorJitter { .. } => "color_jitter",
        }
    }

    fn validate(&self) -> Result<()> {
        let p = self.probability();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid("augmentation", format!("{} probability {p} outside [0, 1]", self.kind())));
        }
        let bad = |reason: String| Err(Error::invalid("augmentation", reason));
        match *self {
            AugmentOp::Identity { .. } => Ok(()),
            AugmentOp::CropResize { fraction: (lo, hi), .. } => {
                if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                    return bad(format!("crop fraction range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
                }
                Ok(())
            }
            AugmentOp::Jpeg { quality: (lo, hi), .. } => {
                if !(lo >= 1 && lo <= hi && hi <= 100) {
                    return bad(format!("jpeg quality range ({lo}, {hi}) must lie in 1..=100"));
                }
                Ok(())
            }
            AugmentOp::GaussianNoise { sigma, .. } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return bad(format!("noise sigma {sigma} must be >= 0"));
                }
                Ok(())
            }
            AugmentOp::ColorJitter { channel_factor: (lo, hi), brightness, .. } => {
                if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return bad(format!("jitter factor range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
                }
                if !(brightness >= 0.0 && brightness.is_finite()) {
                    return bad(format!("brightness offset {brightness} must be >= 0"));
                }
                Ok(())
            }
        }
    }
}

/// Ordered list of candidate augmentations.
///
/// Probabilities are selection probabilities for a single draw. Any mass left
/// over (when they sum to less than one) selects the identity; if they sum to
/// more than one they are normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            ops: vec![
                AugmentOp::Identity { probability: 0.5 },
                AugmentOp::CropResize { probability: 0.125, fraction: (0.8, 1.0) },
                AugmentOp::Jpeg { probability: 0.125, quality: (50, 95) },
                AugmentOp::GaussianNoise { probability: 0.125, sigma: 2.0 / 255.0 },
                AugmentOp::ColorJitter { probability: 0.125, channel_factor: (0.9, 1.1), brightness: 0.05 },
            ],
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self { ops: vec![AugmentOp::Identity { probability: 1.0 }] }
    }

    pub fn only(op: AugmentOp) -> Self {
        Self { ops: vec![op] }
    }

    pub fn validate(&self) -> Result<()> {
        self.ops.iter().try_for_each(AugmentOp::validate)
    }
}

/// The transform actually applied by one call, with its sampled parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Applied {
    Identity,
    CropResize { top: f64, left: f64, height: f64, width: f64 },
    Jpeg { quality: u8 },
    GaussianNoise { sigma: f64 },
    ColorJitter { factors: [f64; 3], brightness: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentOutcome {
    pub applied: Applied,
    pub warning: Option<String>,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn choose<'a>(spec: &'a AugmentSpec, rng: &mut impl Rng) -> Option<&'a AugmentOp> {
    let total: f64 = spec.ops.iter().map(AugmentOp::probability).sum();
    let norm = total.max(1.0);
    let u: f64 = rng.random::<f64>() * norm;
    let mut acc = 0.0;
    for op in &spec.ops {
        acc += op.probability();
        if u < acc {
            return Some(op);
        }
    }
    None
}

/// Samples one transform from `spec` and applies it to `image` (`[h, w, 3]`).
/// The result is clamped to `[0, 1]`.
pub fn apply_augment(g: &mut Graph, image: Var, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<(Var, AugmentOutcome)> {
    spec.validate()?;
    if spec.ops.is_empty() {
        return Ok((image, AugmentOutcome { applied: Applied::Identity, warning: Some("empty augmentation spec; identity applied".into()) }));
    }
    let shape = g.shape(image).to_vec();
    let (h, w) = (shape[0], shape[1]);
    let Some(op) = choose(spec, rng) else {
        return Ok((image, AugmentOutcome { applied: Applied::Identity, warning: None }));
    };
    let (out, applied) = match *op {
        AugmentOp::Identity { .. } => (image, Applied::Identity),
        AugmentOp::CropResize { fraction, .. } => {
            let f = uniform(rng, fraction);
            let (ch, cw) = (f * h as f64, f * w as f64);
            let top = uniform(rng, (0.0, h as f64 - ch));
            let left = uniform(rng, (0.0, w as f64 - cw));
            let map = Arc::new(maps::crop_resize(h, w, top, left, ch, cw, h, w));
            let y = g.sparse(image, map);
            (g.clamp(y, 0.0, 1.0), Applied::CropResize { top, left, height: ch, width: cw })
        }
        AugmentOp::Jpeg { quality: (lo, hi), .. } => {
            let q = rng.random_range(lo..=hi);
            (diff_jpeg_var(g, image, q)?, Applied::Jpeg { quality: q })
        }
        AugmentOp::GaussianNoise { sigma, .. } => {
            let noise: Vec<f64> = (0..h * w * CHANNELS)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                })
                .collect();
            if sigma == 0.0 {
                (image, Applied::GaussianNoise { sigma })
            } else {
                let n = g.constant(Tensor::new(shape.clone(), noise));
                let y = g.add(image, n);
                (g.clamp(y, 0.0, 1.0), Applied::GaussianNoise { sigma })
            }
        }
        AugmentOp::ColorJitter { channel_factor, brightness, .. } => {
            let factors = [uniform(rng, channel_factor), uniform(rng, channel_factor), uniform(rng, channel_factor)];
            let b = uniform(rng, (-brightness, brightness));
            let fv = g.constant(Tensor::new(vec![CHANNELS], factors.to_vec()));
            let y = g.mul_row(image, fv);
            let y = g.shift(y, b);
            (g.clamp(y, 0.0, 1.0), Applied::ColorJitter { factors, brightness: b })
        }
    };
    Ok((out, AugmentOutcome { applied, warning: None }))
}

/// Applies one sampled augmentation to a concrete image.
pub fn augment_image(image: &ImageTensor, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<(ImageTensor, AugmentOutcome)> {
    let mut g = Graph::new();
    let v = g.constant(image.to_tensor());
    let (out, outcome) = apply_augment(&mut g, v, spec, rng)?;
    let img = crate::types::clamp_to_pixel_range(image.height(), image.width(), &g.value(out).data)?;
    Ok((img, outcome))
}

const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56., 14., 17., 22., 29., 51.,
    87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_TABLE: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99., 99., 99., 47., 66., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99.,
];

/// Quantization table for `quality` using the usual libjpeg scaling.
pub fn quant_table(base: &[f64; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, b) in out.iter_mut().zip(base) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Orthonormal 8x8 DCT-II basis `C[k][n]`.
fn dct8() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * n + 1) * k) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// `kron(C, C)` as a `[64, 64]` matrix acting on row-major 8x8 blocks.
fn dct64() -> Tensor {
    let c = dct8();
    let mut m = vec![0.0; 64 * 64];
    for ku in 0..8 {
        for kv in 0..8 {
            for u in 0..8 {
                for v in 0..8 {
                    m[(ku * 8 + kv) * 64 + u * 8 + v] = c[ku][u] * c[kv][v];
                }
            }
        }
    }
    Tensor::new(vec![64, 64], m)
}

fn transpose64(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; 64 * 64];
    for i in 0..64 {
        for j in 0..64 {
            out[j * 64 + i] = t.data[i * 64 + j];
        }
    }
    Tensor::new(vec![64, 64], out)
}

const RGB_TO_YCC: [[f64; 3]; 3] = [[0.299, 0.587, 0.114], [-0.168_736, -0.331_264, 0.5], [0.5, -0.418_688, -0.081_312]];

/// Exact inverse of [`RGB_TO_YCC`], so the unquantized path round-trips.
fn ycc_to_rgb() -> [[f64; 3]; 3] {
    let m = RGB_TO_YCC;
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det: f64 = (0..3).map(|c| m[0][c] * cof(0, c)).sum();
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof(j, i) / det;
        }
    }
    inv
}

fn color_matrix_t(m: &[[f64; 3]; 3]) -> Tensor {
    // rows of the image are pixels, so the product is x @ M^T
    let mut d = vec![0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            d[j * 3 + i] = m[i][j];
        }
    }
    Tensor::new(vec![3, 3], d)
}

/// Block layout: `[3 * nblocks, 64]` with rows ordered channel-major, then
/// block row, then block column. Image edges are replicated into the padding.
fn block_maps(h: usize, w: usize) -> (Arc<SparseMap>, Arc<SparseMap>, usize) {
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let nb = bh * bw;
    let mut fwd = Vec::with_capacity(3 * nb * 64);
    for c in 0..CHANNELS {
        for by in 0..bh {
            for bx in 0..bw {
                for u in 0..8 {
                    for v in 0..8 {
                        let y = (by * 8 + u).min(h - 1);
                        let x = (bx * 8 + v).min(w - 1);
                        fwd.push(Some((y * w + x) * CHANNELS + c));
                    }
                }
            }
        }
    }
    let mut inv = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let block = (c * bh + y / 8) * bw + x / 8;
                inv.push(Some(block * 64 + (y % 8) * 8 + x % 8));
            }
        }
    }
    (Arc::new(SparseMap::gather(vec![3 * nb, 64], h * w * CHANNELS, fwd)), Arc::new(SparseMap::gather(vec![h, w, CHANNELS], 3 * nb * 64, inv)), nb)
}

/// Differentiable JPEG approximation: YCbCr conversion, 8x8 block DCT,
/// quantization with straight-through rounding at `quality`'s tables, and the
/// inverse path. No chroma subsampling.
pub fn diff_jpeg_var(g: &mut Graph, image: Var, quality: u8) -> Result<Var> {
    jpeg_path(g, image, quality, true)
}

fn jpeg_path(g: &mut Graph, image: Var, quality: u8, quantize: bool) -> Result<Var> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid("jpeg quality", format!("{quality} outside 1..=100")));
    }
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != CHANNELS || shape[0] < 8 || shape[1] < 8 {
        return Err(Error::Resolution { what: "jpeg".into(), expected: "at least 8x8x3".into(), actual: format!("{shape:?}") });
    }
    let (h, w) = (shape[0], shape[1]);
    let px = g.reshape(image, vec![h * w, CHANNELS]);
    let px = g.scale(px, 255.0);
    let to_ycc = g.constant(color_matrix_t(&RGB_TO_YCC));
    let ycc = g.matmul(px, to_ycc);
    // Level shift: Y - 128; chroma offsets of +128 cancel against the shift.
    let level = g.constant(Tensor::new(vec![CHANNELS], vec![-128.0, 0.0, 0.0]));
    let ycc = g.add_row(ycc, level);
    let ycc = g.reshape(ycc, vec![h, w, CHANNELS]);

    let (to_blocks, from_blocks, nb) = block_maps(h, w);
    let blocks = g.sparse(ycc, to_blocks);
    let d = dct64();
    let dt = g.constant(transpose64(&d));
    let coeffs = g.matmul(blocks, dt);

    let coeffs = if quantize {
        let lq = quant_table(&LUMA_TABLE, quality);
        let cq = quant_table(&CHROMA_TABLE, quality);
        let mut q = Vec::with_capacity(3 * nb * 64);
        for c in 0..CHANNELS {
            let table = if c == 0 { &lq } else { &cq };
            for _ in 0..nb {
                q.extend_from_slice(table);
            }
        }
        let inv_q = g.constant(Tensor::new(vec![3 * nb, 64], q.iter().map(|v| 1.0 / v).collect()));
        let q = g.constant(Tensor::new(vec![3 * nb, 64], q));
        let scaled = g.mul(coeffs, inv_q);
        let rounded = g.straight_round(scaled);
        g.mul(rounded, q)
    } else {
        coeffs
    };

    let dv = g.constant(d);
    let blocks = g.matmul(coeffs, dv);
    let ycc = g.sparse(blocks, from_blocks);
    let ycc = g.reshape(ycc, vec![h * w, CHANNELS]);
    let to_rgb = g.constant(color_matrix_t(&ycc_to_rgb()));
    let rgb = g.matmul(ycc, to_rgb);
    let rgb = g.shift(rgb, 128.0);
    let rgb = g.scale(rgb, 1.0 / 255.0);
    let rgb = g.reshape(rgb, vec![h, w, CHANNELS]);
    Ok(g.clamp(rgb, 0.0, 1.0))
}

/// [`diff_jpeg_var`] on a concrete image.
pub fn diff_jpeg(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let mut g = Graph::new();
    let v = g.constant(image.to_tensor());
    let out = diff_jpeg_var(&mut g, v, quality)?;
    crate::types::clamp_to_pixel_range(image.height(), image.width(), &g.value(out).data)
}
