//! Real (non-differentiable) post-processing transforms, the robustness
//! suite, and the held-out backend transfer harness.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;
use std::sync::Arc;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, ImageFormat, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim, SSIM_WINDOW};
use super::MetricValue;
use crate::backend::{DiffusionSchedule, NoisePredictor};
use crate::error::{Error, Result};
use crate::io::{from_rgb8, to_rgb8};
use crate::loss::{adv_term_with_draws, NoiseDraw, Reduction};
use crate::types::{clamp_to_pixel_range, ImageTensor, ProtectionRecord};

/// A post-processing step applied to a finished image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    /// Baseline JPEG encode and decode at `quality` in `1..=100`.
    Jpeg {
        quality: u8,
    },
    /// Centre crop keeping `fraction` of each side, resized back.
    CropResize {
        fraction: f64,
    },
    /// Additive Gaussian noise with standard deviation `sigma`.
    GaussianNoise {
        sigma: f64,
    },
    /// Adds `+shift` to red and `-shift` to blue.
    ColorShift {
        shift: f64,
    },
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => write!(f, "identity"),
            Transform::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            Transform::CropResize { fraction } => write!(f, "crop:{fraction}"),
            Transform::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
            Transform::ColorShift { shift } => write!(f, "color:{shift}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    /// Parses `identity`, `jpeg:Q`, `crop:F`, `noise:S` or `color:S`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::invalid("transform", format!("`{s}`: {reason}"));
        let (kind, arg) = match s.trim().split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let num = || -> Result<f64> {
            let a = arg.ok_or_else(|| bad("missing parameter".into()))?;
            a.parse::<f64>().map_err(|e| bad(e.to_string()))
        };
        let t = match kind {
            "identity" => Transform::Identity,
            "jpeg" => {
                let q = num()?;
                if !(1.0..=100.0).contains(&q) || q.fract() != 0.0 {
                    return Err(bad("quality must be an integer in 1..=100".into()));
                }
                Transform::Jpeg { quality: q as u8 }
            }
            "crop" => {
                let fraction = num()?;
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(bad("fraction must lie in (0, 1]".into()));
                }
                Transform::CropResize { fraction }
            }
            "noise" => {
                let sigma = num()?;
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(bad("sigma must be >= 0".into()));
                }
                Transform::GaussianNoise { sigma }
            }
            "color" => {
                let shift = num()?;
                if shift.is_nan() || shift.abs() > 1.0 {
                    return Err(bad("shift must lie in [-1, 1]".into()));
                }
                Transform::ColorShift { shift }
            }
            other => return Err(bad(format!("unknown kind `{other}`"))),
        };
        Ok(t)
    }
}

/// Parses a comma-separated list such as `jpeg:75,crop:0.9`.
pub fn parse_transforms(spec: &str) -> Result<Vec<Transform>> {
    spec.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

fn codec_err(e: image::ImageError) -> Error {
    Error::Codec { path: "<memory>".into(), message: e.to_string() }
}

/// Applies `transform`. `seed` drives the noise transform only.
pub fn apply_transform(image: &ImageTensor, transform: Transform, seed: u64) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    match transform {
        Transform::Identity => Ok(image.clone()),
        Transform::Jpeg { quality } => {
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&to_rgb8(image)).map_err(codec_err)?;
            let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg).map_err(codec_err)?;
            Ok(from_rgb8(&decoded.to_rgb8()))
        }
        Transform::CropResize { fraction } => {
            let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
            let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
            let (top, left) = ((h - ch) / 2, (w - cw) / 2);
            let raw: Vec<f32> = image.data().iter().map(|&v| v as f32).collect();
            let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches dimensions");
            let crop = imageops::crop_imm(&buf, left as u32, top as u32, cw as u32, ch as u32).to_image();
            let resized = imageops::resize(&crop, w as u32, h as u32, FilterType::Triangle);
            let data: Vec<f64> = resized.into_raw().into_iter().map(f64::from).collect();
            clamp_to_pixel_range(h, w, &data)
        }
        Transform::GaussianNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("transform", e.to_string()))?;
            let data: Vec<f64> = image.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            clamp_to_pixel_range(h, w, &data)
        }
        Transform::ColorShift { shift } => {
            let offsets = [shift, 0.0, -shift];
            let data: Vec<f64> = image.data().iter().enumerate().map(|(i, v)| v + offsets[i % 3]).collect();
            clamp_to_pixel_range(h, w, &data)
        }
    }
}

/// Attack-effectiveness proxy: the unconditional prediction error of one
/// backend under draws frozen by `seed`.
#[derive(Clone)]
pub struct AdvProbe {
    pub backend: Arc<dyn NoisePredictor>,
    pub schedule: DiffusionSchedule,
    pub samples: usize,
    pub seed: u64,
}

impl AdvProbe {
    pub fn new(backend: Arc<dyn NoisePredictor>, schedule: DiffusionSchedule, samples: usize, seed: u64) -> Self {
        Self { backend, schedule, samples, seed }
    }

    pub fn draws(&self, len: usize) -> Vec<NoiseDraw> {
        NoiseDraw::sample_n(&mut ChaCha8Rng::seed_from_u64(self.seed), &self.schedule, len, self.samples)
    }

    pub fn measure(&self, image: &ImageTensor) -> Result<f64> {
        let draws = self.draws(image.len());
        adv_term_with_draws(self.backend.as_ref(), image, &self.schedule, &draws, None, Reduction::Mean)
    }
}

/// Outcome of one transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub transform: String,
    /// Probe value on the transformed protected image.
    pub adv_protected: f64,
    /// Probe value on the transformed clean image.
    pub adv_clean_transformed: f64,
    /// `(adv_protected - adv_clean) / (adv_protected_before - adv_clean)`,
    /// with `adv_clean` on the untransformed original. `None` if the
    /// untransformed margin is zero.
    pub retention: Option<f64>,
    /// Against the original.
    pub psnr: MetricValue,
    /// Against the original; absent for images below the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub probe_backend: String,
    pub probe_seed: u64,
    pub adv_clean: f64,
    pub adv_protected: f64,
    pub transforms: Vec<TransformReport>,
}

/// Applies each transform to the protected image (and, for reference, to the
/// original) and re-measures the attack margin.
pub fn robustness_suite(record: &ProtectionRecord, transforms: &[Transform], probe: &AdvProbe) -> Result<RobustnessReport> {
    let original = &record.original;
    let adv_clean = probe.measure(original)?;
    let adv_protected = probe.measure(&record.protected)?;
    let margin = adv_protected - adv_clean;
    let with_ssim = original.height() >= SSIM_WINDOW && original.width() >= SSIM_WINDOW;
    let mut reports = Vec::with_capacity(transforms.len());
    for (i, &t) in transforms.iter().enumerate() {
        let seed = probe.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let tp = apply_transform(&record.protected, t, seed)?;
        let tc = apply_transform(original, t, seed)?;
        let adv_tp = probe.measure(&tp)?;
        reports.push(TransformReport {
            transform: t.to_string(),
            adv_protected: adv_tp,
            adv_clean_transformed: probe.measure(&tc)?,
            retention: (margin != 0.0).then(|| (adv_tp - adv_clean) / margin),
            psnr: MetricValue(psnr(&tp, original)?),
            ssim: if with_ssim { Some(ssim(&tp, original)?) } else { None },
        });
    }
    Ok(RobustnessReport { probe_backend: probe.backend.id().to_string(), probe_seed: probe.seed, adv_clean, adv_protected, transforms: reports })
}

/// Prediction errors of a held-out backend on the clean and protected image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub error_clean: f64,
    pub error_protected: f64,
}

impl TransferResult {
    pub fn ratio(&self) -> f64 {
        self.error_protected / self.error_clean
    }

    pub fn margin(&self) -> f64 {
        self.error_protected - self.error_clean
    }
}

/// Measures `held_out` on the clean and protected image of `record` under the
/// same frozen draws. `held_out` must not be one of the backends the
/// protection was built with.
pub fn transfer_harness(
    record: &ProtectionRecord,
    held_out: Arc<dyn NoisePredictor>,
    schedule: &DiffusionSchedule,
    samples: usize,
    seed: u64,
) -> Result<TransferResult> {
    if record.backend_ids.iter().any(|id| id == held_out.id()) {
        return Err(Error::BackendOverlap(held_out.id().to_string()));
    }
    let probe = AdvProbe::new(held_out, schedule.clone(), samples, seed);
    Ok(TransferResult { error_clean: probe.measure(&record.original)?, error_protected: probe.measure(&record.protected)? })
}
