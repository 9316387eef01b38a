//! Pluggable embedding and quality scorers.
//!
//! Real identity and aesthetics models need external weights; they plug in
//! through [`EmbeddingScorer`] and [`QualityScorer`]. The toy scorers here are
//! small closed-form functions for offline tests.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps;
use crate::types::{ImageTensor, CHANNELS};

/// Tolerance on the unit norm of an embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Maps an image to a unit-norm feature vector, or `None` when the scorer has
/// nothing to embed (a face model that finds no face, say).
pub trait EmbeddingScorer: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, image: &ImageTensor) -> Result<Option<Vec<f64>>>;
}

/// Maps an image to a scalar quality score.
pub trait QualityScorer: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, image: &ImageTensor) -> Result<f64>;
}

/// Average-pools each channel on a `grid x grid` layout, removes the mean and
/// normalizes. Flat images have no embedding.
#[derive(Clone, Debug)]
pub struct PooledEmbedding {
    pub grid: usize,
}

impl Default for PooledEmbedding {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl PooledEmbedding {
    pub const ID: &'static str = "toy-pooled";
}

impl EmbeddingScorer for PooledEmbedding {
    fn id(&self) -> &str {
        Self::ID
    }

    fn embed(&self, image: &ImageTensor) -> Result<Option<Vec<f64>>> {
        let (h, w) = (image.height(), image.width());
        if self.grid == 0 || h % self.grid != 0 || w % self.grid != 0 {
            return Err(Error::invalid("pooled embedding", format!("{h}x{w} is not divisible into a {0}x{0} grid", self.grid)));
        }
        let mut v = maps::avg_pool(h, w, self.grid).apply(image.data());
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Ok(None);
        }
        Ok(Some(v.into_iter().map(|x| x / norm).collect()))
    }
}

/// Mean Rec. 601 luma.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanLuminance;

impl MeanLuminance {
    pub const ID: &'static str = "toy-luminance";
}

impl QualityScorer for MeanLuminance {
    fn id(&self) -> &str {
        Self::ID
    }

    fn score(&self, image: &ImageTensor) -> Result<f64> {
        let luma: f64 = image.data().chunks_exact(CHANNELS).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).sum();
        Ok(luma / (image.height() * image.width()) as f64)
    }
}

/// Scorers by identifier.
#[derive(Clone, Default)]
pub struct ScorerRegistry {
    embedding: Vec<Arc<dyn EmbeddingScorer>>,
    quality: Vec<Arc<dyn QualityScorer>>,
}

impl ScorerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The toy scorers.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register_embedding(Arc::new(PooledEmbedding::default())).expect("fresh registry");
        r.register_quality(Arc::new(MeanLuminance)).expect("fresh registry");
        r
    }

    fn taken(&self, id: &str) -> bool {
        self.embedding.iter().any(|s| s.id() == id) || self.quality.iter().any(|s| s.id() == id)
    }

    pub fn register_embedding(&mut self, scorer: Arc<dyn EmbeddingScorer>) -> Result<()> {
        if self.taken(scorer.id()) {
            return Err(Error::Duplicate { kind: "scorer", id: scorer.id().to_string() });
        }
        self.embedding.push(scorer);
        Ok(())
    }

    pub fn register_quality(&mut self, scorer: Arc<dyn QualityScorer>) -> Result<()> {
        if self.taken(scorer.id()) {
            return Err(Error::Duplicate { kind: "scorer", id: scorer.id().to_string() });
        }
        self.quality.push(scorer);
        Ok(())
    }

    pub fn embedding(&self, id: &str) -> Result<Arc<dyn EmbeddingScorer>> {
        self.embedding.iter().find(|s| s.id() == id).cloned().ok_or_else(|| unavailable(id))
    }

    pub fn quality(&self, id: &str) -> Result<Arc<dyn QualityScorer>> {
        self.quality.iter().find(|s| s.id() == id).cloned().ok_or_else(|| unavailable(id))
    }
}

fn unavailable(id: &str) -> Error {
    Error::Unavailable { kind: "scorer", id: id.to_string(), reason: "no plugin registered under this id".into() }
}

/// Identity similarity of one pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsmValue {
    Defined(f64),
    /// The scorer produced no embedding for one of the images.
    Undefined,
}

fn checked_embedding(scorer: &dyn EmbeddingScorer, image: &ImageTensor) -> Result<Option<Vec<f64>>> {
    let Some(e) = scorer.embed(image)? else {
        return Ok(None);
    };
    let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::Invariant(format!("scorer `{}` returned an embedding of norm {norm}", scorer.id())));
    }
    Ok(Some(e))
}

/// Cosine similarity of the embeddings of `generated` and `reference`.
pub fn ism(scorer: &dyn EmbeddingScorer, generated: &ImageTensor, reference: &ImageTensor) -> Result<IsmValue> {
    let (Some(a), Some(b)) = (checked_embedding(scorer, generated)?, checked_embedding(scorer, reference)?) else {
        return Ok(IsmValue::Undefined);
    };
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { what: "embedding", expected: a.len(), actual: b.len() });
    }
    Ok(IsmValue::Defined(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)))
}

/// Batch ISM. Lower means stronger identity disruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsmSummary {
    pub scorer: String,
    /// Mean over defined pairs; `None` when no pair is defined.
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
    pub lower_is_better: bool,
}

impl IsmSummary {
    pub fn new(scorer: &str, values: &[IsmValue]) -> Self {
        let defined: Vec<f64> = values
            .iter()
            .filter_map(|v| match v {
                IsmValue::Defined(x) => Some(*x),
                IsmValue::Undefined => None,
            })
            .collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self { scorer: scorer.to_string(), mean, defined: defined.len(), undefined: values.len() - defined.len(), lower_is_better: true }
    }
}

/// Score of `image` under `scorer`; non-finite scores are errors.
pub fn quality_score(scorer: &dyn QualityScorer, image: &ImageTensor) -> Result<f64> {
    let s = scorer.score(image)?;
    if !s.is_finite() {
        return Err(Error::Invariant(format!("scorer `{}` returned {s}", scorer.id())));
    }
    Ok(s)
}
