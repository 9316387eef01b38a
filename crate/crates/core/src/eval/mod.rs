//! Evaluation: invisibility metrics, identity similarity, quality scorers,
//! robustness to post-processing and transfer to held-out backends.

mod metrics;
mod robustness;
mod scorers;

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub use metrics::{psnr, ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use robustness::{
    apply_transform, parse_transforms, robustness_suite, transfer_harness, AdvProbe, RobustnessReport, TransferResult, Transform, TransformReport,
};
pub use scorers::{
    ism, quality_score, EmbeddingScorer, IsmSummary, IsmValue, MeanLuminance, PooledEmbedding, QualityScorer, ScorerRegistry, UNIT_NORM_TOLERANCE,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A metric value that may be `+inf` (PSNR of identical images). Serialized
/// as a number, or as the string `"+inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue(pub f64);

impl MetricValue {
    pub const INFINITE: &'static str = "+inf";
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str(Self::INFINITE)
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MetricValue(v)),
            Raw::Text(t) if t == Self::INFINITE => Ok(MetricValue(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected metric value `{t}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seeds: Vec<u64>,
    pub backend_ids: Vec<String>,
    pub scorers: Vec<String>,
    /// SHA-256 of the resolved configuration, hex encoded.
    pub config_hash: String,
}

/// Metrics for one (original, protected) pair.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub original: String,
    pub protected: String,
    pub metrics: BTreeMap<String, MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ism: Option<IsmValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<RobustnessReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub pairs: Vec<PairReport>,
    /// Means over pairs. PSNR means skip infinite entries.
    pub summary: BTreeMap<String, MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ism: Option<IsmSummary>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn new(pairs: Vec<PairReport>, ism: Option<IsmSummary>, metadata: ReportMetadata) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for p in &pairs {
            for (k, v) in &p.metrics {
                if v.0.is_finite() {
                    let e = sums.entry(k.clone()).or_default();
                    e.0 += v.0;
                    e.1 += 1;
                }
            }
        }
        let mut summary: BTreeMap<String, MetricValue> = sums.into_iter().map(|(k, (s, n))| (k, MetricValue(s / n as f64))).collect();
        // every pair identical: the mean is the sentinel too
        for p in &pairs {
            for k in p.metrics.keys() {
                summary.entry(k.clone()).or_insert(MetricValue(f64::INFINITY));
            }
        }
        Self { schema_version: REPORT_SCHEMA_VERSION, pairs, summary, ism, metadata }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Hex SHA-256 of the JSON encoding of `config`.
pub fn config_hash(config: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
