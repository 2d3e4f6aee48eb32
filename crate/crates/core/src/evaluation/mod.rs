//! Benchmark metrics, qualitative tiers, the utility score and paired run
//! comparison.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::task_model::MetricName;

pub mod metrics;
pub mod scoring;
pub mod stats;

pub use metrics::{
    align_entities, align_tokens, cohen_kappa, f1, macro_auc, pooled_auc, roc_auc, rsmapes, Alignment,
    Averaging, Entity, KappaWeighting, LabelScores, TokenLabels,
};
pub use stats::{paired_compare, paired_t_p, shapiro_wilk, wilcoxon_p, ComparisonResult, ShapiroWilk, TestUsed};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("only one class present")]
    SingleClass,
    #[error("no label has both classes")]
    NoScorableLabel,
    #[error("empty input")]
    EmptyInput,
    #[error("label {0:?} is not in the label set")]
    LabelOutOfSet(String),
    #[error("prediction and truth token sequences differ")]
    TokenMismatch,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("need at least 3 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("no prediction for uid {0:?}")]
    MissingPrediction(String),
    #[error("case {uid:?}: {message}")]
    BadValue { uid: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Fail,
    Minimal,
    Poor,
    Moderate,
    Good,
    Excellent,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Fail => "Fail",
            Tier::Minimal => "Minimal",
            Tier::Poor => "Poor",
            Tier::Moderate => "Moderate",
            Tier::Good => "Good",
            Tier::Excellent => "Excellent",
        })
    }
}

const AUC_BOUNDS: [(f64, Tier); 5] = [
    (0.90, Tier::Excellent),
    (0.80, Tier::Good),
    (0.70, Tier::Moderate),
    (0.65, Tier::Poor),
    (0.60, Tier::Minimal),
];

const AGREEMENT_BOUNDS: [(f64, Tier); 5] = [
    (0.90, Tier::Excellent),
    (0.80, Tier::Good),
    (0.60, Tier::Moderate),
    (0.40, Tier::Poor),
    (0.21, Tier::Minimal),
];

/// Tier of a metric value. Each band includes its lower bound.
pub fn qualitative_tier(metric: MetricName, value: f64) -> Tier {
    let bounds = if metric.is_auc() { &AUC_BOUNDS } else { &AGREEMENT_BOUNDS };
    bounds
        .iter()
        .find(|(lo, _)| value >= *lo)
        .map_or(Tier::Fail, |&(_, t)| t)
}

pub fn qualitative_tier_by_name(metric: &str, value: f64) -> Result<Tier, MetricError> {
    let m = MetricName::parse(metric).ok_or_else(|| MetricError::UnknownMetric(metric.to_string()))?;
    Ok(qualitative_tier(m, value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: String,
    pub metric: MetricName,
    pub value: f64,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityScore {
    pub value: f64,
    pub per_task: Vec<TaskScore>,
}

/// Compensated sum of `values` taken in ascending order, so the result does
/// not depend on the input order.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values.iter() {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Arithmetic mean of the per-task values.
pub fn utility_score(scores: &[TaskScore]) -> Result<UtilityScore, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let value = ordered_sum(&mut values) / scores.len() as f64;
    Ok(UtilityScore {
        value,
        per_task: scores.to_vec(),
    })
}
