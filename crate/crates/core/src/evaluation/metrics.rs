//! Rank, agreement, error and token-overlap metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const OUTSIDE_TAG: &str = "O";

fn same_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    Ok(())
}

/// Average 1-based ranks, ties sharing the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    same_len(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::OutOfRange("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Scores and binary labels of one output label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelScores {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Unweighted mean of per-label AUCs. Labels with a single class are skipped.
pub fn macro_auc(per_label: &[LabelScores]) -> Result<f64, MetricError> {
    let mut aucs = Vec::with_capacity(per_label.len());
    for (i, l) in per_label.iter().enumerate() {
        match roc_auc(&l.scores, &l.labels) {
            Ok(a) => aucs.push(a),
            Err(MetricError::SingleClass) => log::warn!("label {i} has a single class; skipped"),
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(MetricError::NoScorableLabel);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// AUC over all (case, label) pairs concatenated.
pub fn pooled_auc(per_label: &[LabelScores]) -> Result<f64, MetricError> {
    let scores: Vec<f64> = per_label.iter().flat_map(|l| l.scores.iter().copied()).collect();
    let labels: Vec<bool> = per_label.iter().flat_map(|l| l.labels.iter().copied()).collect();
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    roc_auc(&scores, &labels).map_err(|e| match e {
        MetricError::SingleClass => MetricError::NoScorableLabel,
        e => e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    None,
    Linear,
}

/// Cohen's kappa, κ = 1 − Σw·O / Σw·E, over the ordered `label_set`.
///
/// When Σw·E is zero the result is 1 if Σw·O is also zero and 0 otherwise.
pub fn cohen_kappa<S: AsRef<str>>(
    pred: &[S],
    truth: &[S],
    weighting: KappaWeighting,
    label_set: &[String],
) -> Result<f64, MetricError> {
    same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let index: BTreeMap<&str, usize> = label_set.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let k = label_set.len();
    let lookup = |s: &str| index.get(s).copied().ok_or_else(|| MetricError::LabelOutOfSet(s.to_string()));
    let mut observed = vec![0.0f64; k * k];
    let mut row = vec![0.0f64; k];
    let mut col = vec![0.0f64; k];
    for (p, t) in pred.iter().zip(truth) {
        let (i, j) = (lookup(t.as_ref())?, lookup(p.as_ref())?);
        observed[i * k + j] += 1.0;
        row[i] += 1.0;
        col[j] += 1.0;
    }
    let n = pred.len() as f64;
    let weight = |i: usize, j: usize| -> f64 {
        match weighting {
            KappaWeighting::None => (i != j) as u8 as f64,
            KappaWeighting::Linear if k > 1 => i.abs_diff(j) as f64 / (k - 1) as f64,
            KappaWeighting::Linear => 0.0,
        }
    };
    let (mut wo, mut we) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = weight(i, j);
            wo += w * observed[i * k + j] / n;
            we += w * row[i] * col[j] / (n * n);
        }
    }
    if we == 0.0 {
        return Ok(if wo == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - wo / we)
}

/// Robust symmetric mean absolute percentage error score.
pub fn rsmapes(truth: &[f64], pred: &[f64], epsilon: f64) -> Result<f64, MetricError> {
    same_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(MetricError::OutOfRange(format!("epsilon must be positive, got {epsilon}")));
    }
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(y, p)| (y - p).abs() / (p.abs() + y.abs() + epsilon))
        .sum();
    Ok(1.0 - total / truth.len() as f64)
}

/// Whitespace tokens with one tag per token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenLabels {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl TokenLabels {
    pub fn outside(tokens: Vec<String>) -> Self {
        let labels = vec![OUTSIDE_TAG.to_string(); tokens.len()];
        TokenLabels { tokens, labels }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn extend(&mut self, other: TokenLabels) {
        self.tokens.extend(other.tokens);
        self.labels.extend(other.labels);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub tag: String,
}

impl Entity {
    pub fn new(surface: impl Into<String>, tag: impl Into<String>) -> Self {
        Entity {
            surface: surface.into(),
            tag: tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    pub labels: TokenLabels,
    pub misses: Vec<Entity>,
}

pub fn align_entities(text: &str, entities: &[Entity]) -> Alignment {
    align_tokens(text.split_whitespace().map(str::to_string).collect(), entities)
}

/// Labels the first unlabeled exact window of each entity's tokens, in list
/// order. Entities without such a window are returned as misses.
pub fn align_tokens(tokens: Vec<String>, entities: &[Entity]) -> Alignment {
    let mut out = TokenLabels::outside(tokens);
    let mut taken = vec![false; out.len()];
    let mut misses = Vec::new();
    for e in entities {
        let needle: Vec<&str> = e.surface.split_whitespace().collect();
        let w = needle.len();
        let hit = (w > 0 && w <= out.len())
            .then(|| {
                (0..=out.len() - w).find(|&s| {
                    (0..w).all(|i| !taken[s + i] && out.tokens[s + i] == needle[i])
                })
            })
            .flatten();
        match hit {
            Some(s) => {
                taken[s..s + w].fill(true);
                out.labels[s..s + w].fill(e.tag.clone());
            }
            None => misses.push(e.clone()),
        }
    }
    Alignment { labels: out, misses }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Weighted,
}

/// Token-level F1 over the tags present in `truth` other than "O".
///
/// With no such tags the score is 1 if `pred` is also all "O", else 0.
pub fn f1(pred: &TokenLabels, truth: &TokenLabels, averaging: Averaging) -> Result<f64, MetricError> {
    if pred.tokens != truth.tokens || pred.labels.len() != pred.tokens.len() || truth.labels.len() != truth.tokens.len() {
        return Err(MetricError::TokenMismatch);
    }
    let tags: BTreeSet<&str> = truth.labels.iter().map(String::as_str).filter(|t| *t != OUTSIDE_TAG).collect();
    if tags.is_empty() {
        let clean = pred.labels.iter().all(|t| t == OUTSIDE_TAG);
        return Ok(if clean { 1.0 } else { 0.0 });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for tag in tags {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (p, t) in pred.labels.iter().zip(&truth.labels) {
            match (p == tag, t == tag) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let score = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        let weight = match averaging {
            Averaging::Macro => 1.0,
            Averaging::Weighted => (tp + fneg) as f64,
        };
        num += weight * score;
        den += weight;
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(MetricError::SingleClass)));
    }

    #[test]
    fn macro_and_pooled() {
        let perfect = LabelScores {
            scores: vec![1.0, 0.0],
            labels: vec![true, false],
        };
        let chance = LabelScores {
            scores: vec![1.0, 1.0],
            labels: vec![true, false],
        };
        assert_eq!(macro_auc(&[perfect.clone(), perfect.clone()]).unwrap(), 1.0);
        assert_eq!(macro_auc(&[perfect.clone(), chance]).unwrap(), 0.75);
        let single = LabelScores {
            scores: vec![1.0],
            labels: vec![true],
        };
        assert_eq!(macro_auc(&[perfect, single.clone()]).unwrap(), 1.0);
        assert!(matches!(macro_auc(&[single]), Err(MetricError::NoScorableLabel)));
    }

    #[test]
    fn kappa_examples() {
        let ab = labels(&["A", "B"]);
        let t = labels(&["A", "A", "B", "B"]);
        assert_eq!(cohen_kappa(&t, &t, KappaWeighting::None, &ab).unwrap(), 1.0);
        let p = labels(&["A", "B", "A", "B"]);
        assert_eq!(cohen_kappa(&p, &t, KappaWeighting::None, &ab).unwrap(), 0.0);
        let set = labels(&["0", "1", "2"]);
        let k = cohen_kappa(&labels(&["0", "2", "2"]), &labels(&["0", "1", "2"]), KappaWeighting::Linear, &set).unwrap();
        assert!((k - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            cohen_kappa(&labels(&["C"]), &labels(&["A"]), KappaWeighting::None, &ab),
            Err(MetricError::LabelOutOfSet(_))
        ));
    }

    #[test]
    fn kappa_degenerate_expectation() {
        let ab = labels(&["A", "B"]);
        let t = labels(&["A", "A"]);
        assert_eq!(cohen_kappa(&t, &t, KappaWeighting::None, &ab).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&labels(&["A"]), &labels(&["A"]), KappaWeighting::Linear, &labels(&["A"])).unwrap(), 1.0);
    }

    #[test]
    fn rsmapes_examples() {
        assert_eq!(rsmapes(&[1.0, 5.0], &[1.0, 5.0], 4.0).unwrap(), 1.0);
        assert!((rsmapes(&[10.0], &[0.0], 4.0).unwrap() - (1.0 - 10.0 / 14.0)).abs() < 1e-15);
        assert!((rsmapes(&[10.0, 10.0], &[10.0, 0.0], 4.0).unwrap() - 9.0 / 14.0).abs() < 1e-15);
        assert_eq!(rsmapes(&[0.0], &[0.0], 4.0).unwrap(), 1.0);
        assert!(matches!(rsmapes(&[], &[], 4.0), Err(MetricError::EmptyInput)));
    }

    #[test]
    fn alignment_examples() {
        let a = align_entities("patient Jan Jansen gezien", &[Entity::new("Jan Jansen", "PERSOON")]);
        assert_eq!(a.labels.labels, ["O", "PERSOON", "PERSOON", "O"]);
        assert!(a.misses.is_empty());
        let a = align_entities("patient gezien", &[]);
        assert_eq!(a.labels.labels, ["O", "O"]);
        let a = align_entities("patient gezien", &[Entity::new("Piet", "PERSOON")]);
        assert_eq!(a.labels.labels, ["O", "O"]);
        assert_eq!(a.misses.len(), 1);
    }

    #[test]
    fn repeated_surface_takes_next_window() {
        let a = align_entities(
            "Jan en Jan",
            &[Entity::new("Jan", "PERSOON"), Entity::new("Jan", "PERSOON"), Entity::new("Jan", "PERSOON")],
        );
        assert_eq!(a.labels.labels, ["PERSOON", "O", "PERSOON"]);
        assert_eq!(a.misses.len(), 1);
    }

    #[test]
    fn f1_examples() {
        let tokens = labels(&["a", "b", "c", "d"]);
        let truth = TokenLabels {
            tokens: tokens.clone(),
            labels: labels(&["X", "X", "Y", "O"]),
        };
        assert_eq!(f1(&truth, &truth, Averaging::Macro).unwrap(), 1.0);
        let none = TokenLabels::outside(tokens.clone());
        assert_eq!(f1(&none, &truth, Averaging::Macro).unwrap(), 0.0);
        // X: tp 1, fn 1 -> 2/3; Y: tp 1 -> 1
        let half = TokenLabels {
            tokens: tokens.clone(),
            labels: labels(&["X", "O", "Y", "O"]),
        };
        assert!((f1(&half, &truth, Averaging::Macro).unwrap() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!((f1(&half, &truth, Averaging::Weighted).unwrap() - (2.0 * 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
        let other = TokenLabels::outside(labels(&["z"]));
        assert!(matches!(f1(&other, &truth, Averaging::Macro), Err(MetricError::TokenMismatch)));
    }
}
