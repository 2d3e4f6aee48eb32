//! Scoring a predictions file against ground truth for one task.
//!
//! Values are compared at the task's answer node: starting from the schema
//! root, single-property objects are unwrapped. Ground truth may be given in
//! the full output shape or directly at the answer node.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::metrics::{Averaging, Entity, KappaWeighting, LabelScores, TokenLabels};
use super::{metrics, qualitative_tier, MetricError, TaskScore, Tier};
use crate::output_pipeline::{leading_number, PredictionLine};
use crate::par::Execution;
use crate::task_model::{MetricName, SchemaKind, SchemaNode, TaskDefinition, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLine {
    pub uid: String,
    pub value: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

/// Reads a JSONL file of `T`, skipping blank lines.
pub fn read_jsonl_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, LoadError> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| LoadError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| LoadError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LoadError::Malformed {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Unwraps single-property objects, following `value` as long as it has the
/// expected key.
fn descend<'a>(mut value: &'a Value, mut schema: &'a SchemaNode) -> (&'a Value, &'a SchemaNode, Option<&'a str>) {
    let mut name = None;
    while let (SchemaKind::Object(props), Value::Object(obj)) = (&schema.kind, value) {
        if props.len() != 1 {
            break;
        }
        let (key, child) = props.first().expect("one property");
        match obj.get(key) {
            Some(v) => {
                value = v;
                schema = child;
                name = Some(key.as_str());
            }
            None => break,
        }
    }
    (value, schema, name)
}

/// Per-label values of a multi-label answer: object properties in schema
/// order, or array elements.
fn slots<'a>(value: &'a Value, schema: &SchemaNode) -> Vec<&'a Value> {
    match (&schema.kind, value) {
        (SchemaKind::Object(props), Value::Object(obj)) => {
            props.keys().map(|k| obj.get(k).unwrap_or(&Value::Null)).collect()
        }
        (_, Value::Array(items)) => items.iter().collect(),
        (_, Value::Object(obj)) => obj.values().collect(),
        (_, v) => vec![v],
    }
}

fn bad(uid: &str, message: impl Into<String>) -> MetricError {
    MetricError::BadValue {
        uid: uid.to_string(),
        message: message.into(),
    }
}

fn as_score(uid: &str, v: &Value) -> Result<f64, MetricError> {
    match v {
        Value::Bool(b) => Ok(*b as u8 as f64),
        Value::Number(n) => n.as_f64().ok_or_else(|| bad(uid, "number out of range")),
        Value::Null => Ok(0.0),
        Value::String(s) => match s.trim().to_lowercase().as_str() {
            "true" | "yes" | "ja" => Ok(1.0),
            "false" | "no" | "nee" => Ok(0.0),
            t => leading_number(t).ok_or_else(|| bad(uid, format!("cannot read {s:?} as a score"))),
        },
        other => Err(bad(uid, format!("cannot read {other} as a score"))),
    }
}

fn as_truth_bool(uid: &str, v: &Value) -> Result<bool, MetricError> {
    let s = as_score(uid, v)?;
    if s == 0.0 || s == 1.0 {
        Ok(s == 1.0)
    } else {
        Err(bad(uid, format!("binary truth must be 0 or 1, got {s}")))
    }
}

fn as_number(uid: &str, v: &Value) -> Result<f64, MetricError> {
    match v {
        Value::Bool(_) => Err(bad(uid, "expected a number, found a boolean")),
        other => as_score(uid, other),
    }
}

fn as_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if f.fract() == 0.0 && f.abs() < 1e15 => format!("{}", f as i64),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn numbers(uid: &str, v: &Value, schema: &SchemaNode) -> Result<Vec<f64>, MetricError> {
    slots(v, schema).into_iter().map(|x| as_number(uid, x)).collect()
}

/// Entities named in a prediction.
///
/// A `[surface, tag]` pair or an object with a surface and a tag field
/// carries its own tag. Other object properties are spans tagged with the
/// property name and are kept only when that name is a label. A bare string
/// at the answer node takes the answer's property name if it is a label, else
/// the first label.
pub fn entities_from_value(value: &Value, context: Option<&str>, labels: &[String]) -> Vec<Entity> {
    let mut out = Vec::new();
    collect_entities(value, context, false, labels, &mut out);
    out
}

fn collect_entities(value: &Value, context: Option<&str>, strict: bool, labels: &[String], out: &mut Vec<Entity>) {
    let known = context.filter(|c| labels.iter().any(|l| l == c));
    let tag = match (known, strict) {
        (Some(c), _) => Some(c.to_string()),
        (None, false) => Some(labels.first().map_or("ENTITY".to_string(), Clone::clone)),
        (None, true) => None,
    };
    match value {
        Value::String(s) if !s.trim().is_empty() => {
            if let Some(tag) = tag {
                out.push(Entity::new(s.clone(), tag));
            }
        }
        Value::Array(items) => {
            for item in items {
                match item {
                    Value::Array(pair) if pair.len() == 2 && pair.iter().all(Value::is_string) => {
                        out.push(Entity::new(as_label(&pair[0]), as_label(&pair[1]).trim_matches(['<', '>'])));
                    }
                    other => collect_entities(other, context, strict, labels, out),
                }
            }
        }
        Value::Object(obj) => {
            let own_tag = ["tag", "label", "type", "category"]
                .iter()
                .find_map(|k| obj.get(*k).and_then(Value::as_str));
            let surface = ["text", "surface", "entity", "span"]
                .iter()
                .find_map(|k| obj.get(*k).and_then(Value::as_str));
            if let (Some(tag), Some(surface)) = (own_tag, surface) {
                out.push(Entity::new(surface, tag.trim_matches(['<', '>'])));
                return;
            }
            for (k, v) in obj {
                collect_entities(v, Some(k), true, labels, out);
            }
        }
        _ => {}
    }
}

fn truth_tokens(uid: &str, v: &Value) -> Result<TokenLabels, MetricError> {
    let t: TokenLabels = serde_json::from_value(v.clone())
        .map_err(|e| bad(uid, format!("NER truth must be {{\"tokens\", \"labels\"}}: {e}")))?;
    if t.tokens.len() != t.labels.len() {
        return Err(bad(uid, "tokens and labels differ in length"));
    }
    Ok(t)
}

/// Metric inputs gathered across cases.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gathered {
    pub per_label: Vec<LabelScores>,
    pub label_pairs: Vec<(Vec<String>, Vec<String>)>,
    pub truth_numbers: Vec<f64>,
    pub pred_numbers: Vec<f64>,
    pub pred_tokens: TokenLabels,
    pub truth_tokens: TokenLabels,
    pub alignment_misses: usize,
}

fn gather(task: &TaskDefinition, pairs: &[(&str, &Value, &Value)]) -> Result<Gathered, MetricError> {
    let schema = &task.schema;
    let labels = task.metric.labels.clone().unwrap_or_default();
    let mut g = Gathered::default();
    for &(uid, pred, truth) in pairs {
        let (pv, pnode, pname) = descend(pred, schema);
        let (tv, _, _) = descend(truth, schema);
        match task.kind {
            TaskKind::BinaryClf => {
                if g.per_label.is_empty() {
                    g.per_label.push(LabelScores::default());
                }
                g.per_label[0].scores.push(as_score(uid, pv)?);
                g.per_label[0].labels.push(as_truth_bool(uid, tv)?);
            }
            TaskKind::MultilabelBinaryClf => {
                let (ps, ts) = (slots(pv, pnode), slots(tv, pnode));
                if ps.len() != ts.len() {
                    return Err(bad(uid, format!("{} predicted labels vs {} true labels", ps.len(), ts.len())));
                }
                if g.per_label.len() < ts.len() {
                    g.per_label.resize(ts.len(), LabelScores::default());
                }
                for (i, (p, t)) in ps.into_iter().zip(ts).enumerate() {
                    g.per_label[i].scores.push(as_score(uid, p)?);
                    g.per_label[i].labels.push(as_truth_bool(uid, t)?);
                }
            }
            TaskKind::MulticlassClf => {
                if g.label_pairs.is_empty() {
                    g.label_pairs.push(Default::default());
                }
                g.label_pairs[0].0.push(as_label(pv));
                g.label_pairs[0].1.push(as_label(tv));
            }
            TaskKind::MultilabelMulticlassClf => {
                let (ps, ts) = (slots(pv, pnode), slots(tv, pnode));
                if ps.len() != ts.len() {
                    return Err(bad(uid, format!("{} predicted labels vs {} true labels", ps.len(), ts.len())));
                }
                if g.label_pairs.len() < ts.len() {
                    g.label_pairs.resize(ts.len(), Default::default());
                }
                for (i, (p, t)) in ps.into_iter().zip(ts).enumerate() {
                    g.label_pairs[i].0.push(as_label(p));
                    g.label_pairs[i].1.push(as_label(t));
                }
            }
            TaskKind::Regression => {
                g.pred_numbers.push(as_number(uid, pv)?);
                g.truth_numbers.push(as_number(uid, tv)?);
            }
            TaskKind::MultilabelRegression => {
                // shorter side is padded with zeros
                let mut p = numbers(uid, pv, pnode)?;
                let mut t = numbers(uid, tv, pnode)?;
                let n = p.len().max(t.len());
                p.resize(n, 0.0);
                t.resize(n, 0.0);
                g.pred_numbers.extend(p);
                g.truth_numbers.extend(t);
            }
            TaskKind::Ner | TaskKind::MultilabelNer => {
                let truth = truth_tokens(uid, truth)?;
                let entities = entities_from_value(pv, pname, &labels);
                let aligned = metrics::align_tokens(truth.tokens.clone(), &entities);
                g.alignment_misses += aligned.misses.len();
                g.pred_tokens.extend(aligned.labels);
                g.truth_tokens.extend(truth);
            }
        }
    }
    Ok(g)
}

fn compute(task: &TaskDefinition, g: &Gathered) -> Result<f64, MetricError> {
    let labels = task.metric.labels.clone().unwrap_or_default();
    match task.metric.name {
        MetricName::Auc => {
            let l = g.per_label.first().ok_or(MetricError::EmptyInput)?;
            if g.per_label.len() == 1 {
                metrics::roc_auc(&l.scores, &l.labels)
            } else {
                metrics::pooled_auc(&g.per_label)
            }
        }
        MetricName::MacroAuc => metrics::macro_auc(&g.per_label),
        MetricName::PooledAuc => metrics::pooled_auc(&g.per_label),
        MetricName::KappaUnweighted | MetricName::KappaLinear => {
            let weighting = if task.metric.name == MetricName::KappaLinear {
                KappaWeighting::Linear
            } else {
                KappaWeighting::None
            };
            if g.label_pairs.is_empty() {
                return Err(MetricError::EmptyInput);
            }
            let mut total = 0.0;
            for (p, t) in &g.label_pairs {
                total += metrics::cohen_kappa(p, t, weighting, &labels)?;
            }
            Ok(total / g.label_pairs.len() as f64)
        }
        MetricName::Rsmapes => {
            let eps = task.metric.epsilon.as_ref().map(|e| e.value).unwrap_or(f64::NAN);
            metrics::rsmapes(&g.truth_numbers, &g.pred_numbers, eps)
        }
        MetricName::F1Macro | MetricName::F1Weighted => {
            if g.truth_tokens.is_empty() {
                return Err(MetricError::EmptyInput);
            }
            let averaging = if task.metric.name == MetricName::F1Macro {
                Averaging::Macro
            } else {
                Averaging::Weighted
            };
            metrics::f1(&g.pred_tokens, &g.truth_tokens, averaging)
        }
    }
}

/// The metric value of `predictions` against `truth`, in truth order. Every
/// truth uid needs a prediction; extra predictions are ignored.
pub fn score_task(task: &TaskDefinition, predictions: &[PredictionLine], truth: &[TruthLine]) -> Result<TaskScore, MetricError> {
    if truth.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let by_uid: HashMap<&str, &PredictionLine> = predictions.iter().map(|p| (p.uid.as_str(), p)).collect();
    let pairs = truth
        .iter()
        .map(|t| {
            by_uid
                .get(t.uid.as_str())
                .map(|p| (t.uid.as_str(), &p.value, &t.value))
                .ok_or_else(|| MetricError::MissingPrediction(t.uid.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gathered = gather(task, &pairs)?;
    if gathered.alignment_misses > 0 {
        log::info!("{}: {} predicted entities did not align", task.id, gathered.alignment_misses);
    }
    Ok(TaskScore {
        task_id: task.id.clone(),
        metric: task.metric.name,
        value: compute(task, &gathered)?,
        n_cases: truth.len(),
    })
}

/// The `eval` output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub metric: MetricName,
    pub value: f64,
    pub tier: Tier,
    pub n_cases: usize,
    pub n_placeholder: usize,
}

pub fn evaluate(task: &TaskDefinition, predictions: &[PredictionLine], truth: &[TruthLine]) -> Result<EvalReport, MetricError> {
    let score = score_task(task, predictions, truth)?;
    let wanted: std::collections::HashSet<&str> = truth.iter().map(|t| t.uid.as_str()).collect();
    let n_placeholder = predictions
        .iter()
        .filter(|p| wanted.contains(p.uid.as_str()) && p.status == "placeholder")
        .count();
    Ok(EvalReport {
        task_id: score.task_id,
        metric: score.metric,
        tier: qualitative_tier(score.metric, score.value),
        value: score.value,
        n_cases: score.n_cases,
        n_placeholder,
    })
}

/// One task's inputs for batch scoring.
#[derive(Debug, Clone)]
pub struct EvalJob {
    pub task: TaskDefinition,
    pub predictions: Vec<PredictionLine>,
    pub truth: Vec<TruthLine>,
}

/// Scores each job independently, in input order.
pub fn evaluate_all(jobs: &[EvalJob], exec: Execution) -> Vec<Result<EvalReport, MetricError>> {
    exec.map(jobs, |j| evaluate(&j.task, &j.predictions, &j.truth))
}
