//! Dataset loading, token counting and context-window planning.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::par::Execution;

/// Context sizes are rounded up to a multiple of this many tokens.
pub const CONTEXT_GRANULARITY: u64 = 256;
pub const DEFAULT_OVERHEAD: u64 = 1024;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {0}: record has no \"uid\"")]
    MissingUid(usize),
    #[error("duplicate uid {0:?}")]
    DuplicateUid(String),
    #[error("line {line}: malformed row: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("record {uid:?} lacks input field {field:?}")]
    MissingField { uid: String, field: String },
    #[error("unknown token counter {0:?}")]
    UnknownCounter(String),
    #[error("cannot plan a context for an empty dataset")]
    EmptyInput,
    #[error("invalid planning parameter: {0}")]
    InvalidParameter(String),
}

/// One input case. Field order follows the source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub uid: String,
    pub fields: IndexMap<String, String>,
}

impl Record {
    pub fn new(uid: impl Into<String>) -> Self {
        Record {
            uid: uid.into(),
            fields: IndexMap::new(),
        }
    }

    pub fn with_field(mut self, name: impl Into<String>, text: impl Into<String>) -> Self {
        self.fields.insert(name.into(), text.into());
        self
    }

    /// Texts of `names` in order, or the first missing field name.
    pub fn texts<'a>(&'a self, names: &'a [String]) -> Result<Vec<&'a str>, &'a str> {
        names
            .iter()
            .map(|n| self.fields.get(n).map(String::as_str).ok_or(n.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Option<DatasetFormat> {
        match path.extension()?.to_str()? {
            "jsonl" | "ndjson" => Some(DatasetFormat::Jsonl),
            "csv" => Some(DatasetFormat::Csv),
            _ => None,
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<Record>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let records = match format {
        DatasetFormat::Jsonl => read_jsonl(BufReader::new(file))?,
        DatasetFormat::Csv => read_csv(BufReader::new(file))?,
    };
    let mut seen = HashSet::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.uid.as_str()) {
            return Err(IngestError::DuplicateUid(r.uid.clone()));
        }
    }
    Ok(records)
}

fn value_to_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Record>, IngestError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| IngestError::MalformedRow {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| IngestError::MalformedRow {
            line: line_no,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(IngestError::MalformedRow {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        let uid = match obj.get("uid") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(IngestError::MissingUid(line_no)),
        };
        let fields = obj
            .iter()
            .filter(|(k, _)| k.as_str() != "uid")
            .map(|(k, v)| (k.clone(), value_to_text(v)))
            .collect();
        records.push(Record { uid, fields });
    }
    Ok(records)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<Record>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::MalformedRow {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let uid_col = headers
        .iter()
        .position(|h| h == "uid")
        .ok_or(IngestError::MissingUid(1))?;
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| IngestError::MalformedRow {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let uid = row.get(uid_col).unwrap_or_default();
        if uid.is_empty() {
            return Err(IngestError::MissingUid(line));
        }
        let fields = headers
            .iter()
            .zip(row.iter())
            .enumerate()
            .filter(|(i, _)| *i != uid_col)
            .map(|(_, (h, v))| (h.to_string(), v.to_string()))
            .collect();
        records.push(Record {
            uid: uid.to_string(),
            fields,
        });
    }
    Ok(records)
}

/// Checks that every record carries every named input field.
pub fn check_fields(records: &[Record], input_fields: &[String]) -> Result<(), IngestError> {
    for r in records {
        if let Err(field) = r.texts(input_fields) {
            return Err(IngestError::MissingField {
                uid: r.uid.clone(),
                field: field.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub uid: String,
    pub tokens: u64,
    pub counter_id: String,
}

pub trait TokenCounter: Send + Sync {
    fn id(&self) -> &str;
    fn count(&self, text: &str) -> u64;
}

/// ceil(chars / 3). Deliberately overestimates subword counts for Dutch
/// clinical prose.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicCounter;

impl TokenCounter for HeuristicCounter {
    fn id(&self) -> &str {
        "heuristic-chars-3"
    }

    fn count(&self, text: &str) -> u64 {
        (text.chars().count() as u64).div_ceil(3)
    }
}

/// Counters available by id.
pub struct CounterRegistry {
    counters: BTreeMap<String, Box<dyn TokenCounter>>,
}

impl Default for CounterRegistry {
    fn default() -> Self {
        let mut reg = CounterRegistry {
            counters: BTreeMap::new(),
        };
        reg.register(Box::new(HeuristicCounter));
        reg
    }
}

impl CounterRegistry {
    pub fn register(&mut self, counter: Box<dyn TokenCounter>) {
        self.counters.insert(counter.id().to_string(), counter);
    }

    pub fn get(&self, id: &str) -> Result<&dyn TokenCounter, IngestError> {
        self.counters
            .get(id)
            .map(Box::as_ref)
            .ok_or_else(|| IngestError::UnknownCounter(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.counters.keys().map(String::as_str)
    }
}

/// Counts the tokens of a record's input fields concatenated in order.
///
/// Fields are joined without a separator so an all-empty record counts 0.
pub fn count_tokens(
    record: &Record,
    input_fields: &[String],
    counter: &dyn TokenCounter,
) -> Result<TokenCount, IngestError> {
    let texts = record.texts(input_fields).map_err(|f| IngestError::MissingField {
        uid: record.uid.clone(),
        field: f.to_string(),
    })?;
    let joined: String = texts.concat();
    Ok(TokenCount {
        uid: record.uid.clone(),
        tokens: counter.count(&joined),
        counter_id: counter.id().to_string(),
    })
}

pub fn count_all(
    records: &[Record],
    input_fields: &[String],
    counter: &dyn TokenCounter,
    exec: Execution,
) -> Result<Vec<TokenCount>, IngestError> {
    exec.map(records, |r| count_tokens(r, input_fields, counter))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    Max,
    Split,
}

impl std::str::FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(ContextMode::Max),
            "split" => Ok(ContextMode::Split),
            other => Err(format!("unknown context mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub uids: Vec<String>,
    pub context_length: u64,
}

/// Partition of a dataset into groups that share a context length. In split
/// mode the short partition comes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPlan {
    pub mode: ContextMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_fraction: Option<f64>,
    pub overhead: u64,
    pub partitions: Vec<Partition>,
}

impl ContextPlan {
    pub fn context_for(&self, uid: &str) -> Option<u64> {
        self.partitions
            .iter()
            .find(|p| p.uids.iter().any(|u| u == uid))
            .map(|p| p.context_length)
    }

    pub fn max_context(&self) -> u64 {
        self.partitions.iter().map(|p| p.context_length).max().unwrap_or(0)
    }
}

pub fn round_up_context(tokens: u64) -> u64 {
    round_up_to(tokens, CONTEXT_GRANULARITY)
}

pub fn round_up_to(tokens: u64, granularity: u64) -> u64 {
    tokens.div_ceil(granularity) * granularity
}

/// Nearest-rank quantile: the value at the smallest 1-based rank r with
/// r / n ≥ f in the sorted sample, clamped to [1, n].
pub fn nearest_rank(sorted: &[u64], fraction: f64) -> u64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let nf = n as f64;
    // f * n can land just above an integer (0.7 * 10 = 7.000000000000001)
    let mut rank = ((fraction * nf).ceil() as usize).clamp(1, n);
    while rank > 1 && (rank - 1) as f64 / nf >= fraction {
        rank -= 1;
    }
    while rank < n && (rank as f64 / nf) < fraction {
        rank += 1;
    }
    sorted[rank - 1]
}

pub fn plan_context(
    counts: &[TokenCount],
    mode: ContextMode,
    split_fraction: f64,
    overhead: u64,
) -> Result<ContextPlan, IngestError> {
    plan_context_with(counts, mode, split_fraction, overhead, CONTEXT_GRANULARITY)
}

/// [`plan_context`] with an explicit rounding granularity.
pub fn plan_context_with(
    counts: &[TokenCount],
    mode: ContextMode,
    split_fraction: f64,
    overhead: u64,
    granularity: u64,
) -> Result<ContextPlan, IngestError> {
    if granularity == 0 {
        return Err(IngestError::InvalidParameter("granularity must be positive".into()));
    }
    if counts.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    if mode == ContextMode::Split && !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(IngestError::InvalidParameter(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    let max_tokens = counts.iter().map(|c| c.tokens).max().unwrap_or(0);
    let whole = |mode| ContextPlan {
        mode,
        split_fraction: (mode == ContextMode::Split).then_some(split_fraction),
        overhead,
        partitions: vec![Partition {
            uids: counts.iter().map(|c| c.uid.clone()).collect(),
            context_length: round_up_to(max_tokens + overhead, granularity),
        }],
    };
    if mode == ContextMode::Max {
        return Ok(whole(ContextMode::Max));
    }
    let mut sorted: Vec<u64> = counts.iter().map(|c| c.tokens).collect();
    sorted.sort_unstable();
    let threshold = nearest_rank(&sorted, split_fraction);
    let (short, long): (Vec<&TokenCount>, Vec<&TokenCount>) =
        counts.iter().partition(|c| c.tokens <= threshold);
    if long.is_empty() {
        // every record fits under the threshold: one partition, as in max mode
        return Ok(whole(ContextMode::Max));
    }
    Ok(ContextPlan {
        mode: ContextMode::Split,
        split_fraction: Some(split_fraction),
        overhead,
        partitions: vec![
            Partition {
                uids: short.iter().map(|c| c.uid.clone()).collect(),
                context_length: round_up_to(threshold + overhead, granularity),
            },
            Partition {
                uids: long.iter().map(|c| c.uid.clone()).collect(),
                context_length: round_up_to(max_tokens + overhead, granularity),
            },
        ],
    })
}
