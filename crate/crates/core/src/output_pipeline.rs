//! From raw completion text to a schema-conforming value.
//!
//! A completion goes through [`extract_json`] and [`coerce_and_validate`].
//! On failure the model is asked to reformat its own output, up to
//! [`MAX_REPAIRS`] times, after which a placeholder is substituted and the
//! case is flagged for manual review.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};
use sha2::{Digest, Sha256};

use crate::ingest::Record;
use crate::model_client::{ClientError, ModelClient, ModelConfig};
use crate::prompting::{
    build_extract_prompt_for_text, build_repair_prompt, build_translation_prompt, PromptError,
    PromptPurpose, FIELD_SEPARATOR,
};
use crate::task_model::{placeholder_value, PlaceholderMode, SchemaKind, SchemaNode, TaskDefinition};

/// Repair round-trips allowed after the initial extraction attempt.
pub const MAX_REPAIRS: u8 = 3;

const EXCERPT_CHARS: usize = 80;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationError {
    pub path: String,
    pub expected: String,
    pub found: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: expected {}, found {}", self.path, self.expected, self.found)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OutputError {
    #[error("no JSON object or array found in the output")]
    NoJsonFound,
    #[error("the JSON in the output is incomplete or unbalanced")]
    UnbalancedJson,
    #[error("{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationError>),
}

impl OutputError {
    pub fn messages(&self) -> Vec<String> {
        match self {
            OutputError::Invalid(errors) => errors.iter().map(ToString::to_string).collect(),
            other => vec![other.to_string()],
        }
    }
}

fn strip_think_blocks(raw: &str) -> String {
    let mut text = raw.to_string();
    while let Some(start) = text.find("<think>") {
        match text[start..].find("</think>") {
            Some(rel) => text.replace_range(start..start + rel + "</think>".len(), ""),
            None => {
                text.truncate(start);
                break;
            }
        }
    }
    // a closing tag without its opener: everything before it is reasoning
    if let Some(end) = text.rfind("</think>") {
        text.replace_range(..end + "</think>".len(), "");
    }
    text
}

enum Scan {
    Complete(usize),
    Mismatched,
    Unterminated,
}

// Scans one bracketed value starting at `start` (which holds `{` or `[`),
// honoring string literals and escapes.
fn scan_balanced(bytes: &[u8], start: usize) -> Scan {
    let mut stack: Vec<u8> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return Scan::Mismatched;
                }
                if stack.is_empty() {
                    return Scan::Complete(i + 1);
                }
            }
            _ => {}
        }
    }
    Scan::Unterminated
}

/// Pulls the first balanced JSON object or array out of free text.
///
/// `<think>` blocks are removed first; code fences need no special handling
/// since the scan starts at the first bracket. Bracketed
/// spans that are balanced but not valid JSON (e.g. `[1]` as a citation) are
/// skipped and the scan continues.
pub fn extract_json(raw: &str) -> Result<Value, OutputError> {
    let text = strip_think_blocks(raw);
    let bytes = text.as_bytes();
    let mut saw_start = false;
    let mut saw_unterminated = false;
    let mut pos = 0;
    while let Some(offset) = bytes[pos..].iter().position(|&b| b == b'{' || b == b'[') {
        let start = pos + offset;
        saw_start = true;
        match scan_balanced(bytes, start) {
            Scan::Complete(end) => {
                if let Ok(v) = serde_json::from_str::<Value>(&text[start..end]) {
                    return Ok(v);
                }
            }
            Scan::Mismatched => {}
            Scan::Unterminated => saw_unterminated = true,
        }
        pos = start + 1;
    }
    if saw_unterminated || saw_start {
        Err(OutputError::UnbalancedJson)
    } else {
        Err(OutputError::NoJsonFound)
    }
}

fn excerpt(v: &Value) -> String {
    let s = v.to_string();
    if s.chars().count() > EXCERPT_CHARS {
        let cut: String = s.chars().take(EXCERPT_CHARS).collect();
        format!("{cut}...")
    } else {
        s
    }
}

fn expected_text(node: &SchemaNode) -> String {
    let base = match &node.kind {
        SchemaKind::Enum(values) => {
            let opts: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
            format!("one of {}", opts.join(", "))
        }
        SchemaKind::Array(items) => format!("array of {}", items.kind.name()),
        other => other.name().to_string(),
    };
    if node.nullable {
        format!("{base} or null")
    } else {
        base
    }
}

/// Leading decimal number of a string such as `"12 mm"` or `" -3.5e2cm"`.
/// Whatever follows the number must not continue it (no `"12.3.4"`).
pub fn leading_number(s: &str) -> Option<f64> {
    let t = s.trim();
    let b = t.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        let frac_start = i + 1;
        let mut j = frac_start;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > frac_start || digits > 0 {
            digits += j - frac_start;
            i = j;
        }
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let exp_start = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp_start {
            i = j;
        }
    }
    if i < b.len() && (b[i] == b'.' || b[i].is_ascii_digit()) {
        return None;
    }
    t[..i].parse::<f64>().ok().filter(|x| x.is_finite())
}

fn number_value(x: f64) -> Value {
    Number::from_f64(x).map_or(Value::Null, Value::Number)
}

/// Coerces `value` towards `schema` and validates it, collecting every
/// violation.
///
/// Coercions: `"true"`/`"false"` (any case) to booleans; numeric strings,
/// including unit-suffixed ones like `"12 mm"`, to their leading number;
/// integral numbers to integers; case-insensitive enum matches (numbers and
/// booleans compared by their text) to the canonical option; `"null"` to
/// null where nullable. Unknown object keys are dropped and missing nullable
/// keys become null.
pub fn coerce_and_validate(value: &Value, schema: &SchemaNode) -> Result<Value, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let out = coerce_at(value, schema, "$", &mut errors);
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

fn coerce_at(value: &Value, node: &SchemaNode, path: &str, errors: &mut Vec<ValidationError>) -> Value {
    let mut fail = |found: String| {
        errors.push(ValidationError {
            path: path.to_string(),
            expected: expected_text(node),
            found,
        });
        Value::Null
    };
    if node.nullable {
        match value {
            Value::Null => return Value::Null,
            Value::String(s) if s.trim().eq_ignore_ascii_case("null") => return Value::Null,
            _ => {}
        }
    }
    match (&node.kind, value) {
        (SchemaKind::Boolean, Value::Bool(b)) => Value::Bool(*b),
        (SchemaKind::Boolean, Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => fail(excerpt(value)),
        },
        (SchemaKind::Integer, _) | (SchemaKind::Number, _) => {
            let x = match value {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => leading_number(s),
                _ => None,
            };
            match (x, &node.kind) {
                (Some(x), SchemaKind::Number) => number_value(x),
                (Some(x), _) if x.fract() == 0.0 && x.abs() < 9.0e15 => Value::from(x as i64),
                _ => fail(excerpt(value)),
            }
        }
        (SchemaKind::String, Value::String(s)) => Value::String(s.clone()),
        (SchemaKind::Enum(options), _) => {
            let text = match value {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                Value::Bool(b) => Some(b.to_string()),
                _ => None,
            };
            let hit = text.and_then(|raw| {
                let t = raw.trim().to_lowercase();
                options
                    .iter()
                    .find(|o| **o == raw)
                    .or_else(|| options.iter().find(|o| o.trim() == raw.trim()))
                    .or_else(|| options.iter().find(|o| o.trim().to_lowercase() == t))
            });
            match hit {
                Some(o) => Value::String(o.clone()),
                None => fail(excerpt(value)),
            }
        }
        (SchemaKind::Array(items), Value::Array(xs)) => Value::Array(
            xs.iter()
                .enumerate()
                .map(|(i, x)| coerce_at(x, items, &format!("{path}[{i}]"), errors))
                .collect(),
        ),
        (SchemaKind::Object(props), Value::Object(obj)) => {
            let mut out = serde_json::Map::with_capacity(props.len());
            for (name, child) in props {
                let child_path = format!("{path}.{name}");
                let v = match obj.get(name) {
                    Some(v) => coerce_at(v, child, &child_path, errors),
                    None if child.nullable => Value::Null,
                    None => {
                        errors.push(ValidationError {
                            path: child_path,
                            expected: expected_text(child),
                            found: "missing key".into(),
                        });
                        Value::Null
                    }
                };
                out.insert(name.clone(), v);
            }
            Value::Object(out)
        }
        _ => fail(excerpt(value)),
    }
}

/// Extracts and validates in one step.
pub fn parse_completion(raw: &str, schema: &SchemaNode) -> Result<Value, OutputError> {
    let value = extract_json(raw)?;
    coerce_and_validate(&value, schema).map_err(OutputError::Invalid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseStatus {
    Valid,
    Repaired(u8),
    Placeholder,
}

impl CaseStatus {
    pub fn label(self) -> &'static str {
        match self {
            CaseStatus::Valid => "valid",
            CaseStatus::Repaired(_) => "repaired",
            CaseStatus::Placeholder => "placeholder",
        }
    }

    pub fn repair_count(self) -> u8 {
        match self {
            CaseStatus::Valid => 0,
            CaseStatus::Repaired(k) => k,
            CaseStatus::Placeholder => MAX_REPAIRS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub purpose: PromptPurpose,
    pub completion: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub uid: String,
    pub value: Value,
    pub status: CaseStatus,
    pub flagged: bool,
    pub attempts: Vec<Attempt>,
}

impl CaseOutcome {
    pub fn repair_attempts(&self) -> usize {
        self.attempts.iter().filter(|a| a.purpose == PromptPurpose::Repair).count()
    }

    pub fn model_calls(&self) -> usize {
        self.attempts.len()
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub uid: String,
    pub value: Value,
    pub status: String,
    pub repair_count: u8,
    pub flagged: bool,
}

impl From<&CaseOutcome> for PredictionLine {
    fn from(o: &CaseOutcome) -> Self {
        PredictionLine {
            uid: o.uid.clone(),
            value: o.value.clone(),
            status: o.status.label().to_string(),
            repair_count: o.status.repair_count(),
            flagged: o.flagged,
        }
    }
}

/// Stable per-case seed derived from the uid.
pub fn uid_seed(uid: &str) -> u64 {
    let digest = Sha256::digest(uid.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolveOptions {
    pub translate: bool,
    pub placeholder_mode: PlaceholderMode,
    pub max_repairs: u8,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        ResolveOptions {
            translate: false,
            placeholder_mode: PlaceholderMode::Empty,
            max_repairs: MAX_REPAIRS,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ResolveError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

const EMPTY_OUTPUT_MARKER: &str = "(empty response)";

/// Runs the extraction chain for one record.
///
/// Model-output failures end in a flagged placeholder; client failures are
/// returned as errors so the run can stop without recording a result.
pub fn resolve_case(
    task: &TaskDefinition,
    record: &Record,
    client: &ModelClient,
    config: &ModelConfig,
    options: &ResolveOptions,
) -> Result<CaseOutcome, ResolveError> {
    let key = Some(record.uid.as_str());
    let mut attempts = Vec::new();
    let input = if options.translate {
        let bundle = build_translation_prompt(record, &task.input_fields)?;
        let c = client.generate(&bundle, config, key)?;
        attempts.push(Attempt {
            purpose: PromptPurpose::Translate,
            completion: c.text.clone(),
            error: None,
        });
        c.text
    } else {
        let texts = record.texts(&task.input_fields).map_err(|f| PromptError::MissingField {
            uid: record.uid.clone(),
            field: f.to_string(),
        })?;
        texts.join(FIELD_SEPARATOR)
    };

    let mut bundle = build_extract_prompt_for_text(task, input);
    let mut repairs = 0u8;
    loop {
        let completion = client.generate(&bundle, config, key)?.text;
        match parse_completion(&completion, &task.schema) {
            Ok(value) => {
                attempts.push(Attempt {
                    purpose: bundle.purpose,
                    completion,
                    error: None,
                });
                let status = if repairs == 0 {
                    CaseStatus::Valid
                } else {
                    CaseStatus::Repaired(repairs)
                };
                return Ok(CaseOutcome {
                    uid: record.uid.clone(),
                    value,
                    status,
                    flagged: false,
                    attempts,
                });
            }
            Err(err) => {
                let invalid = if completion.trim().is_empty() {
                    EMPTY_OUTPUT_MARKER.to_string()
                } else {
                    completion.clone()
                };
                attempts.push(Attempt {
                    purpose: bundle.purpose,
                    completion,
                    error: Some(err.to_string()),
                });
                if repairs == options.max_repairs {
                    break;
                }
                repairs += 1;
                bundle = build_repair_prompt(&task.schema, &invalid, &err);
            }
        }
    }
    log::warn!("case {} fell back to a placeholder after {} repairs", record.uid, repairs);
    Ok(CaseOutcome {
        uid: record.uid.clone(),
        value: placeholder_value(&task.schema, options.placeholder_mode, uid_seed(&record.uid)),
        status: CaseStatus::Placeholder,
        flagged: true,
        attempts,
    })
}
