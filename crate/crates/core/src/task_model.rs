//! Taskfiles: the task description plus the output schema that drives
//! prompting, validation and placeholder generation.
//!
//! A Taskfile is a JSON document with the keys `id`, `name`, `description`,
//! `input_fields`, `output_schema`, `task_kind` and `metric`. The output
//! schema is a small recursive language of seven node kinds:
//!
//! ```json
//! {"type": "object", "properties": {
//!     "label":   {"type": "enum", "values": ["PDAC", "other", "normal"]},
//!     "size":    {"type": "number", "nullable": true, "description": "mm"},
//!     "lesions": {"type": "array", "items": {"type": "number"}}
//! }}
//! ```
//!
//! Property order is preserved exactly as written; it is significant for
//! prompt rendering.

use std::fmt;
use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

/// Deepest schema nesting accepted; the root object counts as depth 1.
pub const MAX_SCHEMA_DEPTH: usize = 16;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TaskfileError {
    #[error("malformed taskfile at {path}: {message}")]
    MalformedJson { path: String, message: String },
    #[error("schema at {path} exceeds the maximum depth of {MAX_SCHEMA_DEPTH}")]
    SchemaTooDeep { path: String },
    #[error("unknown kind {kind:?} at {path}")]
    UnknownKind { path: String, kind: String },
    #[error("metric mismatch at {path}: {message}")]
    MetricMismatch { path: String, message: String },
    #[error("invalid schema at {path}: {message}")]
    InvalidSchema { path: String, message: String },
}

impl TaskfileError {
    pub fn path(&self) -> &str {
        match self {
            TaskfileError::MalformedJson { path, .. }
            | TaskfileError::SchemaTooDeep { path }
            | TaskfileError::UnknownKind { path, .. }
            | TaskfileError::MetricMismatch { path, .. }
            | TaskfileError::InvalidSchema { path, .. } => path,
        }
    }
}

fn malformed(path: impl Into<String>, message: impl Into<String>) -> TaskfileError {
    TaskfileError::MalformedJson {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchemaKind {
    Boolean,
    Integer,
    Number,
    String,
    Enum(Vec<String>),
    Array(Box<SchemaNode>),
    Object(IndexMap<String, SchemaNode>),
}

impl SchemaKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemaKind::Boolean => "boolean",
            SchemaKind::Integer => "integer",
            SchemaKind::Number => "number",
            SchemaKind::String => "string",
            SchemaKind::Enum(_) => "enum",
            SchemaKind::Array(_) => "array",
            SchemaKind::Object(_) => "object",
        }
    }
}

/// One node of an output schema.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaNode {
    pub kind: SchemaKind,
    pub nullable: bool,
    pub description: Option<String>,
}

impl SchemaNode {
    pub fn new(kind: SchemaKind) -> Self {
        SchemaNode {
            kind,
            nullable: false,
            description: None,
        }
    }

    pub fn boolean() -> Self {
        Self::new(SchemaKind::Boolean)
    }

    pub fn integer() -> Self {
        Self::new(SchemaKind::Integer)
    }

    pub fn number() -> Self {
        Self::new(SchemaKind::Number)
    }

    pub fn string() -> Self {
        Self::new(SchemaKind::String)
    }

    pub fn enumeration<I, S>(values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(SchemaKind::Enum(values.into_iter().map(Into::into).collect()))
    }

    pub fn array(items: SchemaNode) -> Self {
        Self::new(SchemaKind::Array(Box::new(items)))
    }

    pub fn object<I, S>(properties: I) -> Self
    where
        I: IntoIterator<Item = (S, SchemaNode)>,
        S: Into<String>,
    {
        Self::new(SchemaKind::Object(
            properties.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        ))
    }

    pub fn nullable(mut self) -> Self {
        self.nullable = true;
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = Some(description.into());
        self
    }

    pub fn properties(&self) -> Option<&IndexMap<String, SchemaNode>> {
        match &self.kind {
            SchemaKind::Object(props) => Some(props),
            _ => None,
        }
    }

    pub fn depth(&self) -> usize {
        1 + match &self.kind {
            SchemaKind::Array(items) => items.depth(),
            SchemaKind::Object(props) => props.values().map(SchemaNode::depth).max().unwrap_or(0),
            _ => 0,
        }
    }

    /// Checks the structural invariants that the type does not already encode.
    pub fn check(&self) -> Result<(), TaskfileError> {
        self.check_at("$.output_schema", 1)
    }

    fn check_at(&self, path: &str, depth: usize) -> Result<(), TaskfileError> {
        if depth > MAX_SCHEMA_DEPTH {
            return Err(TaskfileError::SchemaTooDeep {
                path: path.to_string(),
            });
        }
        match &self.kind {
            SchemaKind::Enum(values) => {
                if values.is_empty() {
                    return Err(TaskfileError::InvalidSchema {
                        path: path.to_string(),
                        message: "enum must list at least one value".into(),
                    });
                }
                for (i, v) in values.iter().enumerate() {
                    if values[..i].contains(v) {
                        return Err(TaskfileError::InvalidSchema {
                            path: format!("{path}.values[{i}]"),
                            message: format!("duplicate enum value {v:?}"),
                        });
                    }
                }
            }
            SchemaKind::Array(items) => items.check_at(&format!("{path}.items"), depth + 1)?,
            SchemaKind::Object(props) => {
                if props.is_empty() {
                    return Err(TaskfileError::InvalidSchema {
                        path: path.to_string(),
                        message: "object must declare at least one property".into(),
                    });
                }
                for (name, child) in props {
                    child.check_at(&format!("{path}.properties.{name}"), depth + 1)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn from_json(value: &Value) -> Result<Self, TaskfileError> {
        let node = Self::parse_at(value, "$.output_schema", 1)?;
        node.check()?;
        Ok(node)
    }

    fn parse_at(value: &Value, path: &str, depth: usize) -> Result<Self, TaskfileError> {
        if depth > MAX_SCHEMA_DEPTH {
            return Err(TaskfileError::SchemaTooDeep {
                path: path.to_string(),
            });
        }
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(path, "schema node must be a JSON object"))?;
        let kind_name = obj
            .get("type")
            .ok_or_else(|| malformed(path, "missing \"type\""))?
            .as_str()
            .ok_or_else(|| malformed(format!("{path}.type"), "\"type\" must be a string"))?;
        let nullable = match obj.get("nullable") {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(malformed(format!("{path}.nullable"), "must be a boolean")),
        };
        let description = match obj.get("description") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(malformed(format!("{path}.description"), "must be a string")),
        };
        let kind = match kind_name {
            "boolean" => SchemaKind::Boolean,
            "integer" => SchemaKind::Integer,
            "number" => SchemaKind::Number,
            "string" => SchemaKind::String,
            "enum" => {
                let vpath = format!("{path}.values");
                let values = obj
                    .get("values")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed(&vpath, "enum requires a \"values\" array"))?;
                let values = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| malformed(format!("{vpath}[{i}]"), "enum values must be strings"))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                SchemaKind::Enum(values)
            }
            "array" => {
                let ipath = format!("{path}.items");
                let items = obj
                    .get("items")
                    .ok_or_else(|| malformed(&ipath, "array requires \"items\""))?;
                SchemaKind::Array(Box::new(Self::parse_at(items, &ipath, depth + 1)?))
            }
            "object" => {
                let ppath = format!("{path}.properties");
                let props = obj
                    .get("properties")
                    .and_then(Value::as_object)
                    .ok_or_else(|| malformed(&ppath, "object requires a \"properties\" map"))?;
                let mut out = IndexMap::with_capacity(props.len());
                for (name, child) in props {
                    out.insert(
                        name.clone(),
                        Self::parse_at(child, &format!("{ppath}.{name}"), depth + 1)?,
                    );
                }
                SchemaKind::Object(out)
            }
            other => {
                return Err(TaskfileError::UnknownKind {
                    path: format!("{path}.type"),
                    kind: other.to_string(),
                })
            }
        };
        for key in ["values", "items", "properties"] {
            let expected = matches!(
                (&kind, key),
                (SchemaKind::Enum(_), "values")
                    | (SchemaKind::Array(_), "items")
                    | (SchemaKind::Object(_), "properties")
            );
            if obj.contains_key(key) && !expected {
                return Err(TaskfileError::InvalidSchema {
                    path: format!("{path}.{key}"),
                    message: format!("\"{key}\" is not allowed on a {} node", kind.name()),
                });
            }
        }
        Ok(SchemaNode {
            kind,
            nullable,
            description,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("type".into(), json!(self.kind.name()));
        match &self.kind {
            SchemaKind::Enum(values) => {
                obj.insert("values".into(), json!(values));
            }
            SchemaKind::Array(items) => {
                obj.insert("items".into(), items.to_json());
            }
            SchemaKind::Object(props) => {
                let props: Map<String, Value> =
                    props.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
                obj.insert("properties".into(), Value::Object(props));
            }
            _ => {}
        }
        if self.nullable {
            obj.insert("nullable".into(), json!(true));
        }
        if let Some(d) = &self.description {
            obj.insert("description".into(), json!(d));
        }
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClf,
    MulticlassClf,
    MultilabelBinaryClf,
    MultilabelMulticlassClf,
    Regression,
    MultilabelRegression,
    Ner,
    MultilabelNer,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::BinaryClf,
        TaskKind::MulticlassClf,
        TaskKind::MultilabelBinaryClf,
        TaskKind::MultilabelMulticlassClf,
        TaskKind::Regression,
        TaskKind::MultilabelRegression,
        TaskKind::Ner,
        TaskKind::MultilabelNer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BinaryClf => "binary_clf",
            TaskKind::MulticlassClf => "multiclass_clf",
            TaskKind::MultilabelBinaryClf => "multilabel_binary_clf",
            TaskKind::MultilabelMulticlassClf => "multilabel_multiclass_clf",
            TaskKind::Regression => "regression",
            TaskKind::MultilabelRegression => "multilabel_regression",
            TaskKind::Ner => "ner",
            TaskKind::MultilabelNer => "multilabel_ner",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Metrics admissible for this kind of task.
    pub fn admissible_metrics(self) -> &'static [MetricName] {
        use MetricName::*;
        match self {
            TaskKind::BinaryClf => &[Auc],
            TaskKind::MultilabelBinaryClf => &[MacroAuc, PooledAuc],
            TaskKind::MulticlassClf | TaskKind::MultilabelMulticlassClf => {
                &[KappaUnweighted, KappaLinear]
            }
            TaskKind::Regression | TaskKind::MultilabelRegression => &[Rsmapes],
            TaskKind::Ner | TaskKind::MultilabelNer => &[F1Macro, F1Weighted],
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Auc,
    MacroAuc,
    PooledAuc,
    KappaUnweighted,
    KappaLinear,
    Rsmapes,
    F1Macro,
    F1Weighted,
}

impl MetricName {
    pub const ALL: [MetricName; 8] = [
        MetricName::Auc,
        MetricName::MacroAuc,
        MetricName::PooledAuc,
        MetricName::KappaUnweighted,
        MetricName::KappaLinear,
        MetricName::Rsmapes,
        MetricName::F1Macro,
        MetricName::F1Weighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Auc => "auc",
            MetricName::MacroAuc => "macro_auc",
            MetricName::PooledAuc => "pooled_auc",
            MetricName::KappaUnweighted => "kappa_unweighted",
            MetricName::KappaLinear => "kappa_linear",
            MetricName::Rsmapes => "rsmapes",
            MetricName::F1Macro => "f1_macro",
            MetricName::F1Weighted => "f1_weighted",
        }
    }

    pub fn parse(s: &str) -> Option<MetricName> {
        MetricName::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn is_auc(self) -> bool {
        matches!(self, MetricName::Auc | MetricName::MacroAuc | MetricName::PooledAuc)
    }

    pub fn needs_labels(self) -> bool {
        matches!(
            self,
            MetricName::KappaUnweighted
                | MetricName::KappaLinear
                | MetricName::F1Macro
                | MetricName::F1Weighted
        )
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Epsilon {
    pub value: f64,
    pub unit: Option<String>,
}

/// Metric assignment for a task. `epsilon` is present only for RSMAPES,
/// `labels` only for kappa and F1.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    pub name: MetricName,
    pub epsilon: Option<Epsilon>,
    pub labels: Option<Vec<String>>,
}

impl MetricSpec {
    pub fn auc() -> Self {
        MetricSpec {
            name: MetricName::Auc,
            epsilon: None,
            labels: None,
        }
    }

    pub fn check(&self) -> Result<(), TaskfileError> {
        let mismatch = |path: &str, message: String| TaskfileError::MetricMismatch {
            path: path.to_string(),
            message,
        };
        match (&self.epsilon, self.name) {
            (None, MetricName::Rsmapes) => {
                return Err(mismatch("$.metric.epsilon", "rsmapes requires an epsilon".into()))
            }
            (Some(e), MetricName::Rsmapes) if !(e.value > 0.0 && e.value.is_finite()) => {
                return Err(mismatch(
                    "$.metric.epsilon",
                    format!("epsilon must be positive, got {}", e.value),
                ))
            }
            (Some(_), name) if name != MetricName::Rsmapes => {
                return Err(mismatch(
                    "$.metric.epsilon",
                    format!("epsilon is only valid for rsmapes, not {name}"),
                ))
            }
            _ => {}
        }
        match (&self.labels, self.name.needs_labels()) {
            (None, true) => Err(mismatch(
                "$.metric.labels",
                format!("{} requires a label set", self.name),
            )),
            (Some(_), false) => Err(mismatch(
                "$.metric.labels",
                format!("a label set is not valid for {}", self.name),
            )),
            (Some(labels), true) if labels.is_empty() => {
                Err(mismatch("$.metric.labels", "label set must not be empty".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A parsed and validated Taskfile.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDefinition {
    pub id: String,
    pub name: String,
    pub description: String,
    pub input_fields: Vec<String>,
    pub schema: SchemaNode,
    pub kind: TaskKind,
    pub metric: MetricSpec,
}

impl TaskDefinition {
    pub fn check(&self) -> Result<(), TaskfileError> {
        if self.input_fields.is_empty() {
            return Err(malformed("$.input_fields", "at least one input field is required"));
        }
        if !matches!(self.schema.kind, SchemaKind::Object(_)) {
            return Err(TaskfileError::InvalidSchema {
                path: "$.output_schema".into(),
                message: "the schema root must be an object".into(),
            });
        }
        self.schema.check()?;
        self.metric.check()?;
        if !self.kind.admissible_metrics().contains(&self.metric.name) {
            return Err(TaskfileError::MetricMismatch {
                path: "$.metric.name".into(),
                message: format!("{} is not a valid metric for a {} task", self.metric.name, self.kind),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut metric = Map::new();
        metric.insert("name".into(), json!(self.metric.name.as_str()));
        if let Some(eps) = &self.metric.epsilon {
            metric.insert("epsilon".into(), json!(eps.value));
            if let Some(unit) = &eps.unit {
                metric.insert("epsilon_unit".into(), json!(unit));
            }
        }
        if let Some(labels) = &self.metric.labels {
            metric.insert("labels".into(), json!(labels));
        }
        json!({
            "id": self.id,
            "name": self.name,
            "description": self.description,
            "input_fields": self.input_fields,
            "output_schema": self.schema.to_json(),
            "task_kind": self.kind.as_str(),
            "metric": Value::Object(metric),
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("taskfile serializes")
    }
}

fn required_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, TaskfileError> {
    obj.get(key)
        .ok_or_else(|| malformed(format!("$.{key}"), "missing required key"))?
        .as_str()
        .ok_or_else(|| malformed(format!("$.{key}"), "must be a string"))
}

/// Parses a Taskfile from raw UTF-8 JSON bytes.
pub fn parse_taskfile(bytes: &[u8]) -> Result<TaskDefinition, TaskfileError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| malformed("$", e.to_string()))?;
    parse_taskfile_value(&value)
}

pub fn parse_taskfile_value(value: &Value) -> Result<TaskDefinition, TaskfileError> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("$", "taskfile must be a JSON object"))?;
    let id = required_str(obj, "id")?.to_string();
    let name = required_str(obj, "name")?.to_string();
    let description = required_str(obj, "description")?.to_string();
    let input_fields = obj
        .get("input_fields")
        .ok_or_else(|| malformed("$.input_fields", "missing required key"))?
        .as_array()
        .ok_or_else(|| malformed("$.input_fields", "must be an array of strings"))?
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| malformed(format!("$.input_fields[{i}]"), "must be a string"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let schema_value = obj
        .get("output_schema")
        .ok_or_else(|| malformed("$.output_schema", "missing required key"))?;
    let schema = SchemaNode::from_json(schema_value)?;
    let kind_name = required_str(obj, "task_kind")?;
    let kind = TaskKind::parse(kind_name).ok_or_else(|| TaskfileError::UnknownKind {
        path: "$.task_kind".into(),
        kind: kind_name.to_string(),
    })?;
    let metric = parse_metric(
        obj.get("metric")
            .ok_or_else(|| malformed("$.metric", "missing required key"))?,
    )?;
    let task = TaskDefinition {
        id,
        name,
        description,
        input_fields,
        schema,
        kind,
        metric,
    };
    task.check()?;
    Ok(task)
}

fn parse_metric(value: &Value) -> Result<MetricSpec, TaskfileError> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("$.metric", "must be an object"))?;
    let name_str = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("$.metric.name", "missing or not a string"))?;
    let name = MetricName::parse(name_str).ok_or_else(|| TaskfileError::UnknownKind {
        path: "$.metric.name".into(),
        kind: name_str.to_string(),
    })?;
    let epsilon = match obj.get("epsilon") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let value = v
                .as_f64()
                .ok_or_else(|| malformed("$.metric.epsilon", "must be a number"))?;
            let unit = match obj.get("epsilon_unit") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(malformed("$.metric.epsilon_unit", "must be a string")),
            };
            Some(Epsilon { value, unit })
        }
    };
    if epsilon.is_none() && obj.get("epsilon_unit").is_some_and(|v| !v.is_null()) {
        return Err(TaskfileError::MetricMismatch {
            path: "$.metric.epsilon_unit".into(),
            message: "epsilon_unit given without epsilon".into(),
        });
    }
    let labels = match obj.get("labels") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| malformed(format!("$.metric.labels[{i}]"), "must be a string"))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(malformed("$.metric.labels", "must be an array of strings")),
    };
    Ok(MetricSpec {
        name,
        epsilon,
        labels,
    })
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// Renders the output-format instruction block placed into the system prompt.
pub fn render_output_format(schema: &SchemaNode) -> String {
    let mut out = String::new();
    match &schema.kind {
        SchemaKind::Object(props) => {
            out.push_str("Return your answer as a JSON object with the following fields:\n");
            render_fields(&mut out, props, 0);
        }
        _ => {
            let _ = writeln!(out, "Return your answer as JSON of this form: {}", describe(schema, 0, &mut String::new()));
        }
    }
    out.push_str("\nReply with a single JSON object and nothing else.");
    out
}

fn render_fields(out: &mut String, props: &IndexMap<String, SchemaNode>, indent: usize) {
    for (name, node) in props {
        let mut nested = String::new();
        let desc = describe(node, indent, &mut nested);
        let _ = write!(out, "{}- {}: {}", "  ".repeat(indent), quoted(name), desc);
        if let Some(d) = &node.description {
            let _ = write!(out, "; {}", d.replace('\n', " "));
        }
        out.push('\n');
        out.push_str(&nested);
    }
}

// Returns the one-line type description for `node`; nested field listings
// for objects are appended to `nested`.
fn describe(node: &SchemaNode, indent: usize, nested: &mut String) -> String {
    let base = match &node.kind {
        SchemaKind::Boolean => "boolean (true or false)".to_string(),
        SchemaKind::Integer => "integer".to_string(),
        SchemaKind::Number => "number".to_string(),
        SchemaKind::String => "string".to_string(),
        SchemaKind::Enum(values) => {
            let opts: Vec<String> = values.iter().map(|v| quoted(v)).collect();
            format!("one of {}", opts.join(", "))
        }
        SchemaKind::Array(items) => match &items.kind {
            SchemaKind::Object(props) => {
                render_fields(nested, props, indent + 1);
                let null = if items.nullable { " or null" } else { "" };
                format!("array of objects{null}, each with fields:")
            }
            _ => format!("array of {}", describe(items, indent, nested)),
        },
        SchemaKind::Object(props) => {
            render_fields(nested, props, indent + 1);
            "object with fields:".to_string()
        }
    };
    if node.nullable && !matches!(&node.kind, SchemaKind::Object(_)) {
        format!("{base} or null")
    } else if node.nullable {
        "object or null, with fields:".to_string()
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceholderMode {
    #[default]
    Empty,
    Random,
}

impl std::str::FromStr for PlaceholderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "empty" => Ok(PlaceholderMode::Empty),
            "random" => Ok(PlaceholderMode::Random),
            other => Err(format!("unknown placeholder mode {other:?}")),
        }
    }
}

/// Builds a schema-conforming fallback value.
///
/// `Empty` yields false / 0 / "" / [] / the first enum option, recursing into
/// objects, and null wherever the node is nullable. `Random` draws booleans
/// from a fair coin and enums uniformly, seeded by `seed`; numbers stay 0 and
/// arrays stay empty.
pub fn placeholder_value(schema: &SchemaNode, mode: PlaceholderMode, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    placeholder_inner(schema, mode, &mut rng)
}

fn placeholder_inner(schema: &SchemaNode, mode: PlaceholderMode, rng: &mut ChaCha8Rng) -> Value {
    if schema.nullable && mode == PlaceholderMode::Empty {
        return Value::Null;
    }
    match &schema.kind {
        SchemaKind::Boolean => match mode {
            PlaceholderMode::Empty => Value::Bool(false),
            PlaceholderMode::Random => Value::Bool(rng.gen_bool(0.5)),
        },
        SchemaKind::Integer => json!(0),
        SchemaKind::Number => json!(0.0),
        SchemaKind::String => json!(""),
        SchemaKind::Enum(values) => match mode {
            PlaceholderMode::Empty => json!(values[0]),
            PlaceholderMode::Random => json!(values[rng.gen_range(0..values.len())]),
        },
        SchemaKind::Array(_) => json!([]),
        SchemaKind::Object(props) => Value::Object(
            props
                .iter()
                .map(|(k, v)| (k.clone(), placeholder_inner(v, mode, rng)))
                .collect(),
        ),
    }
}

/// What a Taskfile designer shows next to the schema being edited.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preview {
    pub format_text: String,
    pub placeholder_json: Value,
}

pub fn preview(schema: &SchemaNode) -> Preview {
    Preview {
        format_text: render_output_format(schema),
        placeholder_json: placeholder_value(schema, PlaceholderMode::Empty, 0),
    }
}
