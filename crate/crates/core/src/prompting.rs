//! Message assembly for extraction, translation and repair calls.
//!
//! Templates live in `prompts/` and use `{name}` placeholders. Substitution is
//! a single pass, so placeholder-like text inside a substituted value is left
//! alone.

use serde::{Deserialize, Serialize};

use crate::ingest::Record;
use crate::output_pipeline::OutputError;
use crate::task_model::{render_output_format, SchemaNode, TaskDefinition};

pub const EXTRACT_SYSTEM_TEMPLATE: &str = include_str!("../prompts/extract_system.txt");
pub const TRANSLATE_SYSTEM_PROMPT: &str = include_str!("../prompts/translate_system.txt");
pub const REPAIR_SYSTEM_PROMPT: &str = include_str!("../prompts/repair_system.txt");
pub const REPAIR_USER_TEMPLATE: &str = include_str!("../prompts/repair_user.txt");

/// Separator between input fields in a user message.
pub const FIELD_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPurpose {
    Extract,
    Translate,
    Repair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub purpose: PromptPurpose,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("record {uid:?} lacks input field {field:?}")]
    MissingField { uid: String, field: String },
}

/// Replaces `{key}` occurrences of the given keys in one left-to-right pass.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        for (key, value) in values {
            if let Some(tail) = after.strip_prefix(key).and_then(|t| t.strip_prefix('}')) {
                out.push_str(value);
                rest = tail;
                continue 'scan;
            }
        }
        out.push('{');
        rest = after;
    }
    out.push_str(rest);
    out
}

fn joined_input(record: &Record, fields: &[String]) -> Result<String, PromptError> {
    let texts = record.texts(fields).map_err(|f| PromptError::MissingField {
        uid: record.uid.clone(),
        field: f.to_string(),
    })?;
    Ok(texts.join(FIELD_SEPARATOR))
}

pub fn extract_system_prompt(task: &TaskDefinition) -> String {
    fill_template(
        EXTRACT_SYSTEM_TEMPLATE,
        &[
            ("task", &task.name),
            ("description", &task.description),
            ("output_format", &render_output_format(&task.schema)),
        ],
    )
}

/// System prompt from the shared template; user message is the input fields
/// in declared order, separated by blank lines, unaltered.
pub fn build_extract_prompt(task: &TaskDefinition, record: &Record) -> Result<PromptBundle, PromptError> {
    Ok(build_extract_prompt_for_text(task, joined_input(record, &task.input_fields)?))
}

/// Extraction prompt over already-assembled input text (e.g. a translation).
pub fn build_extract_prompt_for_text(task: &TaskDefinition, text: String) -> PromptBundle {
    PromptBundle {
        system: extract_system_prompt(task),
        user: text,
        purpose: PromptPurpose::Extract,
    }
}

pub fn build_translation_prompt(record: &Record, fields: &[String]) -> Result<PromptBundle, PromptError> {
    Ok(PromptBundle {
        system: TRANSLATE_SYSTEM_PROMPT.to_string(),
        user: joined_input(record, fields)?,
        purpose: PromptPurpose::Translate,
    })
}

/// Asks the model to reformat its own invalid output. The source report is
/// not repeated.
pub fn build_repair_prompt(schema: &SchemaNode, invalid_output: &str, error: &OutputError) -> PromptBundle {
    let errors = error
        .messages()
        .into_iter()
        .map(|m| format!("- {m}"))
        .collect::<Vec<_>>()
        .join("\n");
    PromptBundle {
        system: REPAIR_SYSTEM_PROMPT.to_string(),
        user: fill_template(
            REPAIR_USER_TEMPLATE,
            &[
                ("invalid_output", invalid_output),
                ("errors", &errors),
                ("output_format", &render_output_format(schema)),
            ],
        ),
        purpose: PromptPurpose::Repair,
    }
}
