//! Seeded synthetic report corpora with known answers, and an oracle that
//! reads the answers back out of the generated text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::evaluation::scoring::TruthLine;
use crate::ingest::Record;
use crate::task_model::{parse_taskfile_value, TaskDefinition, TaskKind};

/// RSMAPES tolerance of the synthetic regression tasks, in millimetres.
pub const SYNTH_EPSILON_MM: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("no synthetic generator for task kind {0}")]
    UnsupportedKind(String),
    #[error("n must be at least 1")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCase {
    pub uid: String,
    pub text: String,
    pub truth: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub task: TaskDefinition,
    pub cases: Vec<SyntheticCase>,
}

impl SyntheticCorpus {
    pub fn records(&self) -> Vec<Record> {
        self.cases
            .iter()
            .map(|c| Record::new(c.uid.clone()).with_field("text", c.text.clone()))
            .collect()
    }

    pub fn truth(&self) -> Vec<TruthLine> {
        self.cases
            .iter()
            .map(|c| TruthLine {
                uid: c.uid.clone(),
                value: c.truth.clone(),
            })
            .collect()
    }
}

const FIRST_NAMES: [&str; 8] = ["Jan", "Marieke", "Pieter", "Sanne", "Kees", "Anouk", "Joost", "Fleur"];
const LAST_NAMES: [&str; 8] = ["Jansen", "de Vries", "Bakker", "Visser", "Smit", "Meijer", "de Boer", "Mulder"];
const SEGMENTS: [&str; 6] = ["I", "II", "IVa", "V", "VII", "VIII"];
const FINDINGS: [&str; 3] = ["infiltraat", "effusie", "pneumothorax"];
const SEVERITY: [&str; 4] = ["afwezig", "licht", "matig", "ernstig"];
const FILLER: [&str; 4] = [
    "Vergeleken met het vorige onderzoek.",
    "Geen andere bijzonderheden.",
    "Indicatie: controle.",
    "Techniek: standaardprotocol.",
];

/// The Taskfile of the synthetic task for `kind`.
pub fn synthetic_task(kind: TaskKind) -> TaskDefinition {
    let (schema, metric, description) = match kind {
        TaskKind::BinaryClf => (
            json!({"type": "object", "properties": {"maligniteit": {"type": "boolean"}}}),
            json!({"name": "auc"}),
            "Bepaal of het verslag aanwijzingen voor maligniteit beschrijft.",
        ),
        TaskKind::MulticlassClf => (
            json!({"type": "object", "properties": {"categorie": {"type": "enum", "values": ["1", "2", "3", "4", "5"]}}}),
            json!({"name": "kappa_linear", "labels": ["1", "2", "3", "4", "5"]}),
            "Geef de BI-RADS categorie uit het verslag.",
        ),
        TaskKind::MultilabelBinaryClf => (
            json!({"type": "object", "properties": {
                "infiltraat": {"type": "boolean"},
                "effusie": {"type": "boolean"},
                "pneumothorax": {"type": "boolean"}
            }}),
            json!({"name": "macro_auc"}),
            "Geef per bevinding aan of deze aanwezig is.",
        ),
        TaskKind::MultilabelMulticlassClf => (
            json!({"type": "object", "properties": {
                "links": {"type": "enum", "values": SEVERITY},
                "rechts": {"type": "enum", "values": SEVERITY}
            }}),
            json!({"name": "kappa_unweighted", "labels": SEVERITY}),
            "Geef de ernst van de afwijking links en rechts.",
        ),
        TaskKind::Regression => (
            json!({"type": "object", "properties": {"diameter_mm": {"type": "number", "description": "millimetres"}}}),
            json!({"name": "rsmapes", "epsilon": SYNTH_EPSILON_MM, "epsilon_unit": "mm"}),
            "Geef de diameter van de laesie in millimeters.",
        ),
        TaskKind::MultilabelRegression => (
            json!({"type": "object", "properties": {"laesies_mm": {"type": "array", "items": {"type": "number"}}}}),
            json!({"name": "rsmapes", "epsilon": SYNTH_EPSILON_MM, "epsilon_unit": "mm"}),
            "Geef de diameter van elke laesie in millimeters, in volgorde van vermelding.",
        ),
        TaskKind::Ner => (
            json!({"type": "object", "properties": {"namen": {"type": "array", "items": {"type": "string"}}}}),
            json!({"name": "f1_macro", "labels": ["PERSOON"]}),
            "Noem alle persoonsnamen in het verslag.",
        ),
        TaskKind::MultilabelNer => (
            json!({"type": "object", "properties": {"entiteiten": {"type": "array", "items": {
                "type": "object", "properties": {
                    "text": {"type": "string"},
                    "tag": {"type": "enum", "values": ["PERSOON", "DATUM"]}
                }
            }}}}),
            json!({"name": "f1_weighted", "labels": ["PERSOON", "DATUM"]}),
            "Noem alle persoonsnamen en datums in het verslag.",
        ),
    };
    parse_taskfile_value(&json!({
        "id": format!("synthetic_{}", kind.as_str()),
        "name": format!("Synthetic {}", kind.as_str().replace('_', " ")),
        "description": description,
        "input_fields": ["text"],
        "output_schema": schema,
        "task_kind": kind.as_str(),
        "metric": metric,
    }))
    .expect("built-in synthetic Taskfile is valid")
}

fn token_truth(parts: &[(String, &str)]) -> (String, Value) {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (text, tag) in parts {
        for t in text.split_whitespace() {
            tokens.push(t.to_string());
            labels.push(tag.to_string());
        }
    }
    (tokens.join(" "), json!({"tokens": tokens, "labels": labels}))
}

fn person(rng: &mut ChaCha8Rng) -> String {
    format!("{} {}", FIRST_NAMES.choose(rng).unwrap(), LAST_NAMES.choose(rng).unwrap())
}

fn make_case(kind: TaskKind, rng: &mut ChaCha8Rng) -> (String, Value) {
    let filler = FILLER.choose(rng).unwrap();
    match kind {
        TaskKind::BinaryClf => {
            let yes = rng.gen_bool(0.5);
            let phrase = if yes { "Er zijn aanwijzingen voor maligniteit." } else { "Er zijn geen aanwijzingen voor maligniteit." };
            (format!("{filler}\nConclusie: {phrase}"), json!({"maligniteit": yes}))
        }
        TaskKind::MulticlassClf => {
            let k = rng.gen_range(1..=5);
            (format!("{filler}\nBI-RADS categorie {k}."), json!({"categorie": k.to_string()}))
        }
        TaskKind::MultilabelBinaryClf => {
            let flags: Vec<bool> = FINDINGS.iter().map(|_| rng.gen_bool(0.5)).collect();
            let lines: Vec<String> = FINDINGS
                .iter()
                .zip(&flags)
                .map(|(f, &b)| format!("{f}: {}", if b { "ja" } else { "nee" }))
                .collect();
            let truth = json!({"infiltraat": flags[0], "effusie": flags[1], "pneumothorax": flags[2]});
            (format!("{filler}\nBevindingen:\n{}", lines.join("\n")), truth)
        }
        TaskKind::MultilabelMulticlassClf => {
            let l = *SEVERITY.choose(rng).unwrap();
            let r = *SEVERITY.choose(rng).unwrap();
            (format!("{filler}\nLinks: {l}. Rechts: {r}."), json!({"links": l, "rechts": r}))
        }
        TaskKind::Regression => {
            let x = (rng.gen_range(2.0..60.0f64) * 10.0).round() / 10.0;
            let seg = SEGMENTS.choose(rng).unwrap();
            (
                format!("{filler}\nEr is een laesie van {x:.1} mm in segment {seg}."),
                json!({"diameter_mm": x}),
            )
        }
        TaskKind::MultilabelRegression => {
            let n = rng.gen_range(1..=3);
            let xs: Vec<f64> = (0..n).map(|_| (rng.gen_range(2.0..40.0f64) * 10.0).round() / 10.0).collect();
            let listed: Vec<String> = xs.iter().map(|x| format!("laesie van {x:.1} mm")).collect();
            (format!("{filler}\nGevonden: {}.", listed.join(", ")), json!({"laesies_mm": xs}))
        }
        TaskKind::Ner => {
            let a = person(rng);
            let b = person(rng);
            token_truth(&[
                ("Patiënt".into(), "O"),
                (a, "PERSOON"),
                ("is gezien door dokter".into(), "O"),
                (b, "PERSOON"),
                ("op de polikliniek .".into(), "O"),
            ])
        }
        TaskKind::MultilabelNer => {
            let a = person(rng);
            let date = format!("{:02}-{:02}-20{:02}", rng.gen_range(1..=28), rng.gen_range(1..=12), rng.gen_range(10..=25));
            token_truth(&[
                ("Onderzoek van".into(), "O"),
                (a, "PERSOON"),
                ("verricht op".into(), "O"),
                (date, "DATUM"),
                ("zonder complicaties .".into(), "O"),
            ])
        }
    }
}

/// `n` templated pseudo-reports for `kind`, deterministic per `seed`.
pub fn generate_synthetic_corpus(kind: TaskKind, n: usize, seed: u64) -> Result<SyntheticCorpus, SynthError> {
    if n == 0 {
        return Err(SynthError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = (0..n)
        .map(|i| {
            let (text, truth) = make_case(kind, &mut rng);
            SyntheticCase {
                uid: format!("case-{i:05}"),
                text,
                truth,
            }
        })
        .collect();
    Ok(SyntheticCorpus {
        task: synthetic_task(kind),
        cases,
    })
}

pub fn generate_synthetic_corpus_by_name(kind: &str, n: usize, seed: u64) -> Result<SyntheticCorpus, SynthError> {
    let kind = TaskKind::parse(kind).ok_or_else(|| SynthError::UnsupportedKind(kind.to_string()))?;
    generate_synthetic_corpus(kind, n, seed)
}

fn entity_spans(text: &str) -> Vec<(String, &'static str)> {
    let first = FIRST_NAMES.join("|");
    let last = LAST_NAMES.join("|");
    let re = Regex::new(&format!(r"\b(?:({first}) ({last})|(\d{{2}}-\d{{2}}-\d{{4}}))\b")).expect("valid regex");
    re.captures_iter(text)
        .map(|c| match c.get(3) {
            Some(d) => (d.as_str().to_string(), "DATUM"),
            None => (c.get(0).unwrap().as_str().to_string(), "PERSOON"),
        })
        .collect()
}

/// Reads the answer for `kind` back out of a synthetic report, in the
/// synthetic task's output shape.
pub fn oracle_answer(kind: TaskKind, text: &str) -> Option<Value> {
    let number = |s: &str| s.parse::<f64>().ok();
    match kind {
        TaskKind::BinaryClf => Some(json!({"maligniteit": !text.contains("geen aanwijzingen")})),
        TaskKind::MulticlassClf => {
            let c = Regex::new(r"BI-RADS categorie (\d)").ok()?.captures(text)?;
            Some(json!({"categorie": c[1].to_string()}))
        }
        TaskKind::MultilabelBinaryClf => {
            let mut obj = serde_json::Map::new();
            for f in FINDINGS {
                let c = Regex::new(&format!(r"{f}: (ja|nee)")).ok()?.captures(text)?;
                obj.insert(f.to_string(), json!(&c[1] == "ja"));
            }
            Some(Value::Object(obj))
        }
        TaskKind::MultilabelMulticlassClf => {
            let c = Regex::new(r"Links: (\w+)\. Rechts: (\w+)\.").ok()?.captures(text)?;
            Some(json!({"links": &c[1], "rechts": &c[2]}))
        }
        TaskKind::Regression => {
            let c = Regex::new(r"laesie van ([0-9.]+) mm").ok()?.captures(text)?;
            Some(json!({"diameter_mm": number(&c[1])?}))
        }
        TaskKind::MultilabelRegression => {
            let re = Regex::new(r"laesie van ([0-9.]+) mm").ok()?;
            let xs: Option<Vec<f64>> = re.captures_iter(text).map(|c| number(&c[1])).collect();
            Some(json!({"laesies_mm": xs?}))
        }
        TaskKind::Ner => {
            let names: Vec<String> = entity_spans(text).into_iter().map(|(s, _)| s).collect();
            Some(json!({"namen": names}))
        }
        TaskKind::MultilabelNer => {
            let ents: Vec<Value> = entity_spans(text)
                .into_iter()
                .map(|(s, tag)| json!({"text": s, "tag": tag}))
                .collect();
            Some(json!({"entiteiten": ents}))
        }
    }
}
