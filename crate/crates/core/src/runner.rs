//! End-to-end runs: plan the context, resolve every case through the model,
//! and persist predictions in a fixed order so runs are reproducible and
//! resumable.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::ingest::{self, ContextMode, ContextPlan, CounterRegistry, IngestError, Record};
use crate::model_client::{ClientError, ModelClient, ModelConfig};
use crate::output_pipeline::{resolve_case, Attempt, CaseOutcome, PredictionLine, ResolveError, ResolveOptions};
use crate::par::Execution;
use crate::prompting::PromptError;
use crate::task_model::{PlaceholderMode, TaskDefinition};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run aborted after {completed} completed cases: {source}")]
    Aborted {
        completed: usize,
        #[source]
        source: ClientError,
    },
}

impl RunError {
    /// Aborted because the server went away or timed out (as opposed to a
    /// model error such as a context overflow).
    pub fn is_transport(&self) -> bool {
        matches!(self, RunError::Aborted { source, .. } if source.is_transport())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub translate: bool,
    pub context_mode: ContextMode,
    pub split_fraction: f64,
    pub overhead: u64,
    pub placeholder_mode: PlaceholderMode,
    pub counter: String,
    pub out_dir: PathBuf,
    pub save_transcripts: bool,
    pub resume: bool,
    pub execution: Execution,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            translate: false,
            context_mode: ContextMode::Max,
            split_fraction: ingest::DEFAULT_SPLIT_FRACTION,
            overhead: ingest::DEFAULT_OVERHEAD,
            placeholder_mode: PlaceholderMode::Empty,
            counter: "heuristic-chars-3".into(),
            out_dir: out_dir.into(),
            save_transcripts: false,
            resume: false,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub valid: usize,
    pub repaired: usize,
    pub placeholder: usize,
    pub flagged: usize,
}

impl Counts {
    pub fn from_lines(lines: &[PredictionLine]) -> Self {
        let mut c = Counts {
            total: lines.len(),
            ..Default::default()
        };
        for l in lines {
            match l.status.as_str() {
                "valid" => c.valid += 1,
                "repaired" => c.repaired += 1,
                _ => c.placeholder += 1,
            }
            c.flagged += l.flagged as usize;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub n_cases: usize,
    pub context_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub mode: ContextMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_fraction: Option<f64>,
    pub overhead: u64,
    pub counter: String,
    pub partitions: Vec<PartitionSummary>,
}

impl PlanSummary {
    fn new(plan: &ContextPlan, counter: &str) -> Self {
        PlanSummary {
            mode: plan.mode,
            split_fraction: plan.split_fraction,
            overhead: plan.overhead,
            counter: counter.to_string(),
            partitions: plan
                .partitions
                .iter()
                .map(|p| PartitionSummary {
                    n_cases: p.uids.len(),
                    context_length: p.context_length,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task_id: String,
    pub status: RunStatus,
    pub model: ModelConfig,
    pub plan: PlanSummary,
    pub translation_enabled: bool,
    pub placeholder_mode: PlaceholderMode,
    pub counts: Counts,
    pub started_at: String,
    pub finished_at: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TranscriptLine {
    uid: String,
    attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub predictions_path: PathBuf,
    pub manifest_path: PathBuf,
    /// Cases resolved by this invocation (excludes resumed ones).
    pub resolved_now: usize,
}

/// Parses a JSONL file, dropping an unterminated last line from disk.
fn read_complete_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep < bytes.len() {
        log::warn!("{}: dropping a partial last line", path.display());
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(keep as u64).map_err(io_err(path))?;
    }
    let text = std::str::from_utf8(&bytes[..keep]).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn append_line(file: &mut File, path: &Path, value: &impl Serialize) -> Result<(), RunError> {
    let mut line = serde_json::to_vec(value).expect("serializable");
    line.push(b'\n');
    file.write_all(&line).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Plans the context windows for `records`.
pub fn plan_run(task: &TaskDefinition, records: &[Record], options: &RunOptions) -> Result<ContextPlan, RunError> {
    let registry = CounterRegistry::default();
    let counter = registry.get(&options.counter)?;
    let counts = ingest::count_all(records, &task.input_fields, counter, options.execution)?;
    Ok(ingest::plan_context(&counts, options.context_mode, options.split_fraction, options.overhead)?)
}

/// Resolves every record and writes `predictions.jsonl` and `manifest.json`
/// into `options.out_dir`.
///
/// Cases run in plan order (short partition first, file order within a
/// partition) on up to `config.max_in_flight` workers; results are written in
/// that order whatever the completion order. A client failure stops the run,
/// leaving the cases before it on disk for `resume`.
pub fn run_task(
    task: &TaskDefinition,
    records: &[Record],
    client: &ModelClient,
    config: &ModelConfig,
    options: &RunOptions,
) -> Result<RunOutput, RunError> {
    config.check().map_err(RunError::Config)?;
    ingest::check_fields(records, &task.input_fields)?;
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.uid.as_str()) {
            return Err(IngestError::DuplicateUid(r.uid.clone()).into());
        }
    }
    let started_at = now();
    let plan = plan_run(task, records, options)?;

    let out = &options.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let pred_path = out.join(PREDICTIONS_FILE);
    let trans_path = out.join(TRANSCRIPTS_FILE);
    let manifest_path = out.join(MANIFEST_FILE);

    let done: Vec<PredictionLine> = if options.resume {
        read_complete_lines(&pred_path)?
    } else {
        if pred_path.exists() {
            return Err(RunError::Config(format!(
                "{} already exists; pass --resume to continue it",
                pred_path.display()
            )));
        }
        Vec::new()
    };
    let done_uids: HashSet<&str> = done.iter().map(|l| l.uid.as_str()).collect();
    if let Some(stray) = done_uids.iter().find(|u| !seen.contains(**u)) {
        return Err(RunError::Config(format!("{} holds uid {stray:?} not in the dataset", pred_path.display())));
    }
    if options.save_transcripts && options.resume {
        let kept: Vec<TranscriptLine> = read_complete_lines::<TranscriptLine>(&trans_path)?
            .into_iter()
            .filter(|t| done_uids.contains(t.uid.as_str()))
            .collect();
        let mut f = File::create(&trans_path).map_err(io_err(&trans_path))?;
        for t in &kept {
            append_line(&mut f, &trans_path, t)?;
        }
    }

    let by_uid: BTreeMap<&str, &Record> = records.iter().map(|r| (r.uid.as_str(), r)).collect();
    let jobs: Vec<(&Record, u64)> = plan
        .partitions
        .iter()
        .flat_map(|p| p.uids.iter().map(move |u| (u.as_str(), p.context_length)))
        .filter(|(u, _)| !done_uids.contains(u))
        .map(|(u, ctx)| (by_uid[u], ctx))
        .collect();

    let open = |path: &Path| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))
    };
    let mut pred_file = open(&pred_path)?;
    let mut trans_file = if options.save_transcripts { Some(open(&trans_path)?) } else { None };

    let resolve_options = ResolveOptions {
        translate: options.translate,
        placeholder_mode: options.placeholder_mode,
        ..ResolveOptions::default()
    };
    let workers = if options.execution.is_parallel() {
        config.max_in_flight.min(jobs.len()).max(1)
    } else {
        1
    };
    let next_job = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<CaseOutcome, ResolveError>)>();

    let mut written = 0usize;
    let mut failure: Option<(usize, ResolveError)> = None;
    let mut sink_error: Option<RunError> = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next_job, abort, resolve_options) = (&jobs, &next_job, &abort, &resolve_options);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next_job.fetch_add(1, Ordering::SeqCst);
                let Some(&(record, ctx)) = jobs.get(i) else { break };
                let mut case_config = config.clone();
                case_config.context_length = ctx;
                let result = resolve_case(task, record, client, &case_config, resolve_options);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, CaseOutcome> = BTreeMap::new();
        for (i, result) in rx {
            match result {
                Ok(outcome) => {
                    pending.insert(i, outcome);
                }
                Err(e) => {
                    if failure.as_ref().is_none_or(|(j, _)| i < *j) {
                        failure = Some((i, e));
                    }
                }
            }
            if sink_error.is_some() {
                continue;
            }
            while let Some(outcome) = pending.remove(&written) {
                if failure.as_ref().is_some_and(|(j, _)| written >= *j) {
                    break;
                }
                let mut write = || -> Result<(), RunError> {
                    if let Some(f) = trans_file.as_mut() {
                        let t = TranscriptLine {
                            uid: outcome.uid.clone(),
                            attempts: outcome.attempts.clone(),
                        };
                        append_line(f, &trans_path, &t)?;
                    }
                    append_line(&mut pred_file, &pred_path, &PredictionLine::from(&outcome))
                };
                if let Err(e) = write() {
                    abort.store(true, Ordering::SeqCst);
                    sink_error = Some(e);
                    break;
                }
                written += 1;
            }
        }
    });
    if let Some(e) = sink_error {
        return Err(e);
    }

    let lines: Vec<PredictionLine> = read_complete_lines(&pred_path)?;
    let status = if failure.is_some() { RunStatus::Aborted } else { RunStatus::Complete };
    let manifest = RunManifest {
        run_id: uuid::Uuid::new_v4().to_string(),
        task_id: task.id.clone(),
        status,
        model: config.clone(),
        plan: PlanSummary::new(&plan, &options.counter),
        translation_enabled: options.translate,
        placeholder_mode: options.placeholder_mode,
        counts: Counts::from_lines(&lines),
        started_at,
        finished_at: now(),
        tool_version: TOOL_VERSION.to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;

    match failure {
        Some((_, ResolveError::Client(source))) => Err(RunError::Aborted {
            completed: lines.len(),
            source,
        }),
        Some((_, ResolveError::Prompt(e))) => Err(e.into()),
        None => Ok(RunOutput {
            manifest,
            predictions_path: pred_path,
            manifest_path,
            resolved_now: written,
        }),
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>, RunError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    String::from_utf8_lossy(&bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunError::Config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}
