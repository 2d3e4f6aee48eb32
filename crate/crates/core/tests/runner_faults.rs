use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde_json::Value;

use extractinator::ingest::ContextMode;
use extractinator::model_client::{MockBackend, MockFailure, MockStep, ModelClient, ModelConfig};
use extractinator::par::Execution;
use extractinator::prompting::PromptPurpose;
use extractinator::runner::{
    read_predictions, run_task, RunError, RunManifest, RunOptions, RunStatus, MANIFEST_FILE, PREDICTIONS_FILE,
    TRANSCRIPTS_FILE,
};
use extractinator::synth::{generate_synthetic_corpus, oracle_answer, SyntheticCorpus};
use extractinator::task_model::TaskKind;

const TRANSLATED: &str = "[en] ";

/// Answers extraction and repair calls from the case text; translation calls
/// echo the text with a marker, and extraction insists on seeing it.
fn responder(corpus: &SyntheticCorpus, expect_translation: bool) -> MockBackend {
    let kind = corpus.task.kind;
    let texts: HashMap<String, String> = corpus.cases.iter().map(|c| (c.uid.clone(), c.text.clone())).collect();
    MockBackend::new(["mock"]).with_responder(move |req| {
        let text = texts.get(req.case_key?)?;
        match req.bundle.purpose {
            PromptPurpose::Translate => Some(MockStep::text(format!("{TRANSLATED}{text}"))),
            PromptPurpose::Extract if expect_translation && !req.bundle.user.starts_with(TRANSLATED) => {
                Some(MockStep::text("untranslated input"))
            }
            _ => Some(MockStep::text(oracle_answer(kind, text)?.to_string())),
        }
    })
}

fn config(max_in_flight: usize) -> ModelConfig {
    let mut c = ModelConfig::new("mock");
    c.max_in_flight = max_in_flight;
    c
}

fn manifest(dir: &std::path::Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn one_in_five_malformed_then_valid() {
    let corpus = generate_synthetic_corpus(TaskKind::MultilabelBinaryClf, 50, 8).unwrap();
    let mock = Arc::new(responder(&corpus, false));
    for c in corpus.cases.iter().step_by(5) {
        mock.push(c.uid.clone(), [MockStep::malformed()]);
    }
    let dir = tempfile::tempdir().unwrap();
    let mut options = RunOptions::new(dir.path());
    options.save_transcripts = true;
    let out = run_task(&corpus.task, &corpus.records(), &ModelClient::new(mock.clone(), 4), &config(4), &options).unwrap();
    let counts = &out.manifest.counts;
    assert_eq!((counts.total, counts.valid, counts.repaired, counts.placeholder), (50, 40, 10, 0));
    assert_eq!(mock.calls(), 60);

    let lines = read_predictions(&out.predictions_path).unwrap();
    for (line, case) in lines.iter().zip(&corpus.cases) {
        assert_eq!(line.uid, case.uid);
        assert_eq!(line.value, case.truth);
    }
    let transcripts = std::fs::read_to_string(dir.path().join(TRANSCRIPTS_FILE)).unwrap();
    let attempts: Vec<usize> = transcripts
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["attempts"].as_array().unwrap().len())
        .collect();
    assert_eq!(attempts.len(), 50);
    assert_eq!(attempts.iter().filter(|&&n| n == 2).count(), 10);
    assert_eq!(manifest(dir.path()), out.manifest);
}

#[test]
fn translation_precedes_extraction() {
    let corpus = generate_synthetic_corpus(TaskKind::MulticlassClf, 12, 3).unwrap();
    let mock = Arc::new(responder(&corpus, true));
    let dir = tempfile::tempdir().unwrap();
    let mut options = RunOptions::new(dir.path());
    options.translate = true;
    let out = run_task(&corpus.task, &corpus.records(), &ModelClient::new(mock.clone(), 2), &config(2), &options).unwrap();
    assert!(out.manifest.translation_enabled);
    assert_eq!(out.manifest.counts.valid, 12);
    assert_eq!(mock.calls(), 24);
    let purposes: Vec<PromptPurpose> = mock.transcript().iter().map(|t| t.1.purpose).collect();
    assert_eq!(purposes.iter().filter(|p| **p == PromptPurpose::Translate).count(), 12);
}

#[test]
fn split_plan_sets_context_per_case() {
    let mut corpus = generate_synthetic_corpus(TaskKind::Regression, 20, 4).unwrap();
    for c in corpus.cases.iter_mut().take(3) {
        c.text = format!("{}{}", c.text, " opvulling".repeat(400));
    }
    let seen: Arc<Mutex<HashMap<String, u64>>> = Arc::default();
    let log = seen.clone();
    let texts: HashMap<String, String> = corpus.cases.iter().map(|c| (c.uid.clone(), c.text.clone())).collect();
    let mock = MockBackend::new(["mock"]).with_responder(move |req| {
        let uid = req.case_key?;
        log.lock().unwrap().insert(uid.to_string(), req.config.context_length);
        Some(MockStep::text(oracle_answer(TaskKind::Regression, texts.get(uid)?)?.to_string()))
    });
    let dir = tempfile::tempdir().unwrap();
    let mut options = RunOptions::new(dir.path());
    options.context_mode = ContextMode::Split;
    options.split_fraction = 0.8;
    let out = run_task(&corpus.task, &corpus.records(), &ModelClient::new(Arc::new(mock), 2), &config(2), &options).unwrap();
    let parts = &out.manifest.plan.partitions;
    assert_eq!(parts.len(), 2);
    assert_eq!(parts[0].n_cases, 17);
    assert!(parts[0].context_length < parts[1].context_length);
    let seen = seen.lock().unwrap();
    for (i, c) in corpus.cases.iter().enumerate() {
        let want = if i < 3 { parts[1].context_length } else { parts[0].context_length };
        assert_eq!(seen[&c.uid], want, "{}", c.uid);
    }
}

#[test]
fn in_flight_limit_holds() {
    let corpus = generate_synthetic_corpus(TaskKind::BinaryClf, 24, 1).unwrap();
    let kind = corpus.task.kind;
    let texts: HashMap<String, String> = corpus.cases.iter().map(|c| (c.uid.clone(), c.text.clone())).collect();
    let mock = Arc::new(MockBackend::new(["mock"]).with_responder(move |req| {
        let answer = oracle_answer(kind, texts.get(req.case_key?)?)?;
        Some(MockStep::text(answer.to_string()).delay_ms(5))
    }));
    for limit in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        run_task(&corpus.task, &corpus.records(), &ModelClient::new(mock.clone(), limit), &config(limit), &RunOptions::new(dir.path()))
            .unwrap();
        assert!(mock.peak_in_flight() <= 3);
    }
    assert!(mock.peak_in_flight() >= 2);
}

#[test]
fn transport_failure_aborts_and_records_manifest() {
    let corpus = generate_synthetic_corpus(TaskKind::Regression, 10, 6).unwrap();
    let mock = Arc::new(responder(&corpus, false));
    mock.push(corpus.cases[4].uid.clone(), [MockStep::fail(MockFailure::Timeout)]);
    let dir = tempfile::tempdir().unwrap();
    let mut options = RunOptions::new(dir.path());
    options.execution = Execution::Sequential;
    let err = run_task(&corpus.task, &corpus.records(), &ModelClient::new(mock, 1), &config(1), &options).unwrap_err();
    assert!(matches!(err, RunError::Aborted { completed: 4, .. }), "{err:?}");
    assert!(err.is_transport());
    let m = manifest(dir.path());
    assert_eq!(m.status, RunStatus::Aborted);
    assert_eq!(m.counts.total, 4);
    assert_eq!(read_predictions(&dir.path().join(PREDICTIONS_FILE)).unwrap().len(), 4);
}

#[test]
fn context_overflow_is_not_absorbed_as_a_repair() {
    let corpus = generate_synthetic_corpus(TaskKind::Regression, 3, 6).unwrap();
    let mock = Arc::new(responder(&corpus, false));
    mock.push(corpus.cases[1].uid.clone(), [MockStep::fail(MockFailure::ContextOverflow)]);
    let dir = tempfile::tempdir().unwrap();
    let err = run_task(&corpus.task, &corpus.records(), &ModelClient::new(mock, 1), &config(1), &RunOptions::new(dir.path()))
        .unwrap_err();
    assert!(matches!(err, RunError::Aborted { .. }));
    assert!(!err.is_transport());
}
