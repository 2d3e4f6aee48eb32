use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use extractinator::evaluation::scoring::{evaluate, read_jsonl_lines, EvalReport, TruthLine};
use extractinator::evaluation::{paired_compare, MetricError};
use extractinator::ingest::{self, ContextMode, CounterRegistry, DatasetFormat};
use extractinator::model_client::{MockBackend, MockScript, ModelClient, ModelConfig, DEFAULT_SERVER_URL, SERVER_URL_ENV};
use extractinator::par::Execution;
use extractinator::runner::{self, RunError, RunOptions};
use extractinator::synth;
use extractinator::task_model::{parse_taskfile, PlaceholderMode, TaskDefinition};

#[derive(Parser)]
#[command(name = "extractinator", version, about = "Structured extraction from clinical reports with a local language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract structured outputs for every record of a dataset.
    Run(RunArgs),
    /// Score a predictions file against ground truth.
    Eval(EvalArgs),
    /// Compare two scores files task by task.
    Compare(CompareArgs),
    /// Show the context-window plan for a dataset.
    Plan(PlanArgs),
    /// Write a synthetic corpus with known answers.
    Synth(SynthArgs),
    /// Check that the server is up and the model is available.
    CheckModel(ServerArgs),
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long)]
    model: String,
    #[arg(long, env = SERVER_URL_ENV, default_value = DEFAULT_SERVER_URL)]
    server: String,
    /// Replay a mock script instead of contacting a server.
    #[arg(long)]
    mock: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    taskfile: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    server: ServerArgs,
    #[arg(long)]
    translate: bool,
    #[arg(long, default_value = "max")]
    context: ContextMode,
    #[arg(long, default_value_t = ingest::DEFAULT_SPLIT_FRACTION)]
    split_fraction: f64,
    #[arg(long, default_value_t = ingest::DEFAULT_OVERHEAD)]
    overhead: u64,
    #[arg(long, default_value = "empty")]
    placeholder: PlaceholderMode,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    save_transcripts: bool,
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 1)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 600)]
    timeout: u64,
    /// Ask the server for JSON-constrained decoding.
    #[arg(long)]
    json_format: bool,
    /// Resolve cases one at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    taskfile: PathBuf,
    /// Also append the score line to this JSONL file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    data: PathBuf,
    /// Take the input fields from this Taskfile.
    #[arg(long)]
    taskfile: Option<PathBuf>,
    /// Input field to count (repeatable) when no Taskfile is given.
    #[arg(long = "field", default_value = "text")]
    fields: Vec<String>,
    #[arg(long, default_value = "max")]
    context: ContextMode,
    #[arg(long, default_value_t = ingest::DEFAULT_SPLIT_FRACTION)]
    split_fraction: f64,
    #[arg(long, default_value_t = ingest::DEFAULT_OVERHEAD)]
    overhead: u64,
    #[arg(long, default_value = "heuristic-chars-3")]
    counter: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Transport(anyhow::Error),
    Evaluation(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Transport(_) => 3,
            Failure::Evaluation(_) => 4,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn load_task(path: &Path) -> anyhow::Result<TaskDefinition> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_taskfile(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_records(path: &Path) -> anyhow::Result<Vec<ingest::Record>> {
    let format = DatasetFormat::from_path(path)
        .with_context(|| format!("{}: expected a .jsonl or .csv dataset", path.display()))?;
    Ok(ingest::load_dataset(path, format)?)
}

fn client_for(server: &ServerArgs, max_in_flight: usize) -> anyhow::Result<ModelClient> {
    Ok(match &server.mock {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let script: MockScript = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            ModelClient::new(Arc::new(MockBackend::from_script(script)), max_in_flight)
        }
        None => ModelClient::ollama(max_in_flight),
    })
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let task = load_task(&args.taskfile)?;
    let records = load_records(&args.data)?;
    let mut config = ModelConfig::new(&args.server.model);
    config.server_url = args.server.server.clone();
    config.temperature = args.temperature;
    config.max_in_flight = args.max_in_flight;
    config.seed = args.seed;
    config.json_format = args.json_format;
    config.request_timeout = Duration::from_secs(args.timeout);
    let client = client_for(&args.server, args.max_in_flight)?;

    let report = client
        .check_model(&config)
        .map_err(|e| Failure::Transport(anyhow::Error::new(e).context("checking the model server")))?;
    if !report.model_available {
        return Err(Failure::Config(anyhow!(
            "model {:?} is not available on {} (have: {})",
            config.model_name,
            config.server_url,
            report.available_models.join(", ")
        )));
    }

    let mut options = RunOptions::new(&args.out);
    options.translate = args.translate;
    options.context_mode = args.context;
    options.split_fraction = args.split_fraction;
    options.overhead = args.overhead;
    options.placeholder_mode = args.placeholder;
    options.save_transcripts = args.save_transcripts;
    options.resume = args.resume;
    if args.sequential {
        options.execution = Execution::Sequential;
    }
    match runner::run_task(&task, &records, &client, &config, &options) {
        Ok(out) => {
            print_json(&out.manifest);
            Ok(())
        }
        Err(e @ RunError::Aborted { .. }) => Err(Failure::Transport(e.into())),
        Err(e) => Err(Failure::Config(e.into())),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let task = load_task(&args.taskfile)?;
    let predictions = runner::read_predictions(&args.pred).map_err(|e| Failure::Config(e.into()))?;
    let truth: Vec<TruthLine> = read_jsonl_lines(&args.truth).map_err(|e| Failure::Config(e.into()))?;
    let report = evaluate(&task, &predictions, &truth).map_err(|e: MetricError| Failure::Evaluation(e.into()))?;
    let line = serde_json::to_string(&report).expect("serializable");
    if let Some(path) = &args.out {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{line}").with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{line}");
    Ok(())
}

/// Score records from a JSONL file or a JSON array.
fn load_scores(path: &Path) -> anyhow::Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(&text) {
        return items
            .into_iter()
            .map(|v| serde_json::from_value(v).with_context(|| format!("parsing {}", path.display())))
            .collect();
    }
    Ok(read_jsonl_lines(path)?)
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let a = load_scores(&args.a)?;
    let b = load_scores(&args.b)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for sa in &a {
        let Some(sb) = b.iter().find(|s| s.task_id == sa.task_id) else {
            return Err(Failure::Config(anyhow!("task {} is missing from {}", sa.task_id, args.b.display())));
        };
        xs.push(sa.value);
        ys.push(sb.value);
    }
    if b.len() != a.len() {
        return Err(Failure::Config(anyhow!("score files cover different tasks")));
    }
    let result = paired_compare(&xs, &ys, args.alpha).map_err(|e| Failure::Evaluation(e.into()))?;
    print_json(&result);
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> anyhow::Result<()> {
    let fields = match &args.taskfile {
        Some(path) => load_task(path)?.input_fields,
        None => args.fields.clone(),
    };
    let records = load_records(&args.data)?;
    let registry = CounterRegistry::default();
    let counter = registry.get(&args.counter)?;
    let counts = ingest::count_all(&records, &fields, counter, Execution::default())?;
    let plan = ingest::plan_context(&counts, args.context, args.split_fraction, args.overhead)?;
    print_json(&plan);
    Ok(())
}

fn write_jsonl(path: &Path, rows: impl Iterator<Item = Value>) -> anyhow::Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&row.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let corpus = synth::generate_synthetic_corpus_by_name(&args.kind, args.n, args.seed)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(
        &args.out.join("data.jsonl"),
        corpus.cases.iter().map(|c| serde_json::json!({"uid": c.uid, "text": c.text})),
    )?;
    write_jsonl(
        &args.out.join("truth.jsonl"),
        corpus.cases.iter().map(|c| serde_json::json!({"uid": c.uid, "value": c.truth})),
    )?;
    let taskfile = args.out.join("taskfile.json");
    std::fs::write(&taskfile, corpus.task.to_json_string() + "\n").with_context(|| format!("writing {}", taskfile.display()))?;
    eprintln!("wrote {} cases to {}", corpus.cases.len(), args.out.display());
    Ok(())
}

fn cmd_check_model(args: ServerArgs) -> Result<(), Failure> {
    let mut config = ModelConfig::new(&args.model);
    config.server_url = args.server.clone();
    let client = client_for(&args, 1)?;
    let report = client.check_model(&config).map_err(|e| Failure::Transport(e.into()))?;
    print_json(&report);
    if !report.model_available {
        return Err(Failure::Config(anyhow!("model {:?} not found", args.model)));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Plan(a) => cmd_plan(a).map_err(Failure::from),
        Command::Synth(a) => cmd_synth(a).map_err(Failure::from),
        Command::CheckModel(a) => cmd_check_model(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Config(e) | Failure::Transport(e) | Failure::Evaluation(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
