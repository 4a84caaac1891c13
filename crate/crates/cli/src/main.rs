use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use eipl_core::backend::{build_backend, BackendConfig, BackendKind, MockBackend, BASE_URL_ENV};
use eipl_core::batch::{grade_batch, read_results, write_results, BatchError, ResultRow};
use eipl_core::corpus::{load_question, load_question_dir, load_responses, HumanLabel, LoadOptions};
use eipl_core::evaluation::{resolve_labels, sweep, CountSource, EvalReport, FilterPolicy, SweepOptions};
use eipl_core::pipeline::{grade_response, GradeFailure, PipelineConfig, PostRule};
use eipl_core::{Backend, Level, StudentResponse};
use eipl_service::{AppState, SessionStore};

#[derive(Parser)]
#[command(name = "eipl", version, about = "Classify code explanations by segmenting them onto code lines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment and classify one explanation.
    Segment(SegmentArgs),
    /// Grade a file of responses into a results JSONL file.
    Batch(BatchArgs),
    /// Score results against human labels at one threshold.
    Evaluate(EvalArgs),
    /// Score results against human labels across several thresholds.
    Sweep(EvalArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// remote, mock or rule-based
    #[arg(long, default_value = "rule-based")]
    backend: BackendKind,
    #[arg(long, default_value = "gpt-4o")]
    model: String,
    /// Defaults to $EIPL_BASE_URL.
    #[arg(long)]
    base_url: Option<String>,
    /// Mock fixtures (JSONL).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(Args)]
struct PipelineArgs {
    /// Segments above this count are multi-structural.
    #[arg(long, default_value_t = 1)]
    threshold: u32,
    /// Skip all post-processing rules.
    #[arg(long, conflicts_with = "rule")]
    no_postprocess: bool,
    /// Post-processing rule to apply, repeatable (signature_only, drop_lines).
    #[arg(long)]
    rule: Vec<PostRule>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    question: PathBuf,
    #[arg(long, conflicts_with = "stdin", required_unless_present = "stdin")]
    text: Option<String>,
    /// Read the explanation from stdin.
    #[arg(long)]
    stdin: bool,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct BatchArgs {
    /// Directory of question JSON files.
    #[arg(long)]
    questions: PathBuf,
    /// Responses as JSONL or CSV.
    #[arg(long)]
    responses: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Results JSONL from `batch`.
    #[arg(long)]
    results: PathBuf,
    /// Labels as JSONL or CSV with `response_id` and `human_label`. Falls
    /// back to labels stored in the results.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated; `evaluate` uses the first only.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    thresholds: Vec<u32>,
    #[arg(long, default_value = "multistructural")]
    positive_class: Level,
    /// exclude-incorrect or include-all
    #[arg(long, default_value = "exclude-incorrect")]
    policy: FilterPolicy,
    /// Threshold the counts before post-processing.
    #[arg(long)]
    raw_counts: bool,
    /// Report each question separately instead of pooling.
    #[arg(long)]
    group_by_question: bool,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "data/questions")]
    questions: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Built UI assets.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Attempt counter snapshot, loaded at start and written on shutdown.
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Backend(String),
    Parse(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Backend(_) => 3,
            Failure::Parse(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Backend(m) | Failure::Parse(m) => m,
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

impl From<GradeFailure> for Failure {
    fn from(f: GradeFailure) -> Self {
        match f {
            GradeFailure::Backend(e) => Failure::Backend(e.to_string()),
            GradeFailure::Parse(e) => Failure::Parse(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl BackendArgs {
    fn build(&self, concurrency: usize) -> Result<Arc<dyn Backend>, Failure> {
        let cfg = BackendConfig {
            kind: self.backend,
            base_url: self.base_url.clone().or_else(|| std::env::var(BASE_URL_ENV).ok()),
            model_name: self.model.clone(),
            max_retries: self.max_retries,
            timeout: Duration::from_secs(self.timeout_secs),
            concurrency_limit: concurrency,
            ..BackendConfig::default()
        };
        let mock = match &self.fixtures {
            Some(path) => Some(MockBackend::from_jsonl(path).map_err(config)?),
            None => None,
        };
        build_backend(&cfg, mock).map_err(config)
    }
}

impl PipelineArgs {
    fn build(&self) -> Result<PipelineConfig, Failure> {
        if self.threshold < 1 {
            return Err(Failure::Config(format!("BadThreshold: threshold must be >= 1, got {}", self.threshold)));
        }
        let rules = if self.no_postprocess {
            vec![]
        } else if self.rule.is_empty() {
            PipelineConfig::default().rules
        } else {
            self.rule.clone()
        };
        Ok(PipelineConfig {
            rules,
            threshold: self.threshold,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = rt.block_on(async {
        match cli.command {
            Command::Segment(a) => segment(a).await,
            Command::Batch(a) => batch(a).await,
            Command::Evaluate(a) => evaluate(a, true),
            Command::Sweep(a) => evaluate(a, false),
            Command::Serve(a) => serve(a).await,
        }
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

async fn segment(a: SegmentArgs) -> Result<(), Failure> {
    let pipeline = a.pipeline.build()?;
    let question = load_question(&a.question).map_err(config)?;
    let text = match a.text {
        Some(t) => t,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(config)?;
            s
        }
    };
    let backend = a.backend.build(1)?;
    let response = StudentResponse {
        question_id: question.id.clone(),
        response_id: "cli".into(),
        text,
        human_label: None,
    };
    let result = grade_response(&question, &response, backend.as_ref(), &pipeline)
        .await
        .map_err(|e| Failure::from(e.failure))?;
    println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
    eprintln!(
        "{}: {} segments ({} before post-processing), threshold {} -> {}",
        question.id, result.post_count, result.raw_count, result.threshold, result.level
    );
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

async fn batch(a: BatchArgs) -> Result<(), Failure> {
    let pipeline = a.pipeline.build()?;
    if a.concurrency == 0 {
        return Err(Failure::Config("--concurrency must be positive".into()));
    }
    let questions = load_question_dir(&a.questions, LoadOptions::default()).map_err(config)?;
    let responses = load_responses(&a.responses).map_err(config)?;
    let backend = a.backend.build(a.concurrency)?;
    let rows = grade_batch(&questions, &responses, backend.as_ref(), &pipeline, a.concurrency)
        .await
        .map_err(|e: BatchError| config(e))?;
    let file = File::create(&a.out).map_err(|e| Failure::Config(format!("{}: {e}", a.out.display())))?;
    write_results(&rows, BufWriter::new(file)).map_err(config)?;
    let failed = rows.iter().filter(|r| matches!(r, ResultRow::Failed(_))).count();
    eprintln!("graded {} responses, {failed} failed -> {}", rows.len(), a.out.display());
    Ok(())
}

#[derive(serde::Deserialize)]
struct LabelRecord {
    response_id: String,
    human_label: String,
}

fn load_labels(path: &Path) -> Result<HashMap<String, HumanLabel>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let bad = |n: usize, msg: String| Failure::Config(format!("{}:{n}: {msg}", path.display()));
    let records: Vec<(usize, LabelRecord)> = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        reader
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map(|r| (i + 2, r)).map_err(|e| bad(i + 2, e.to_string())))
            .collect::<Result<_, _>>()?
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map(|r| (i + 1, r)).map_err(|e| bad(i + 1, e.to_string())))
            .collect::<Result<_, _>>()?
    };
    records
        .into_iter()
        .map(|(n, r)| {
            let label = HumanLabel::parse(&r.human_label).ok_or_else(|| bad(n, format!("unknown label `{}`", r.human_label)))?;
            Ok((r.response_id, label))
        })
        .collect()
}

fn evaluate(a: EvalArgs, single: bool) -> Result<(), Failure> {
    let file = File::open(&a.results).map_err(|e| Failure::Config(format!("{}: {e}", a.results.display())))?;
    let rows = read_results(BufReader::new(file)).map_err(config)?;
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        match row {
            ResultRow::Graded(r) => results.push(*r),
            ResultRow::Failed(f) => eprintln!("skipping `{}`: {} ({})", f.response_id, f.error.kind, f.error.message),
        }
    }
    let explicit = a.labels.as_deref().map(load_labels).transpose()?;
    let labels = resolve_labels(&results, explicit.as_ref()).map_err(config)?;
    let thresholds = if single {
        a.thresholds.iter().take(1).copied().collect()
    } else {
        a.thresholds.clone()
    };
    let options = SweepOptions {
        thresholds,
        counts: if a.raw_counts { CountSource::Raw } else { CountSource::PostProcessed },
        policy: a.policy,
        positive_class: a.positive_class,
        group_by_question: a.group_by_question,
    };
    let report = sweep(&results, &labels, &options).map_err(config)?;
    write_report(&report, a.out_json.as_deref(), a.out_csv.as_deref())?;
    print_headline(&report);
    Ok(())
}

fn write_report(report: &EvalReport, json: Option<&Path>, csv_path: Option<&Path>) -> Result<(), Failure> {
    let io = |p: &Path, e: std::io::Error| Failure::Config(format!("{}: {e}", p.display()));
    match json {
        Some(p) => std::fs::write(p, report.to_json()).map_err(|e| io(p, e))?,
        None if csv_path.is_none() => std::io::stdout().write_all(report.to_json().as_bytes()).map_err(config)?,
        None => {}
    }
    if let Some(p) = csv_path {
        std::fs::write(p, report.to_csv()).map_err(|e| io(p, e))?;
    }
    Ok(())
}

fn print_headline(report: &EvalReport) {
    let Some(row) = report.rows.first() else { return };
    let group = row.group.as_deref().map(|g| format!("{g} ")).unwrap_or_default();
    eprintln!(
        "{group}threshold {}: agreement {:.3}, kappa {:.3}, precision {:.3}, recall {:.3}, f1 {:.3} ({} positive), macro f1 {:.3}",
        row.threshold, row.agreement, row.kappa, row.precision, row.recall, row.f1, report.positive_class, row.macro_f1
    );
    for w in &row.warnings {
        eprintln!("warning: {w}");
    }
}

async fn serve(a: ServeArgs) -> Result<(), Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let pipeline = a.pipeline.build()?;
    let questions = load_question_dir(&a.questions, LoadOptions::default()).map_err(config)?;
    let backend = a.backend.build(a.concurrency.max(1))?;
    let sessions = match &a.sessions {
        Some(p) => SessionStore::with_snapshot(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => SessionStore::in_memory(),
    };
    let state = Arc::new(AppState::new(questions, backend, pipeline).with_sessions(sessions));
    eipl_service::serve(state, SocketAddr::new(a.host, a.port), a.static_dir)
        .await
        .map_err(config)
}
