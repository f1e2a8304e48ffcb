//! `crashtext`: command-line orchestration of the extraction pipeline.
//! Every command reads and writes files in the canonical formats the
//! library defines; failures print a machine-readable error record to
//! stderr and exit nonzero.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use crashtext::backend::BackendError;
use crashtext::ingest::IngestError;
use crashtext::metrics::MetricsError;
use crashtext::model::ModelError;
use crashtext::pipeline::PipelineError;
use crashtext::prompt::{InvalidPolicy, PromptError};
use crashtext::report::ReportError;
use crashtext::robustness::{RobustnessError, SweepAxis};
use crashtext::synth::{Difficulty, SynthError};
use crashtext::taxonomy::{Task, TaxonomyError};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("artifact encoding: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("{0}")]
    Inference(String),
    #[error("{path}: {message}")]
    At {
        path: String,
        module: &'static str,
        message: String,
    },
}

impl CliError {
    /// Which module the failure came from, for the error record.
    fn module(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Taxonomy(_) => "taxonomy",
            CliError::Ingest(_) => "ingest",
            CliError::Synth(_) => "synth",
            CliError::Prompt(_) => "prompt",
            CliError::Backend(_) => "backend",
            CliError::Model(_) => "model",
            CliError::Pipeline(_) => "pipeline",
            CliError::Metrics(_) => "metrics",
            CliError::Robustness(_) => "robustness",
            CliError::Report(_) => "report",
            CliError::Io(_) => "io",
            CliError::Encode(_) => "io",
            CliError::Inference(_) => "backend",
            CliError::At { module, .. } => module,
        }
    }

    /// Attaches the file the failure happened on, keeping the module.
    fn at(self, path: &std::path::Path) -> CliError {
        CliError::At {
            path: path.display().to_string(),
            module: self.module(),
            message: self.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "crashtext", version, about = "Crash narrative extraction pipeline")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,
    /// Taxonomy file; the built-in taxonomy when absent.
    #[arg(long, value_name = "FILE", global = true)]
    taxonomy: Option<PathBuf>,
    /// Template directory; the built-in templates when absent.
    #[arg(long, value_name = "DIR", global = true)]
    templates: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load CRASH/GV tables, join and validate them, and write example files.
    Ingest(IngestArgs),
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Render prompts for an example file.
    BuildPrompts(BuildPromptsArgs),
    /// Run a backend over prompts and record predictions.
    Infer(InferArgs),
    /// Fine-tune the micro model on a training corpus.
    Finetune(FinetuneArgs),
    /// Score a prediction file into an evaluation report.
    Evaluate(EvaluateArgs),
    /// Cross-run and cross-participant agreement matrix.
    Consistency(ConsistencyArgs),
    /// Noise or train-size sweep with a resumable journal.
    Sweep(SweepArgs),
    /// Where predictions land on gold-Unknown cases.
    AnalyzeUnknown(AnalyzeUnknownArgs),
    /// Label distributions, JS divergence, and two-vehicle correlations.
    AnalyzeDistributions(AnalyzeDistributionsArgs),
    /// Evaluation tables, published-baseline comparison, and the citation lint.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth(_) => "synth",
            Command::BuildPrompts(_) => "build-prompts",
            Command::Infer(_) => "infer",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Consistency(_) => "consistency",
            Command::Sweep(_) => "sweep",
            Command::AnalyzeUnknown(_) => "analyze-unknown",
            Command::AnalyzeDistributions(_) => "analyze-distributions",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Mancoll,
    #[value(name = "crash_type", alias = "crashtype")]
    CrashType,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Mancoll => Task::Mancoll,
            TaskArg::CrashType => Task::CrashType,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DifficultyArg {
    Plain,
    Intertwined,
}

impl From<DifficultyArg> for Difficulty {
    fn from(d: DifficultyArg) -> Difficulty {
        match d {
            DifficultyArg::Plain => Difficulty::Plain,
            DifficultyArg::Intertwined => Difficulty::Intertwined,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    #[value(name = "noise_ratio")]
    NoiseRatio,
    #[value(name = "train_size")]
    TrainSize,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> SweepAxis {
        match a {
            AxisArg::NoiseRatio => SweepAxis::NoiseRatio,
            AxisArg::TrainSize => SweepAxis::TrainSize,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    #[value(name = "treat_as_wrong")]
    TreatAsWrong,
    #[value(name = "retry_once")]
    RetryOnce,
    Drop,
}

impl From<PolicyArg> for InvalidPolicy {
    fn from(p: PolicyArg) -> InvalidPolicy {
        match p {
            PolicyArg::TreatAsWrong => InvalidPolicy::TreatAsWrong,
            PolicyArg::RetryOnce => InvalidPolicy::RetryOnce,
            PolicyArg::Drop => InvalidPolicy::Drop,
        }
    }
}

#[derive(clap::Args)]
struct IngestArgs {
    /// Directory holding the CRASH and GV tables.
    #[arg(long, value_name = "DIR")]
    dir: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Column-name overrides (TOML).
    #[arg(long, value_name = "FILE")]
    columns: Option<PathBuf>,
    /// Fail when a vehicle row has no crash row.
    #[arg(long)]
    strict: bool,
    /// Write all valid examples to one file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Year of the training split.
    #[arg(long, requires = "test_year")]
    train_year: Option<u16>,
    /// Year of the test split.
    #[arg(long, requires = "train_year")]
    test_year: Option<u16>,
    #[arg(long, value_name = "FILE", requires = "train_year")]
    out_train: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "test_year")]
    out_test: Option<PathBuf>,
    /// Write rejected rows with their reason codes.
    #[arg(long, value_name = "FILE")]
    rejects: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Number of examples to generate.
    #[arg(long)]
    n: usize,
    /// Generation seed; the config seed when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "plain")]
    difficulty: DifficultyArg,
    /// Year stamped on every example.
    #[arg(long)]
    year: Option<u16>,
    /// Fraction of MANCOLL examples labeled Unknown.
    #[arg(long)]
    unknown_rate: Option<f64>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BuildPromptsArgs {
    #[arg(long, value_name = "FILE")]
    examples: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct InferArgs {
    /// Pre-rendered prompts from build-prompts.
    #[arg(long, value_name = "FILE", conflicts_with = "examples")]
    prompts: Option<PathBuf>,
    /// Examples to render prompts for on the fly.
    #[arg(long, value_name = "FILE")]
    examples: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Repetitions per prompt.
    #[arg(long, default_value_t = 1)]
    runs: u32,
    /// Backend endpoint: "local" or an HTTP URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to remote backends.
    #[arg(long)]
    model: Option<String>,
    /// Model bundle for the local backend.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Concurrent requests in flight.
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// What to do with output that fails to parse.
    #[arg(long, value_enum)]
    invalid_policy: Option<PolicyArg>,
}

#[derive(clap::Args)]
struct FinetuneArgs {
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Model bundle output.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Loss-trace report output.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Adapter rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Adapter scale numerator.
    #[arg(long)]
    alpha: Option<f64>,
    /// Adapted projections: q, qv, or qkv.
    #[arg(long)]
    projections: Option<String>,
    /// Training head: lora (decoder) or cls (encoder).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Vocabulary ceiling.
    #[arg(long)]
    max_vocab: Option<usize>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    preds: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Also report with gold-Unknown records excluded.
    #[arg(long)]
    exclude_unknown: bool,
    /// Evaluation report artifact (JSON).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Plot-ready table output.
    #[arg(long, value_name = "FILE")]
    tsv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ConsistencyArgs {
    /// Prediction files, one per participant, each holding runs 1 and 2.
    #[arg(long = "preds", value_name = "FILE", required = true)]
    preds: Vec<PathBuf>,
    /// Participant ids, one per file; backend ids when absent.
    #[arg(long = "id", value_name = "ID")]
    ids: Vec<String>,
    /// Add a ground-truth participant from the gold labels.
    #[arg(long)]
    with_gt: bool,
    /// Restrict to items whose gold label is not Unknown.
    #[arg(long)]
    exclude_unknown: bool,
    /// Matrix table output.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Matrix and overall values as JSON.
    #[arg(long, value_name = "FILE")]
    summary: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// Training pool.
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Held-out test set.
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    #[arg(long, value_enum)]
    axis: Option<AxisArg>,
    /// Comma-separated axis points.
    #[arg(long, value_delimiter = ',')]
    points: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Steps per training run.
    #[arg(long)]
    steps: Option<usize>,
    /// Resumable journal; completed cells are reused.
    #[arg(long, value_name = "FILE")]
    journal: Option<PathBuf>,
    /// Curve artifact (JSON).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Plot-ready table output.
    #[arg(long, value_name = "FILE")]
    tsv: Option<PathBuf>,
    #[arg(long)]
    max_vocab: Option<usize>,
}

#[derive(clap::Args)]
struct AnalyzeUnknownArgs {
    #[arg(long, value_name = "FILE")]
    preds: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct AnalyzeDistributionsArgs {
    #[arg(long, value_name = "FILE")]
    preds: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Restrict the support to codes 1-16.
    #[arg(long)]
    single_vehicle: bool,
    /// Add the two-vehicle rank-correlation section.
    #[arg(long)]
    pairs: bool,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Evaluation report artifact from `evaluate`.
    #[arg(long, value_name = "FILE")]
    eval: Option<PathBuf>,
    /// Compare the run against the stored published rows.
    #[arg(long)]
    against_baselines: bool,
    /// Verify every stored row carries its table citation.
    #[arg(long)]
    lint_baselines: bool,
    /// Baseline fixture override (TOML).
    #[arg(long, value_name = "FILE")]
    baselines: Option<PathBuf>,
    /// Table output; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = config::Settings::load(
        cli.config.as_deref(),
        cli.taxonomy.clone(),
        cli.templates.clone(),
    )?;
    match cli.command {
        Command::Ingest(args) => commands::ingest(&settings, args),
        Command::Synth(args) => commands::synth(&settings, args),
        Command::BuildPrompts(args) => commands::build_prompts(&settings, args),
        Command::Infer(args) => commands::infer(&settings, args),
        Command::Finetune(args) => commands::finetune(&settings, args),
        Command::Evaluate(args) => commands::evaluate(&settings, args),
        Command::Consistency(args) => commands::consistency(&settings, args),
        Command::Sweep(args) => commands::sweep(&settings, args),
        Command::AnalyzeUnknown(args) => commands::analyze_unknown(&settings, args),
        Command::AnalyzeDistributions(args) => commands::analyze_distributions(&settings, args),
        Command::Report(args) => commands::report(&settings, args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            e.exit()
        }
        Err(e) => {
            let _ = e.print();
            let record = serde_json::json!({
                "error": {
                    "command": "cli",
                    "module": "usage",
                    "message": e.kind().to_string(),
                }
            });
            eprintln!("{record}");
            std::process::exit(2);
        }
    };
    let command = cli.command.name();
    if let Err(e) = run(cli) {
        let record = serde_json::json!({
            "error": {
                "command": command,
                "module": e.module(),
                "message": e.to_string(),
            }
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}
