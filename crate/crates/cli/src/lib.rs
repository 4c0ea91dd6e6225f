//! `mkedit`: ingestion, editing, querying, evaluation and the REST service.

pub mod backends;
pub mod commands;
pub mod config;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use mkedit_core::eval::EvalError;
use mkedit_core::gateway::GatewayError;
use mkedit_core::kb::Language;
use mkedit_core::pipeline::PipelineError;
use mkedit_core::retrieval::RetrievalError;

use config::{BackendArgs, LangList, PromptArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_TRANSPORT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mkedit", version, about = "Retrieval-augmented multilingual knowledge editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and deduplicate a benchmark file.
    Ingest(IngestArgs),
    /// Add, replace or remove a fact in the knowledge base.
    Edit(EditArgs),
    /// Answer one query against the knowledge base.
    Query(QueryArgs),
    /// Evaluate an edit-language by test-language matrix.
    Eval(EvalArgs),
    /// Vary the knowledge base size.
    AblateKb(AblateKbArgs),
    /// Vary the number of demonstrations.
    AblateShots(AblateShotsArgs),
    /// Measure how often the retriever finds the right fact.
    RetrieverAcc(RetrieverAccArgs),
    /// Time the pipeline per edit for several prompt settings.
    BenchLatency(BenchLatencyArgs),
    /// Run the REST service.
    Serve(ServeArgs),
    /// Write a synthetic dataset with matching mock fixtures.
    Synth(SynthArgs),
    /// Re-run a command from its config snapshot.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Deduplicated dataset output.
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
    /// Also load this language's facts into the knowledge base.
    #[arg(long)]
    pub kb_lang: Option<Language>,
    #[arg(long, default_value = "kb.jsonl")]
    pub kb: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long, default_value = "kb.jsonl")]
    pub kb: PathBuf,
    #[arg(long, required_unless_present = "remove")]
    pub lang: Option<Language>,
    #[arg(long = "q", alias = "question", required_unless_present = "remove")]
    pub question: Option<String>,
    #[arg(long = "a", alias = "answer", required_unless_present = "remove")]
    pub answer: Option<String>,
    /// Remove the entry with this id instead.
    #[arg(long, conflicts_with_all = ["lang", "question", "answer"])]
    pub remove: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long, default_value = "kb.jsonl")]
    pub kb: PathBuf,
    /// Language of the query.
    #[arg(long)]
    pub lang: Language,
    #[arg(long)]
    pub text: String,
    /// Language the demonstrations' first line uses [default: the retrieved fact's]
    #[arg(long)]
    pub edit_lang: Option<Language>,
    /// Dataset to draw demonstrations from.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Print the result as JSON.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Deduplicated dataset (interchange JSON).
    #[arg(long)]
    pub data: PathBuf,
    /// Separate demonstration pool [default: the dataset, leaving the tested record out]
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Use only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "en")]
    pub edit_langs: LangList,
    #[arg(long, default_value = "en")]
    pub test_langs: LangList,
    /// Report path; CSV, timing and config snapshot are written beside it.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Print progress to stderr.
    #[arg(long)]
    pub progress: bool,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct AblateKbArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,200,400,800")]
    pub sizes: Vec<usize>,
    /// Records tested at every size [default: the smallest size]
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long, default_value = "en")]
    pub edit_lang: Language,
    #[arg(long, default_value = "en")]
    pub test_lang: Language,
    #[arg(long, default_value = "ablate_kb.json")]
    pub out: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct AblateShotsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Shot counts to compare; 0 means zero-shot.
    #[arg(long, value_delimiter = ',', default_value = "0,2,4,8,16")]
    pub counts: Vec<usize>,
    #[arg(long, default_value = "en")]
    pub edit_lang: Language,
    #[arg(long, default_value = "en")]
    pub test_lang: Language,
    #[arg(long, default_value = "ablate_shots.json")]
    pub out: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct RetrieverAccArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value = "en")]
    pub edit_lang: Language,
    #[arg(long, default_value = "en")]
    pub test_lang: Language,
    /// Probes to score: question, rephrase, locality, portability, or all.
    #[arg(long, default_value = "all")]
    pub probes: String,
    #[arg(long, default_value = "retriever_acc.json")]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct BenchLatencyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub n_edits: usize,
    /// Shot counts to time; 0 means zero-shot, others use --mode (few_bi by default).
    #[arg(long, value_delimiter = ',', default_value = "0,4,8,16")]
    pub counts: Vec<usize>,
    #[arg(long, default_value = "en")]
    pub edit_lang: Language,
    #[arg(long, default_value = "en")]
    pub test_lang: Language,
    /// Markdown table path; JSON and config snapshot are written beside it.
    #[arg(long, default_value = "latency.md")]
    pub out: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value = "kb.jsonl")]
    pub kb: PathBuf,
    /// Dataset for evaluation jobs and demonstrations.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation jobs running at once.
    #[arg(long, default_value_t = 1)]
    pub eval_workers: usize,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = mkedit_core::synthetic::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub snapshot: PathBuf,
}

/// Exit status for an error: 2 when a backend could not be reached or
/// misbehaved, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let transport = err.chain().any(|cause| {
        cause.downcast_ref::<GatewayError>().is_some_and(GatewayError::is_transport)
            || cause.downcast_ref::<PipelineError>().is_some_and(|e| e.transport)
            || cause.downcast_ref::<EvalError>().is_some_and(EvalError::is_transport)
            || cause.downcast_ref::<RetrievalError>().is_some_and(RetrievalError::is_transport)
    });
    if transport {
        EXIT_TRANSPORT
    } else {
        EXIT_INVALID
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command, &argv[1.min(argv.len())..]) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
