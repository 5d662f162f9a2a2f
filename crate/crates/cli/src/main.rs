mod commands;
mod common;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use codebook_forge::codebook::UpdateMode;
use codebook_forge::embed::SamplingStrategy;

use common::{CliError, Common};

#[derive(Parser, Debug)]
#[command(name = "codebook-forge", version, about = "LM-assisted codebook development and annotation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus and write it back normalized
    Ingest,
    /// Label every narrative with a codebook
    Annotate(AnnotateArgs),
    /// Agreement with reference labels, with bootstrap intervals
    Evaluate(EvaluateArgs),
    /// Develop a codebook with the feedback loop
    Develop(DevelopArgs),
    /// Serve the HTTP API for interactive runs
    Serve(ServeArgs),
    /// Review queues and convergence timelines
    Export(ExportArgs),
    /// Generate a planted-rule corpus for offline trials
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub variable: String,
    /// Codebook JSON, e.g. a version written by `develop`
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// One run per temperature, e.g. 0.2,0.5,0.7
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    #[arg(long, default_value_t = codebook_forge::metrics::DEFAULT_BOOTSTRAP_ITERATIONS)]
    pub bootstrap_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitKind {
    Full,
    Balanced,
    Random,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Restrict to these variables (default: every variable in the predictions)
    #[arg(long, value_delimiter = ',')]
    pub variable: Vec<String>,
    #[arg(long)]
    pub predictions: PathBuf,
    /// A second predictions file for a paired comparison
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long, default_value_t = codebook_forge::metrics::DEFAULT_BOOTSTRAP_ITERATIONS)]
    pub bootstrap_iterations: usize,
    #[arg(long, default_value_t = codebook_forge::metrics::DEFAULT_LEVEL)]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = SplitKind::Full)]
    pub split: SplitKind,
    /// Items per class for `--split balanced`
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    /// Sample size for `--split random`
    #[arg(long, default_value_t = 500)]
    pub size: usize,
    /// Family-wise significance level for the paired test
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Number of paired comparisons sharing `--alpha`
    #[arg(long, default_value_t = 2)]
    pub comparisons: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Simulated,
    Interactive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sampling {
    Coverage,
    Random,
}

impl From<Sampling> for SamplingStrategy {
    fn from(s: Sampling) -> Self {
        match s {
            Sampling::Coverage => SamplingStrategy::Coverage,
            Sampling::Random => SamplingStrategy::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Update {
    Replace,
    AppendOnly,
}

impl From<Update> for UpdateMode {
    fn from(u: Update) -> Self {
        match u {
            Update::Replace => UpdateMode::Replace,
            Update::AppendOnly => UpdateMode::AppendOnly,
        }
    }
}

#[derive(Args, Debug)]
pub struct DevelopArgs {
    /// Required unless resuming
    #[arg(long)]
    pub variable: Option<String>,
    #[arg(long, value_enum, default_value_t = Mode::Simulated)]
    pub mode: Mode,
    /// Continue the run in --out from its last completed iteration
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum, default_value_t = Sampling::Coverage)]
    pub sampling: Sampling,
    /// Budget: stop once the guide set exceeds this size
    #[arg(short = 'b', long = "budget", default_value_t = 150)]
    pub b: usize,
    /// Batch size
    #[arg(short = 'n', long = "batch-size", default_value_t = 5)]
    pub n: usize,
    /// Minimum guide-set size before stopping on accuracy
    #[arg(short = 'k', long = "min-guide", default_value_t = 30)]
    pub k: usize,
    /// Target validation accuracy
    #[arg(short = 'm', long = "target", default_value_t = 0.9)]
    pub m: f64,
    /// Validation items per class
    #[arg(short = 'j', long = "val-per-class", default_value_t = 20)]
    pub j: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iterations: u32,
    /// Restrict sampling to narratives near these keywords
    #[arg(long, value_delimiter = ',')]
    pub keywords: Vec<String>,
    #[arg(long)]
    pub upsample_size: Option<usize>,
    /// JSON map of narrative id to reasoning, used as simulated rationales
    #[arg(long)]
    pub cot_cache: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub rationale_only_errors: bool,
    #[arg(long, value_enum, default_value_t = Update::Replace)]
    pub update_mode: Update,
    /// Interactive mode: address to serve on
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory holding one subdirectory per run
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Convergence table of the run in --run-dir, comma-separated
    #[arg(long, requires = "run_dir")]
    pub timeline: bool,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Predictions to compare against the corpus's reference labels
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub variable: Option<String>,
    #[arg(long)]
    pub disagreements: Option<usize>,
    #[arg(long)]
    pub agreements: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Three-class legal-interaction corpus
    Legal,
    Binary,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Legal)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 634)]
    pub size: usize,
    /// Binary variable name
    #[arg(long, default_value = "depressed_mood")]
    pub name: String,
    #[arg(long, default_value_t = 0.3)]
    pub positive_share: f64,
    /// Where to write cached reasoning for simulated feedback
    #[arg(long)]
    pub cot_out: Option<PathBuf>,
    /// Where to write the variable spec
    #[arg(long)]
    pub spec_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let c = &cli.common;
    let result = match cli.command {
        Command::Ingest => commands::ingest::run(c),
        Command::Annotate(a) => commands::annotate::run(c, &a),
        Command::Evaluate(a) => commands::evaluate::run(c, &a),
        Command::Develop(a) => commands::develop::run(c, &a),
        Command::Serve(a) => commands::serve::run(c, &a),
        Command::Export(a) => commands::export::run(c, &a),
        Command::Synth(a) => commands::synth::run(c, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `codebook-forge --help` for usage.");
            ExitCode::from(2)
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
