mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use subtask_diag_core::prompt::PromptSetting;
use subtask_diag_core::sim::CapabilitySpec;

use crate::config::{parse_seeds, BackendKind, Overrides};

/// Diagnose which answering subtask (elicitation, reasoning or composing)
/// limits a micro-domain language model.
#[derive(Parser, Debug)]
#[command(name = "subtask-diag", version)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug). Logs go to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its knowledge QAs, then print its statistics.
    SimGenerate(SimArgs),
    /// Load a dataset, report statistics and per-setting validity.
    Validate(ValidateArgs),
    /// Sample, judge and score answers under the oracle-injection settings.
    Eval(EvalArgs),
    /// Knowledge probes: QA synthesis, perplexity and closed-book accuracy.
    Knowledge {
        #[command(subcommand)]
        command: KnowledgeCommand,
    },
    /// Build a diagnosis report across one or more run directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Number of items.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    items: u64,
    /// Facts chained per conclusion.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    hops: u64,
    /// Facts per item, chain plus unrelated background facts (default: hops).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    facts_per_item: Option<u64>,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(short, long, value_name = "DIR")]
    out: PathBuf,
    /// File stem for the written files (<name>.jsonl and <name>.qa.jsonl).
    #[arg(long, default_value = "sim")]
    name: String,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Dataset items file (JSONL).
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// Knowledge QA curation file (default: <dataset stem>.qa.jsonl).
    #[arg(long, value_name = "PATH")]
    qa: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TemplateArgs {
    /// Template language tag: en or ja.
    #[arg(long, value_name = "TAG")]
    lang: Option<String>,
    /// Template manifest (TOML) replacing the built-in templates.
    #[arg(long, value_name = "FILE")]
    templates: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct BackendArgs {
    /// Model backend: http, scripted, or scripted-logprob=<x>.
    #[arg(long, value_name = "KIND")]
    backend: Option<BackendKind>,
    /// Scripted capabilities as p_elicit,p_reason,p_compose.
    #[arg(long, value_name = "PE,PR,PC")]
    spec: Option<CapabilitySpec>,
    /// Endpoint base URL (also SUBTASK_DIAG_BASE_URL). The API key is read from SUBTASK_DIAG_API_KEY.
    #[arg(long, value_name = "URL")]
    base_url: Option<String>,
    /// Maximum concurrent requests.
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Retries after the first attempt for transient failures.
    #[arg(long)]
    retry_limit: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout_secs: Option<f64>,
    /// Response cache directory.
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    templates: TemplateArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Run directory to write.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated settings: no-oracle, oracle-elicitation, oracle-reasoning.
    #[arg(long, value_delimiter = ',')]
    settings: Option<Vec<PromptSetting>>,
    /// Seeds as an inclusive range (0..9) or a list (1,4,7).
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<std::vec::Vec<i64>>,
    /// Sampling temperature.
    #[arg(long, alias = "temperature")]
    temp: Option<f64>,
    /// Model answering the questions.
    #[arg(long)]
    answer_model: Option<String>,
    /// Model judging the checklist conditions.
    #[arg(long)]
    judge_model: Option<String>,
    /// Token budget per answer.
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Token budget per judge verdict.
    #[arg(long)]
    judge_max_tokens: Option<u32>,
    /// Gap above which a subtask is labeled a bottleneck.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum KnowledgeCommand {
    /// Synthesize one pending QA per oracle fact into the curation file.
    Synthesize(SynthArgs),
    /// Mean perplexity of oracle-fact paragraphs.
    Perplexity(PerplexityArgs),
    /// Closed-book accuracy on curated knowledge QAs.
    Accuracy(AccuracyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    templates: TemplateArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Synthesis model.
    #[arg(long)]
    model: Option<String>,
    /// Curation file to write (default: --qa, then <dataset stem>.qa.jsonl).
    #[arg(long, value_name = "PATH")]
    qa_out: Option<PathBuf>,
    /// Overwrite a non-empty curation file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PerplexityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Run directory receiving knowledge.json.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Model to score with.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args, Debug)]
struct AccuracyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    templates: TemplateArgs,
    #[command(flatten)]
    backend: BackendArgs,
    /// Run directory receiving knowledge.json and knowledge_qa.csv.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Model answering the QAs.
    #[arg(long)]
    model: Option<String>,
    /// Token budget per answer.
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Also evaluate QAs still pending curation.
    #[arg(long)]
    allow_uncurated: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories in series order, each DIR or TAG=DIR (tag defaults to the directory name).
    #[arg(required = true, value_name = "RUN")]
    runs: Vec<String>,
    /// Directory for report.json, report.md and report.csv (default: the run directory when only one is given).
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Series label.
    #[arg(long, default_value = "")]
    label: String,
    /// Gap above which a subtask is labeled a bottleneck.
    #[arg(long)]
    threshold: Option<f64>,
    /// Tolerance for matching no-oracle ASR to the reference's oracle-elicitation ASR.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// Oracle-reasoning ASR at or above which performance is annotated as sufficient.
    #[arg(long, default_value_t = 0.90)]
    sufficient: f64,
}

impl BackendArgs {
    fn apply(self, o: &mut Overrides) {
        o.backend = self.backend;
        o.spec = self.spec;
        o.base_url = self.base_url;
        o.max_in_flight = self.max_in_flight;
        o.retry_limit = self.retry_limit;
        o.timeout_secs = self.timeout_secs;
        o.cache_dir = self.cache_dir;
    }
}

impl DataArgs {
    fn apply(self, o: &mut Overrides) {
        o.dataset = self.dataset;
        o.knowledge_qa = self.qa;
    }
}

impl TemplateArgs {
    fn apply(self, o: &mut Overrides) {
        o.language = self.lang;
        o.templates = self.templates;
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).with_target(false).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start async runtime: {e}");
            return ExitCode::from(3);
        }
    };
    match runtime.block_on(commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
