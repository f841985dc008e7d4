//! `manner-align` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};
use manner_align::{BackendDescriptor, RewriteVariant};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Backend(anyhow::Error),
}

impl Failure {
    pub fn data(msg: impl std::fmt::Display) -> Self {
        Failure::Data(anyhow::anyhow!("{msg}"))
    }

    pub fn backend(msg: impl std::fmt::Display) -> Self {
        Failure::Backend(anyhow::anyhow!("{msg}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "manner-align", version, about = "Align an instruction dataset's answers to a model's own writing manner")]
pub struct Cli {
    /// INI config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory of prompt assets overriding the built-in wording.
    #[arg(long, global = true, value_name = "DIR")]
    prompts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify records and write one file per format class plus a counts table.
    Partition(PartitionArgs),
    /// Rewrite and review every soft-format answer.
    Align(AlignArgs),
    /// Failure statistics from an alignment checkpoint.
    Stats(StatsArgs),
    /// Perplexity of the evaluation split's answers under a backend.
    Ppl(PplArgs),
    /// Blind writing-manner assessment sessions.
    #[command(subcommand)]
    Assess(AssessCommand),
    /// Merge aligned soft-format records back into the full trainset.
    ExportTrainset(ExportArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Dataset files (JSON arrays of records), read in order.
    #[arg(long = "input", required = true, num_args = 1.., value_name = "FILE")]
    inputs: Vec<PathBuf>,
    /// Source tag for records of FILE lacking a `source` field (default: file stem).
    #[arg(long = "source-tag", value_name = "FILE=TAG")]
    source_tags: Vec<String>,
    /// Source tag to format class map (default: LLaVA-1.5 mixture).
    #[arg(long, value_name = "FILE")]
    tag_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LayoutArgs {
    /// Two-space indented output (default).
    #[arg(long, conflicts_with = "compact")]
    pretty: bool,
    /// Single-line output.
    #[arg(long)]
    compact: bool,
}

impl LayoutArgs {
    fn pretty(&self) -> bool {
        !self.compact
    }
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    /// Sampling defaults: vicuna or qwen.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    top_k: Option<u32>,
    #[arg(long)]
    max_length: Option<usize>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[command(flatten)]
    input: InputArgs,
    /// reference | reference:<model-file> | remote:<model>@<url>
    #[arg(long)]
    backend: Option<BackendDescriptor>,
    /// no1 | no2 | no3 | plain | noalign
    #[arg(long)]
    variant: Option<RewriteVariant>,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Resumable outcome log.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Stop after this many newly processed rounds (needs --checkpoint).
    #[arg(long, requires = "checkpoint")]
    max_rounds: Option<usize>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Report file (default: <out>.report.json).
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// JSON report destination; the text table always goes to stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PplArgs {
    #[arg(long = "input", required = true, num_args = 1.., value_name = "FILE")]
    inputs: Vec<PathBuf>,
    #[arg(long = "source-tag", value_name = "FILE=TAG")]
    source_tags: Vec<String>,
    #[arg(long)]
    backend: Option<BackendDescriptor>,
    /// Trailing records scored (default 3000).
    #[arg(long)]
    eval_count: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AssessCommand {
    /// Sample anchors and evaluation answers into a new session file.
    Build(BuildArgs),
    /// Serve session files over the HTTP JSON API.
    Serve(ServeArgs),
    /// Aggregate a finished session into the vote table.
    Export(AssessExportArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Checkpoint of the alignment run; only accepted rewrites are sampled.
    #[arg(long, value_name = "FILE")]
    outcomes: PathBuf,
    /// JSON array of {"id","text"} written by the inner model.
    #[arg(long, value_name = "FILE")]
    llm_pool: PathBuf,
    /// JSON array of {"id","text"} from the original dataset.
    #[arg(long, value_name = "FILE")]
    dataset_pool: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    anchors: usize,
    #[arg(long, default_value_t = 100)]
    eval_samples: usize,
    #[arg(long, default_value = "")]
    model_label: String,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long = "session", required = true, num_args = 1.., value_name = "FILE")]
    sessions: Vec<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Debug, Args)]
struct AssessExportArgs {
    #[arg(long, value_name = "FILE")]
    session: PathBuf,
    /// Aggregate even if ballots are missing.
    #[arg(long)]
    partial: bool,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Aligned records (any subset of the soft-format records, matched by id).
    #[arg(long = "aligned", required = true, num_args = 1.., value_name = "FILE")]
    aligned: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    layout: LayoutArgs,
}

/// Help of the deepest subcommand named in `argv`.
fn help_for(argv: &[OsString]) -> String {
    let mut cmd = Cli::command();
    for arg in argv.iter().skip(1).filter_map(|a| a.to_str()) {
        match cmd.find_subcommand(arg) {
            Some(sub) => cmd = sub.clone(),
            None if arg.starts_with('-') => continue,
            None => break,
        }
    }
    cmd.render_help().to_string()
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{e}");
            eprintln!("{}", help_for(&argv));
            return 1;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(failure) => {
            match &failure {
                Failure::Usage(msg) => {
                    eprintln!("error: {msg}\n");
                    eprintln!("{}", help_for(&argv));
                }
                Failure::Data(e) => eprintln!("data error: {e:#}"),
                Failure::Backend(e) => eprintln!("backend error: {e:#}"),
            }
            failure.exit_code()
        }
    }
}
