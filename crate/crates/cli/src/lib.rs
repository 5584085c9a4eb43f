//! `rescore` command-line driver: each subcommand runs one pipeline stage
//! on files and writes its outputs atomically, with the config and seed
//! that produced them embedded (checkpoints, reports) or in a
//! `<file>.meta.json` sidecar (JSONL and text outputs).
//!
//! Exit statuses: 0 success, 2 usage, 3 config, 4 io, 5 data, 6 model.
//! Failures print one line to stderr:
//! `error kind=<kind> code=<status> msg="<reason>"`.

pub mod bench;
mod commands;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use error::{CliError, Kind};

pub const TOOL: &str = "rescore";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "rescore", version, about = "Second-pass n-best rescoring toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic n-best corpus and text corpora.
    GenData(GenDataArgs),
    /// Add word-error counts to an n-best corpus.
    Annotate(AnnotateArgs),
    /// Domain-adapt a (new or existing) model with the MLM objective.
    TrainMlm(TrainMlmArgs),
    /// Precompute PLLs of text and n-best hypotheses.
    Pll(PllArgs),
    /// Train the CLS score to match PLLs.
    TrainMd(TrainMdArgs),
    /// Discriminative training on an n-best corpus.
    TrainDisc(TrainDiscArgs),
    /// Distill a smaller student from a teacher's PLLs.
    Distill(DistillArgs),
    /// Linear search of the interpolation weight on a dev corpus.
    SearchBeta(SearchBetaArgs),
    /// Rerank a corpus and report WER/CER.
    Evaluate(EvaluateArgs),
    /// Time second-pass scoring per batch.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    /// Generator config (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    dev: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    text_sentences: Option<usize>,
    /// Directory receiving train/dev/test.jsonl, text.txt, md_text.txt and vocab.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct AnnotateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Training settings: an optional JSON config, overridden by flags.
/// Unset values take the toy recipe's defaults for the stage.
#[derive(Debug, Clone, Args, Serialize)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct TrainMlmArgs {
    /// Sentence files, one whitespace-tokenized sentence per line.
    #[arg(long, required = true)]
    text: Vec<PathBuf>,
    /// N-best corpora whose references are added to the text.
    #[arg(long)]
    references: Vec<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long, conflicts_with_all = ["vocab", "model_config", "size", "max_len"])]
    init: Option<PathBuf>,
    /// Word list of a fresh model, one per line.
    #[arg(long, required_unless_present = "init")]
    vocab: Option<PathBuf>,
    /// Architecture of a fresh model (JSON ModelConfig).
    #[arg(long, conflicts_with = "size")]
    model_config: Option<PathBuf>,
    /// Built-in architecture of a fresh model: toy or teacher.
    #[arg(long)]
    size: Option<String>,
    /// Override the fresh model's maximum framed length.
    #[arg(long)]
    max_len: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PllArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    text: Vec<PathBuf>,
    #[arg(long)]
    nbest: Vec<PathBuf>,
    /// Existing table whose entries are reused.
    #[arg(long)]
    reuse: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    max_seq_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainMdArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    pll: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainDiscArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    /// PLL table; required by md-mwer and md-mwed.
    #[arg(long)]
    pll: Option<PathBuf>,
    /// mwer-only, mwed-only, md-mwer or md-mwed.
    #[arg(long)]
    objective: String,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Student architecture (JSON ModelConfig).
    #[arg(long, conflicts_with = "student_size")]
    student_config: Option<PathBuf>,
    /// Built-in student architecture: toy or teacher.
    #[arg(long, default_value = "toy")]
    student_size: String,
    #[arg(long)]
    text: PathBuf,
    #[arg(long)]
    nbest: PathBuf,
    /// Teacher PLLs computed earlier; missing entries are added.
    #[arg(long)]
    pll: Option<PathBuf>,
    /// md-mwer or md-mwed.
    #[arg(long, default_value = "md-mwer")]
    objective: String,
    #[arg(long)]
    md_config: Option<PathBuf>,
    #[arg(long)]
    disc_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    md_steps: Option<usize>,
    #[arg(long)]
    disc_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the teacher PLL table here.
    #[arg(long)]
    pll_out: Option<PathBuf>,
}

/// Where second-pass scores come from.
#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
struct ScorerArgs {
    /// CLS scores of a checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Precomputed PLL table.
    #[arg(long)]
    pll: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SearchBetaArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    grid_max: f64,
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[group(id = "weight", required = true, multiple = false, args = ["beta", "beta_from"])]
struct EvaluateArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    beta: Option<f64>,
    /// Take β from a search-beta output.
    #[arg(long)]
    beta_from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    /// `label=checkpoint`, repeatable.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    #[arg(long, default_value_t = 5)]
    batch_size: usize,
    /// Word tokens per hypothesis, repeatable.
    #[arg(long = "seq-len", default_values_t = [16, 32])]
    seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    threads: usize,
    #[arg(long, default_value_t = bench::MIN_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = bench::MIN_ITERATIONS)]
    iterations: usize,
    /// Label of the model relative latencies are measured against.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns
/// the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            // clap's message without the usage and help footer, on one line
            let text = e.to_string();
            let reason: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let reason = reason.join(" ");
            return fail(&CliError::usage(reason.strip_prefix("error: ").unwrap_or(&reason)));
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> i32 {
    eprintln!("{}", e.line());
    e.kind.exit_code()
}
