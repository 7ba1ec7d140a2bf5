use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use ctxspeech_core::bench::TrackingAllocator;
use ctxspeech_core::context::LanguageMode;
use ctxspeech_core::AttentionVariant;

mod commands;

const DEFAULT_SEED: u64 = 42;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Debug, Parser)]
#[command(name = "ctxspeech", version, about = "Paragraph-level speech model forward pass, featurizer and attention benchmarks")]
struct Cli {
    /// Seed for every random draw [default: 42, or the model config's seed for `forward`].
    #[arg(long, global = true, env = "CTXSPEECH_SEED")]
    seed: Option<u64>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a paragraph and print its per-token statistical features as JSON.
    Featurize(FeaturizeArgs),
    /// Run the full model on a paragraph and write mel frames plus a JSON summary.
    Forward(ForwardArgs),
    /// Time the attention variants over a range of sequence lengths.
    Bench(BenchArgs),
    /// Compare linearized attention with the pairwise reference on random instances.
    Equivcheck(EquivArgs),
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    /// Paragraph text file (`-` for stdin).
    text: PathBuf,
    /// JSON file with corpus maxima; defaults to the input's own counts.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "chinese")]
    language: LanguageMode,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    /// Paragraph text file (`-` for stdin).
    text: PathBuf,
    /// JSON model configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `mel.ctxt` and `summary.json`.
    #[arg(long, default_value = "forward_out")]
    out: PathBuf,
    /// Named-tensor container of precomputed token/sentence embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Override the configured attention variant.
    #[arg(long)]
    variant: Option<AttentionVariant>,
    /// Disable segment memory.
    #[arg(long)]
    no_memory: bool,
    /// Disable the contextual text encoder.
    #[arg(long)]
    no_context: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096, 8192])]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = AttentionVariant::ALL)]
    variants: Vec<AttentionVariant>,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Evaluate heads in parallel on this many threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Record points whose estimated peak exceeds this many MiB as out of memory.
    #[arg(long)]
    memory_cap_mb: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 32)]
    max_dim: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Featurize(a) => commands::featurize(a),
        Command::Forward(a) => commands::forward(a, cli.seed),
        Command::Bench(a) => commands::bench(a, cli.seed.unwrap_or(DEFAULT_SEED)),
        Command::Equivcheck(a) => commands::equivcheck(a, cli.seed.unwrap_or(DEFAULT_SEED)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
