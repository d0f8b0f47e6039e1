//! `kvsim`: run eviction benchmarks, compute cache footprints, inspect
//! positional diagnostics and generate synthetic traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvsim_core::cache::mib_to_bytes;
use kvsim_core::harness::{
    emit_report, generate_synthetic, load_traces, run_conversation, trace, Checkpoints, ConversationTrace, RunConfig,
    RunReport, TraceFormat, TraceShape,
};
use kvsim_core::{diagnose, footprint, EvictionPolicy, ModelConfig, Preset, StrategyKind};

const DEFAULT_KEEP_RATIO: f64 = 0.99;
const DEFAULT_GIST_TOKENS: usize = 2000;
const DEFAULT_RECENT_TOKENS: usize = 0;
const DEFAULT_WINDOW_TOKENS: usize = 4096;
const DEFAULT_SYNTHETIC_TURNS: usize = 10;

#[derive(Debug, Parser)]
#[command(
    name = "kvsim",
    version,
    about = "KV-cache eviction simulator for multi-turn conversations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one strategy over every conversation in a trace and write reports.
    Run(RunArgs),
    /// Print the KV-cache footprint of a model geometry.
    Footprint(FootprintArgs),
    /// Write a synthetic token-count trace.
    TraceGen(TraceGenArgs),
    /// Print positional diagnostics for a list of original positions.
    Diag(DiagArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckpointArg {
    /// Before each prefill only.
    Pre,
    /// After each generated token only.
    PerToken,
    Both,
}

impl From<CheckpointArg> for Checkpoints {
    fn from(c: CheckpointArg) -> Self {
        Checkpoints {
            before_prefill: c != CheckpointArg::PerToken,
            per_generated_token: c != CheckpointArg::Pre,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Eviction strategy: baseline, evict-oldest, sliding-window-gist or attention-top.
    #[arg(long, default_value = "baseline")]
    strategy: StrategyKind,
    /// Eviction trigger in MiB; strategies evict once the cache is strictly larger.
    #[arg(long, default_value_t = 600.0)]
    threshold_mb: f64,
    /// Fraction of slots kept by attention-top [default: 0.99].
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Leading slots kept by sliding-window-gist [default: 2000].
    #[arg(long)]
    gist_tokens: Option<usize>,
    /// Trailing slots kept by sliding-window-gist [default: 0].
    #[arg(long)]
    recent_tokens: Option<usize>,
    /// Trailing slots kept by evict-oldest [default: 4096].
    #[arg(long)]
    window_tokens: Option<usize>,
    /// Geometry used for byte accounting: llama3-8b, llama2-7b or toy.
    #[arg(long, default_value = "llama3-8b")]
    preset: Preset,
    /// Trace file [default: built-in 10-turn paper-like synthetic trace].
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Trace file format: sharegpt or synthetic.
    #[arg(long, default_value = "synthetic")]
    format: TraceFormat,
    /// Seed for model weights and synthetic token draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `<strategy>.csv` and `<strategy>_summary.json`.
    #[arg(long, env = "KVSIM_OUT", default_value = "results")]
    out: PathBuf,
    /// Where the eviction trigger is checked.
    #[arg(long, value_enum, default_value_t = CheckpointArg::Both)]
    checkpoints: CheckpointArg,
    /// Keep generating through the end-of-sequence token [default: false].
    #[arg(long)]
    ignore_eos: bool,
}

#[derive(Debug, Args)]
struct FootprintArgs {
    /// Named geometry [default: llama3-8b unless all geometry flags are given].
    #[arg(long, conflicts_with_all = ["layers", "kv_heads", "head_dim", "bytes_per_el"])]
    preset: Option<Preset>,
    /// Transformer layers [default: none].
    #[arg(long, requires_all = ["kv_heads", "head_dim", "bytes_per_el"])]
    layers: Option<i64>,
    /// Key/value heads [default: none].
    #[arg(long, requires = "layers")]
    kv_heads: Option<i64>,
    /// Per-head key dimension [default: none].
    #[arg(long, requires = "layers")]
    head_dim: Option<i64>,
    /// Bytes per stored element [default: none].
    #[arg(long, requires = "layers")]
    bytes_per_el: Option<i64>,
    /// Cached tokens (required).
    #[arg(long, allow_negative_numbers = true)]
    tokens: i64,
}

#[derive(Debug, Args)]
struct TraceGenArgs {
    /// Number of turns.
    #[arg(long, default_value_t = DEFAULT_SYNTHETIC_TURNS as i64, allow_negative_numbers = true)]
    turns: i64,
    /// Turn-size profile: paper-like or uniform.
    #[arg(long, default_value = "paper-like")]
    shape: TraceShape,
    /// Seed for the count jitter.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagArgs {
    /// Comma-separated original positions, in slot order (required).
    #[arg(long, value_delimiter = ',', required = true)]
    positions: Vec<usize>,
    /// Architectural context window.
    #[arg(long, default_value_t = 8192)]
    max_position: usize,
}

/// Flag validation failures exit 2, everything else exits 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn build_policy(args: &RunArgs) -> Result<EvictionPolicy, Failure> {
    let reject = |set: bool, flag: &str, owner: &str| {
        if set {
            Err(usage(format!("{flag} is only valid with --strategy {owner}")))
        } else {
            Ok(())
        }
    };
    let is = |k: StrategyKind| args.strategy == k;
    if !is(StrategyKind::AttentionTop) {
        reject(args.keep_ratio.is_some(), "--keep-ratio", "attention-top")?;
    }
    if !is(StrategyKind::SlidingWindowGist) {
        reject(args.gist_tokens.is_some(), "--gist-tokens", "sliding-window-gist")?;
        reject(args.recent_tokens.is_some(), "--recent-tokens", "sliding-window-gist")?;
    }
    if !is(StrategyKind::EvictOldest) {
        reject(args.window_tokens.is_some(), "--window-tokens", "evict-oldest")?;
    }

    let (policy, flag) = match args.strategy {
        StrategyKind::Baseline => (EvictionPolicy::NoEviction, "--strategy"),
        StrategyKind::EvictOldest => (
            EvictionPolicy::EvictOldest {
                window_tokens: args.window_tokens.unwrap_or(DEFAULT_WINDOW_TOKENS),
            },
            "--window-tokens",
        ),
        StrategyKind::SlidingWindowGist => (
            EvictionPolicy::SlidingWindowGist {
                gist_token_count: args.gist_tokens.unwrap_or(DEFAULT_GIST_TOKENS),
                recent_token_count: args.recent_tokens.unwrap_or(DEFAULT_RECENT_TOKENS),
            },
            "--gist-tokens/--recent-tokens",
        ),
        StrategyKind::AttentionTop => (
            EvictionPolicy::AttentionTop {
                keep_ratio: args.keep_ratio.unwrap_or(DEFAULT_KEEP_RATIO),
            },
            "--keep-ratio",
        ),
    };
    policy.validate().map_err(|e| usage(format!("{flag}: {e}")))?;
    Ok(policy)
}

fn load_conversations(args: &RunArgs, vocab_size: usize) -> anyhow::Result<Vec<ConversationTrace>> {
    match &args.trace {
        Some(path) => Ok(load_traces(path, args.format, vocab_size, args.seed)?),
        None => {
            let spec = generate_synthetic(DEFAULT_SYNTHETIC_TURNS, TraceShape::PaperLike, args.seed)?;
            let text = serde_json::to_string(&spec)?;
            Ok(trace::parse_synthetic(
                &text,
                Path::new("<built-in>"),
                vocab_size,
                args.seed,
            )?)
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let policy = build_policy(args)?;
    if !(args.threshold_mb.is_finite() && args.threshold_mb >= 0.0) {
        return Err(usage(format!(
            "--threshold-mb must be a non-negative number, got {}",
            args.threshold_mb
        )));
    }
    let mut config = RunConfig::for_preset(args.preset, policy, mib_to_bytes(args.threshold_mb), args.seed);
    config.checkpoints = args.checkpoints.into();
    config.ignore_eos = args.ignore_eos;
    config.validate().map_err(|e| usage(format!("--threshold-mb: {e}")))?;

    let conversations = load_conversations(args, config.model.vocab_size)?;
    let mut reports = Vec::with_capacity(conversations.len());
    for conv in &conversations {
        let metrics = run_conversation(&config, conv).with_context(|| format!("conversation `{}`", conv.id))?;
        if let Some(last) = metrics.last() {
            println!(
                "{}: {} turns, final cache {:.3} MiB, {} tokens evicted",
                conv.id,
                metrics.len(),
                kvsim_core::cache::bytes_to_mib(last.cache_bytes_end_generation),
                metrics.iter().map(|m| m.tokens_evicted()).sum::<usize>()
            );
        }
        reports.push(RunReport {
            run_id: conv.id.clone(),
            policy,
            metrics,
        });
    }
    let files = emit_report(&args.out, policy.name(), &reports)?;
    println!("wrote {} and {}", files.csv.display(), files.summary.display());
    Ok(())
}

fn positive(value: i64, flag: &str) -> Result<usize, Failure> {
    usize::try_from(value)
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| usage(format!("{flag} must be a positive integer, got {value}")))
}

fn cmd_footprint(args: &FootprintArgs) -> Result<(), Failure> {
    let tokens = positive(args.tokens, "--tokens")?;
    let config = match (args.layers, args.kv_heads, args.head_dim, args.bytes_per_el) {
        (Some(layers), Some(kv_heads), Some(head_dim), Some(bytes)) => {
            let kv_heads = positive(kv_heads, "--kv-heads")?;
            let head_dim = positive(head_dim, "--head-dim")?;
            ModelConfig {
                num_layers: positive(layers, "--layers")?,
                num_attention_heads: kv_heads,
                num_kv_heads: kv_heads,
                head_dim_k: head_dim,
                head_dim_v: head_dim,
                bytes_per_element: positive(bytes, "--bytes-per-el")?,
                ..Preset::Toy.config()
            }
        }
        _ => args.preset.unwrap_or(Preset::Llama3_8b).config(),
    };
    let report = footprint(&config, tokens);
    println!("elements: {}", report.elements);
    println!("bytes: {}", report.bytes);
    println!("MiB: {:?}", report.megabytes);
    Ok(())
}

fn cmd_trace_gen(args: &TraceGenArgs) -> Result<(), Failure> {
    let turns = positive(args.turns, "--turns")?;
    let spec = generate_synthetic(turns, args.shape, args.seed)?;
    let text = serde_json::to_string_pretty(&spec)? + "\n";
    match &args.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_diag(args: &DiagArgs) -> Result<(), Failure> {
    let report = diagnose(&args.positions, args.max_position);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Footprint(args) => cmd_footprint(args),
        Command::TraceGen(args) => cmd_trace_gen(args),
        Command::Diag(args) => cmd_diag(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
