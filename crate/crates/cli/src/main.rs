use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use esmem_core::SessionFormat;

mod commands;
mod config;

use config::{AppConfig, Overrides, ProviderKind};

#[derive(Parser, Debug)]
#[command(name = "esmem", version, about = "Event-segmented conversational memory")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Cap on worker threads and concurrent provider requests.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, value_name = "LEVEL")]
    log_level: Option<String>,

    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(flatten)]
    knobs: Knobs,

    #[command(subcommand)]
    command: Command,
}

/// Hyperparameter overrides; these win over the environment and config file.
#[derive(Args, Debug, Default)]
struct Knobs {
    /// MI quantile for candidate boundaries.
    #[arg(long = "quantile", visible_alias = "q", global = true, value_name = "Q")]
    quantile: Option<f64>,
    /// Boundary probability threshold.
    #[arg(long, global = true, value_name = "P")]
    tau_c: Option<f64>,
    /// Turns on each side of a candidate shown to the intent judge.
    #[arg(long, global = true, value_name = "L")]
    context_window: Option<usize>,
    /// Turns on each side of a transition used for boundary generation.
    #[arg(long, global = true, value_name = "L")]
    boundary_context: Option<usize>,
    #[arg(long, global = true, value_name = "K")]
    anchor_k: Option<usize>,
    #[arg(long, global = true, value_name = "W")]
    window_w: Option<usize>,
    /// Weight of summary similarity in the fused score.
    #[arg(long, global = true, value_name = "A")]
    alpha: Option<f64>,
    /// Events kept after reranking.
    #[arg(long, global = true, value_name = "K")]
    final_k: Option<usize>,
    /// Provider backend (mock or http).
    #[arg(long, global = true, value_name = "KIND")]
    provider: Option<ProviderKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment every session of a corpus and write the boundaries.
    Segment {
        corpus: PathBuf,
        #[arg(long)]
        format: Option<SessionFormat>,
        /// Output file (stdout when absent).
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Directory receiving one diagnostic trace per session.
        #[arg(long, value_name = "DIR")]
        emit_trace: Option<PathBuf>,
    },
    /// Build a memory repository from one conversation.
    Build {
        corpus: PathBuf,
        #[arg(long)]
        format: Option<SessionFormat>,
        /// Repository directory to write.
        #[arg(long, short)]
        out: PathBuf,
        /// Reuse a `segment` output instead of segmenting again.
        #[arg(long, value_name = "FILE")]
        segments: Option<PathBuf>,
        /// Only use sessions whose `conversation_id` metadata matches.
        #[arg(long)]
        conversation: Option<String>,
    },
    /// Retrieve the events relevant to a query.
    Query { repo: PathBuf, query: String },
    /// Retrieve and generate an answer.
    Answer { repo: PathBuf, query: String },
    /// Score segmentation against the reference labels of a corpus.
    EvalSeg {
        corpus: PathBuf,
        #[arg(long)]
        format: Option<SessionFormat>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Answer a QA set from a repository and score the answers.
    EvalQa {
        repo: PathBuf,
        qa: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        /// Also grade answers with an LLM judge.
        #[arg(long)]
        judge: bool,
    },
    /// Rerun QA for K in {1, 5, 10, 15, 20}.
    SweepK {
        repo: PathBuf,
        qa: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
}

impl Knobs {
    fn overrides(&self, log_level: Option<String>) -> Overrides {
        Overrides {
            quantile: self.quantile,
            tau_c: self.tau_c,
            context_window: self.context_window,
            boundary_context: self.boundary_context,
            anchor_k: self.anchor_k,
            window_w: self.window_w,
            alpha: self.alpha,
            final_k: self.final_k,
            provider: self.provider,
            log_level,
        }
    }
}

fn init_logging(level: &str) {
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

#[cfg(feature = "parallel")]
fn init_pool(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_pool(_jobs: Option<usize>) -> anyhow::Result<()> {
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.jobs == Some(0) {
        anyhow::bail!("--jobs must be >= 1");
    }
    let flags = cli.knobs.overrides(cli.log_level.clone());
    let env = |k: &str| std::env::var(k).ok();
    let cfg = AppConfig::resolve(cli.config.as_deref(), &env, &flags)?;
    init_logging(&cfg.log_level);
    init_pool(cli.jobs)?;
    let ctx = commands::Context::new(cfg, cli.jobs, cli.json)?;
    match cli.command {
        Command::Segment {
            corpus,
            format,
            out,
            emit_trace,
        } => ctx.segment(&corpus, format, out.as_deref(), emit_trace.as_deref()),
        Command::Build {
            corpus,
            format,
            out,
            segments,
            conversation,
        } => ctx.build(&corpus, format, &out, segments.as_deref(), conversation.as_deref()),
        Command::Query { repo, query } => ctx.query(&repo, &query),
        Command::Answer { repo, query } => ctx.answer(&repo, &query),
        Command::EvalSeg {
            corpus,
            format,
            out,
            csv,
        } => ctx.eval_seg(&corpus, format, out.as_deref(), csv.as_deref()),
        Command::EvalQa {
            repo,
            qa,
            out,
            csv,
            judge,
        } => ctx.eval_qa(&repo, &qa, out.as_deref(), csv.as_deref(), judge),
        Command::SweepK { repo, qa, out, csv } => ctx.sweep_k(&repo, &qa, out.as_deref(), csv.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
