//! `sinklab` — experiment runner over the sinklab library. Every command
//! writes CSV artifacts plus a provenance record into one output
//! directory; reruns with the same config and seeds reproduce the CSV
//! bytes exactly.

use anyhow::Result;
use clap::{Parser, Subcommand};
use sinklab::experiments::{run, Command as ExpCommand, ExperimentSpec};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sinklab",
    version,
    about = "Desk-scale laboratory for attention-sink experiments",
    arg_required_else_help = true
)]
struct Cli {
    /// Output root. Defaults to $SINKLAB_OUT, then ./runs; each command
    /// writes into <root>/<command>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed overrides; omit to use the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train one arm per context length with equal token budgets.
    AblateContext {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 64, 256])]
        contexts: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train the five packing/masking regimes from one base config.
    AblatePacking {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Sink metrics for a checkpoint over a JSONL prompt set.
    Sinks {
        #[arg(long)]
        config: PathBuf,
    },
    /// Hidden-state distances between a prompt and a one-byte edit of it.
    Perturb {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify the over-squashing bound on random compliant models and
    /// print the worst jacobian/bound ratio.
    BoundCheck {
        #[arg(long, default_value_t = 100)]
        models: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Collapse metrics on progressively longer addition prompts, with
    /// and without BOS.
    CollapseScan {
        #[arg(long)]
        config: PathBuf,
    },
    /// Final-layer norm histograms and per-head value norms.
    Norms {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sink/collapse metrics over a dumped trace directory.
    TraceMetrics {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        epsilon: f64,
        #[arg(long, default_value_t = 64)]
        window: usize,
    },
    /// Write a seeded JSONL corpus for training or prompting.
    GenCorpus {
        #[arg(long)]
        file: PathBuf,
        /// Generator: synthetic (templated prose), lexicon (topic
        /// pseudo-words), echo (repeated random segments), or echo-mix
        /// (echo documents alternating with non-repeating decoys).
        #[arg(long, default_value = "synthetic")]
        generator: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        /// Lower size bound: sentences (synthetic), words (lexicon), or
        /// segment bytes (echo).
        #[arg(long, default_value_t = 3)]
        min_size: usize,
        /// Upper size bound, same unit as --min-size.
        #[arg(long, default_value_t = 8)]
        max_size: usize,
    },
}

fn out_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("SINKLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let root = out_root(cli.out);

    let (command, config, seeds) = match cli.command {
        Cmd::Train { config, seeds } => (ExpCommand::Train, Some(config), seeds),
        Cmd::AblateContext {
            config,
            contexts,
            seeds,
        } => (ExpCommand::AblateContext { contexts }, Some(config), seeds),
        Cmd::AblatePacking { config, seeds } => (ExpCommand::AblatePacking, Some(config), seeds),
        Cmd::Sinks { config } => (ExpCommand::Sinks, Some(config), vec![]),
        Cmd::Perturb { config } => (ExpCommand::Perturb, Some(config), vec![]),
        Cmd::BoundCheck { models, seed } => (ExpCommand::BoundCheck { models, seed }, None, vec![]),
        Cmd::CollapseScan { config } => (ExpCommand::CollapseScan, Some(config), vec![]),
        Cmd::Norms { config } => (ExpCommand::Norms, Some(config), vec![]),
        Cmd::TraceMetrics {
            trace,
            epsilon,
            window,
        } => (
            ExpCommand::TraceMetrics {
                trace,
                epsilon,
                window,
            },
            None,
            vec![],
        ),
        Cmd::GenCorpus {
            file,
            generator,
            seed,
            docs,
            min_size,
            max_size,
        } => {
            let corpus = match generator.as_str() {
                "synthetic" => sinklab::data::synthetic_corpus(seed, docs, min_size, max_size),
                "lexicon" => sinklab::data::lexicon_corpus(seed, docs, min_size, max_size),
                "echo" => sinklab::data::echo_corpus(seed, docs, min_size, max_size),
                "echo-mix" => sinklab::data::echo_mix_corpus(seed, docs, min_size, max_size),
                other => anyhow::bail!(
                    "unknown generator {other:?} (expected synthetic, lexicon, echo, or echo-mix)"
                ),
            };
            let mut out = String::new();
            for doc in &corpus {
                out.push_str(&serde_json::json!({ "text": doc }).to_string());
                out.push('\n');
            }
            if let Some(parent) = file.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&file, out)?;
            println!("wrote {} documents to {}", corpus.len(), file.display());
            return Ok(());
        }
    };

    let spec = ExperimentSpec {
        out_dir: root.join(command.name()),
        command,
        config,
        seeds,
    };
    let outcome = run(&spec)?;
    if let Some(line) = outcome.headline {
        println!("{line}");
    }
    println!("artifacts: {}", outcome.out_dir.display());
    Ok(())
}
