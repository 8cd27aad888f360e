mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Relation-aware pretraining for conversation trees.
///
/// Settings come from the config file, then `PEP_*` environment variables,
/// then flags; later sources win.
#[derive(Parser, Debug)]
#[command(name = "pep", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration
    #[arg(long, global = true, env = "PEP_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice of the run
    #[arg(long, global = true, env = "PEP_SEED")]
    pub seed: Option<u64>,

    /// Worker threads (0 = one per core); 1 gives bitwise reproducible runs
    #[arg(long, global = true, env = "PEP_THREADS")]
    pub threads: Option<usize>,

    /// Directory for artifacts, logs and manifests
    #[arg(long, global = true, env = "PEP_OUT_DIR", value_name = "DIR", default_value = "pep-out")]
    pub out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Normalize a corpus of raw posts, one per line
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to <out-dir>/normalized.txt
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a subword vocabulary on a corpus of raw posts
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Target vocabulary size, overriding the config
        #[arg(long)]
        size: Option<usize>,
    },
    /// Export root/branch/parent labels of every conversation
    DeriveLabels {
        #[arg(long)]
        conversations: Option<PathBuf>,
    },
    /// Run one pretraining stage
    Pretrain {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Raw posts for stage 1
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Conversation trees for stage 2
        #[arg(long)]
        conversations: Option<PathBuf>,
        /// Starting checkpoint for stage 2; defaults to the stage-1 output
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from this stage's checkpoint in the output directory
        #[arg(long)]
        resume: bool,
        /// Halt after this step, leaving a checkpoint that `--resume` continues
        #[arg(long, value_name = "STEP")]
        stop_after: Option<usize>,
    },
    /// Train and score a linear probe on frozen claim embeddings
    Evaluate(EvalArgs),
    /// Probe accuracy over a grid of labeled-sample counts
    Fewshot(EvalArgs),
    /// Post-length and tree-shape statistics
    Stats {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        conversations: Option<PathBuf>,
    },
    /// Check every record of a conversation file
    Validate {
        #[arg(long)]
        conversations: PathBuf,
    },
    /// Write a synthetic conversation dataset
    Generate {
        #[arg(long, value_enum)]
        kind: SyntheticKind,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Defaults to <out-dir>/<kind>.jsonl
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recompute input digests recorded in a manifest
    Verify {
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Labeled conversation trees
    #[arg(long)]
    pub conversations: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Encoder checkpoint; defaults to the stage-2 output
    #[arg(long, conflicts_with = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Use a freshly initialized encoder as a baseline
    #[arg(long)]
    pub random_init: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SyntheticKind {
    /// Unlabeled trees whose replies quote their parent
    Structured,
    /// Labeled claims with thread-level stance
    Stance,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
