//! `adalink`: generate tasks, tune adapters on a frozen backbone, and report
//! parameter and compute costs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "adalink",
    version,
    about = "Adapter experiments on a toy encoder-decoder"
)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted; see `adalink example-config`.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured tasks as JSON lines, with oracle baselines.
    GenTasks,
    /// Tune the configured adapter and evaluate it.
    Train,
    /// Evaluate an adapter (or none) on the configured tasks' validation splits.
    Eval {
        /// Registry directory or single adapter checkpoint.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Backbone checkpoint, e.g. a fully fine-tuned one.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Only this task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Trainable parameter counts per adapter kind.
    Params,
    /// Added multiply-accumulates per forward pass across encoder depths.
    Flops {
        /// Encoder input length; defaults to patches plus text.
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        layers: Vec<usize>,
    },
    /// AdaLink at several ranks.
    AblateRank {
        /// Defaults to `ranks` from the config.
        #[arg(long, value_delimiter = ',')]
        ranks: Option<Vec<usize>>,
    },
    /// Per-modality AdaLink at rank r against unified AdaLink at 2r.
    AblateModality,
    /// Fold text AdaLink modules in a registry into baked token tables.
    Bake {
        #[arg(long)]
        registry: PathBuf,
        /// Only this task; otherwise every bakeable entry.
        #[arg(long)]
        task: Option<String>,
    },
    /// Inspect or edit an adapter registry directory.
    Registry {
        #[command(subcommand)]
        op: RegistryOp,
    },
    /// Print a commented config with every default spelled out.
    ExampleConfig,
}

#[derive(Subcommand, Debug)]
enum RegistryOp {
    Ls {
        dir: PathBuf,
    },
    /// Add adapter checkpoints, or every entry of another registry directory.
    Add {
        dir: PathBuf,
        #[arg(required = true)]
        sources: Vec<PathBuf>,
    },
    Rm {
        dir: PathBuf,
        task: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
