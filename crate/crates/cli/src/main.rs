//! `modelab`: data generation, training, evaluation and inspection.

mod commands;
mod config;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "modelab", version, about = "Detail-context recurrent video prediction toolkit")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set model.hidden_channels=16`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread; outputs are byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a sequence store.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes checkpoints, a JSONL log and the resolved config.
    Train {
        /// Run directory (defaults to `paths.out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training store (defaults to `paths.train_store`, else generated).
        #[arg(long)]
        store: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train the plain ConvLSTM baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
        /// Also write `report.json` and `report.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export observed | ground truth | predicted strips.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Export attention maps of one layer and step as heatmaps.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Block index within the layer (defaults to the last).
        #[arg(long)]
        block: Option<usize>,
    },
    /// Print the parameter breakdown.
    CountParams {
        /// Tabulate totals over block counts and attention widths.
        #[arg(long)]
        sweep: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        std::env::set_var("MODELAB_THREADS", "1");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).unwrap_or_default();
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> modelab_core::Result<()> {
    let cfg = config::RunConfig::resolve(cli.config.as_deref(), &cli.sets, cli.seed, cli.deterministic)?;
    match cli.command {
        Command::GenData { out, count } => commands::gen_data(&cfg, &out, count),
        Command::Train { out, store, resume, baseline } => {
            commands::train(cfg, out.as_deref(), store.as_deref(), resume.as_deref(), baseline)
        }
        Command::Eval { checkpoint, store, format, out } => {
            commands::eval(&cfg, &checkpoint, store.as_deref(), format, out.as_deref())
        }
        Command::Predict { checkpoint, store, out, limit } => commands::predict(&checkpoint, &store, &out, limit),
        Command::DumpAttention { checkpoint, store, layer, step, out, sequence, block } => {
            commands::dump_attention(&checkpoint, &store, layer, step, &out, sequence, block)
        }
        Command::CountParams { sweep } => commands::count_params(&cfg, sweep),
    }
}
