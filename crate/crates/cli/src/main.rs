use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "mmdshift", version, about = "MMD training under covariate and missingness shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train/test CSVs and golden predictions.
    Synth(Common),
    /// Train one method on one seed into a run directory.
    Train(Common),
    /// Train every configured method on every seed and write the report.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Kernel mean matching weights for the training rows.
    Kmm(Common),
    /// Train a masking method and export its hard training mask.
    ExportMasks(Common),
    /// Train a method and export last-hidden-layer embeddings.
    ExportEmbeddings(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// A number, `auto` or `grid`.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Output root.
    #[arg(long, env = "MMDSHIFT_OUT")]
    pub out: Option<PathBuf>,
    /// Override any config key, e.g. `training.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => commands::synth(c),
        Command::Train(c) => commands::train(c),
        Command::Compare { common, threads } => commands::compare(common, *threads),
        Command::Kmm(c) => commands::kmm(c),
        Command::ExportMasks(c) => commands::export_masks(c),
        Command::ExportEmbeddings(c) => commands::export_embeddings(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
