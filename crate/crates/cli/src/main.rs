use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod run;

#[derive(Parser)]
#[command(
    name = "injectors",
    version,
    about = "Attribute-injected adapters for text classification"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Global {
    /// Experiment config file (TOML). Built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: training seed, or generator seed for generate-data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to a fresh run directory under the output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output root used when --out is absent.
    #[arg(long, global = true, env = run::OUT_ENV, default_value = "runs")]
    out_root: PathBuf,
    /// Config override such as plan.total_steps=100; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Injectors,
    Adapters,
    Plain,
    TokensBaseline,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset with a known Bayes-optimal accuracy.
    GenerateData {
        /// Generator spec (TOML); defaults to the config's data.generator.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model and save its best-dev checkpoint.
    Train {
        /// Model variant; overrides model.kind.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Score a checkpoint on a JSONL file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Drop every attribute before scoring.
        #[arg(long)]
        mask_attributes: bool,
    },
    /// Closed-form and enumerated parameter counts.
    ParamCount {
        /// Count attribute adapters with dense weight synthesis.
        #[arg(long)]
        naive: bool,
        /// Use the 12-layer, 768-wide model instead of the config's.
        #[arg(long)]
        base: bool,
        /// Number of attributes; defaults to the configured data.
        #[arg(long)]
        attributes: Option<usize>,
    },
    /// Accuracy per attribute-sparsity bin, one CSV block per checkpoint.
    AnalyzeSparsity {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        attribute: String,
        /// Defaults to analysis.n_bins.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Train and score each ablation variant.
    Ablate {
        /// Comma-separated variants; defaults to ablation.variants.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Train on source tasks, reuse the attribute modules on target tasks.
    Transfer,
    /// Finite-difference check of every model variant at toy size.
    GradCheck,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenerateData { spec } => commands::generate_data(g, spec.as_deref()),
        Command::Train { mode } => commands::train(g, *mode),
        Command::Eval {
            checkpoint,
            data,
            mask_attributes,
        } => commands::eval(g, checkpoint, data, *mask_attributes),
        Command::ParamCount {
            naive,
            base,
            attributes,
        } => commands::param_count(g, *naive, *base, *attributes),
        Command::AnalyzeSparsity {
            checkpoints,
            data,
            attribute,
            bins,
        } => commands::analyze_sparsity(g, checkpoints, data, attribute, *bins),
        Command::Ablate { variants } => commands::ablate(g, variants),
        Command::Transfer => commands::transfer(g),
        Command::GradCheck => commands::grad_check(g),
    }
}
