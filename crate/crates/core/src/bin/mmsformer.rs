use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmsformer::cli::{self, Invocation};

/// Multimodal segmentation transformer: train, evaluate, ablate, and cost
/// models on portable multimodal datasets.
#[derive(Parser)]
#[command(name = "mmsformer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key-value config file (dotted keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root directory (contains manifest.txt)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint file (eval)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for logs, reports and checkpoints
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override (applies to model, training and synthesis)
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, repeatable: --set key=value (last wins)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated modality subset, in request order
    #[arg(long)]
    modalities: Option<String>,
    /// Fusion-block variant (full, no_channel_attention,
    /// no_parallel_convs, kernels_3_7_11, linear_only)
    #[arg(long)]
    variant: Option<String>,
    /// Enforce acceptance thresholds (ablate/modalities), exit 4 on failure
    #[arg(long)]
    check: bool,
    /// Suppress progress output
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs, checkpoints and an eval report
    Train(Common),
    /// Evaluate a checkpoint on a dataset split
    Eval(Common),
    /// Train all five fusion-block variants and emit the comparison table
    Ablate(Common),
    /// Train nested modality subsets and emit the incremental table
    Modalities(Common),
    /// Analytic parameter/FLOP report for a model config
    Cost(Common),
    /// Gradient verification suite (f32 and f64)
    Gradcheck(Common),
    /// Generate a synthetic multimodal dataset
    Synth(Common),
}

impl Common {
    fn into_invocation(self) -> Invocation {
        Invocation {
            config: self.config,
            dataset: self.dataset,
            checkpoint: self.checkpoint,
            out: self.out,
            seed: self.seed,
            overrides: self.set,
            modalities: self.modalities,
            variant: self.variant,
            check: self.check,
            quiet: self.quiet,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, common): (fn(&Invocation) -> mmsformer::Result<()>, Common) = match cli.command {
        Command::Train(c) => (cli::run_train, c),
        Command::Eval(c) => (cli::run_eval, c),
        Command::Ablate(c) => (cli::run_ablate, c),
        Command::Modalities(c) => (cli::run_modalities, c),
        Command::Cost(c) => (cli::run_cost, c),
        Command::Gradcheck(c) => (cli::run_gradcheck, c),
        Command::Synth(c) => (cli::run_synth, c),
    };
    let inv = common.into_invocation();
    match run(&inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
