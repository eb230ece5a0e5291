//! `dff`: train and verify the two-stage lung screening pipeline.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dff_core::data::{SynthKind, SynthSpec};

#[derive(Parser)]
#[command(name = "dff", version, about = "Distant-domain transfer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the feature-fusion classifier from an experiment config.
    TrainDff(RunArgs),
    /// Train the residual U-Net segmenter from a segmentation config.
    TrainSeg(RunArgs),
    /// Mask images with a trained segmenter, then train the classifier.
    Pipeline(RunArgs),
    /// Finite-difference checks of every operator and both models.
    Gradcheck(GradcheckArgs),
    /// Write a deterministic synthetic PGM dataset.
    GenSynth(GenSynthArgs),
    /// Re-evaluate a stored checkpoint on its held-out test split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Corrupt one operator's analytic gradient (verification fixture).
    #[arg(long, hide = true)]
    sabotage: Option<String>,
}

#[derive(Args)]
struct GenSynthArgs {
    /// shapes, textures, blobs-labeled, or blobs-masked.
    #[arg(long, value_parser = parse_kind)]
    kind: SynthKind,
    /// Number of images.
    #[arg(long)]
    count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory to write into.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// The config the run was trained from.
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding model.ckpt, if not the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    match s {
        "shapes" => Ok(SynthKind::Shapes),
        "textures" => Ok(SynthKind::Textures),
        "blobs-labeled" => Ok(SynthKind::BlobsLabeled),
        "blobs-masked" => Ok(SynthKind::BlobsMasked),
        other => Err(format!(
            "unknown kind '{other}' (expected shapes, textures, blobs-labeled, blobs-masked)"
        )),
    }
}

fn run(cli: Cli) -> dff_core::Result<()> {
    match cli.command {
        Command::TrainDff(a) => commands::cmd_train_dff(&a.config, a.seed, a.out),
        Command::TrainSeg(a) => commands::cmd_train_seg(&a.config, a.seed, a.out),
        Command::Pipeline(a) => commands::cmd_pipeline(&a.config, a.seed, a.out),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a.sabotage.as_deref()),
        Command::GenSynth(a) => {
            let spec =
                SynthSpec { kind: a.kind, count: a.count, size: a.size, seed: a.seed };
            commands::cmd_gen_synth(&spec, &a.out)
        }
        Command::Eval(a) => commands::cmd_eval(&a.config, a.out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
