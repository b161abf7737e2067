//! `textseg`: the segmentation pipeline as independent commands that
//! communicate only through files.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use textseg::losses::LossKind;

use crate::config::{ModelKind, OverlapArg, Scale};

#[derive(Parser, Debug)]
#[command(name = "textseg", version, about = "Handwritten / printed text segmentation pipeline")]
struct Cli {
    /// TOML run file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for synthesis, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of overlaid printed and handwritten text.
    Synth(SynthArgs),
    /// Train a model on the train split, selecting on the val split.
    Train(TrainArgs),
    /// Predict class maps and probabilities for one split.
    Infer(InferArgs),
    /// Apply CRF or CRFH relabeling to stored probabilities.
    Postprocess(PostprocessArgs),
    /// Per-class and mean IoU for up to three prediction sets.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every primitive, loss and the MFM.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    printed_dir: Option<PathBuf>,
    #[arg(long)]
    handwritten_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long, value_parser = ["3", "4"])]
    classes: Option<String>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated class weights in (PT, HT, BG[, OV]) order.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Class absorbing OV pixels when training three classes.
    #[arg(long, value_enum)]
    overlap: Option<OverlapArg>,
    /// Standalone SSP checkpoint to seed the SSP branch of an MFM.
    #[arg(long)]
    init_ssp: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Training run directory holding model.json and model.ckpt.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PostPolicy {
    None,
    Crf,
    Crfh,
}

#[derive(Args, Debug)]
struct PostprocessArgs {
    /// Directory written by `infer`.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long, value_enum)]
    policy: PostPolicy,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Predictions without post-processing.
    #[arg(long)]
    pred: PathBuf,
    /// Predictions after CRF.
    #[arg(long)]
    crf: Option<PathBuf>,
    /// Predictions after CRFH.
    #[arg(long)]
    crfh: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Perturb the analytic gradient of one named check.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = LossKind::ALL.iter().map(|k| k.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Exit status 1: a check ran and failed, or the pipeline hit a runtime error.
/// Exit status 2: the invocation or its inputs are unusable.
enum Failure {
    Check(String),
    Core(textseg::Error),
}

impl From<textseg::Error> for Failure {
    fn from(e: textseg::Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    use textseg::Error as E;
    match f {
        Failure::Check(_) => 1,
        Failure::Core(E::Usage(_) | E::Config(_) | E::MissingArtifact(_) | E::Architecture(_)) => 2,
        Failure::Core(E::UnknownColor { .. } | E::IllegalOverlap { .. } | E::Manifest(_)) => 2,
        Failure::Core(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
