//! `dermresnet` command-line tool.
//!
//! Every subcommand prints one JSON line on stdout; progress and human
//! summaries go to stderr. Exit status: 0 success, 1 usage error, 2 data or
//! model error.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dermresnet", version, about = "Residual CNN for melanoma vs. benign lesion classification")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic lesion dataset (PNGs, .bbox sidecars, manifest.csv).
    Synth(SynthArgs),
    /// Train a model and write checkpoint, best checkpoint and history CSV.
    Train(TrainArgs),
    /// Report infer-mode loss and accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict one image, optionally with a Grad-CAM overlay.
    Predict(PredictArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory containing manifest.csv, or a manifest CSV file.
    #[arg(long)]
    data: std::path::PathBuf,
    /// Image directory, when it differs from the manifest's directory.
    #[arg(long)]
    images: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Separate validation dataset; without it the data is split.
    #[arg(long)]
    val_data: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    out_checkpoint: std::path::PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    /// `inverse` (the default when given without a value) or `w0,w1`.
    #[arg(long, num_args = 0..=1, default_missing_value = "inverse")]
    class_weights: Option<String>,
    /// Give every layer projections of all earlier outputs.
    #[arg(long)]
    dense_skips: bool,
    /// Network input side; images are resized to it.
    #[arg(long, default_value_t = 224)]
    input_size: usize,
    /// Channels of the three parameter layers.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    channels: Vec<usize>,
    /// Disable random flips and quarter turns.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: std::path::PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    image: std::path::PathBuf,
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    /// Compute a Grad-CAM map for the predicted class.
    #[arg(long)]
    cam: bool,
    /// Where to write the overlay PNG (implies --cam).
    #[arg(long)]
    out_overlay: Option<std::path::PathBuf>,
    /// Where to write the heatmap as a P-HEAT text grid (implies --cam).
    #[arg(long)]
    out_heatmap: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
