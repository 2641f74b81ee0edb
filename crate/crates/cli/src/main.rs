mod commands;
mod predictions;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

const EXIT_CODES: &str = "\
Configuration precedence (later wins): built-in defaults, --config file,
--set KEY=VALUE overrides, then the dedicated flags of each command.
The resolved configuration and seed are logged to stderr on every run.

Exit codes:
  0  success
  1  internal error
  2  usage error (bad flags, missing required path, output would overwrite an input)
  3  configuration file or value invalid
  4  file missing or unreadable/unwritable
  5  malformed input file (bad header, row, label, container)
  6  dimension, length or id mismatch between inputs
  7  non-finite value during training

On failure a single JSON line is written to stderr:
  {\"error\":\"<kind>\",\"exit_code\":<n>,\"message\":\"...\"}";

/// Road-safety-feature mapping from sequences of street-level images.
#[derive(Debug, Parser)]
#[command(name = "roadseq", version, after_help = EXIT_CODES)]
struct Cli {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample equally spaced points along every edge of a GeoJSON road network.
    Sample(SampleArgs),
    /// Emit one street-level image request URL per sample point.
    UrlGen(UrlGenArgs),
    /// Generate a synthetic labelled corridor (labels, features, optional frames).
    Synth(SynthArgs),
    /// Train the frame CNN on labelled pixel frames.
    TrainCnn(TrainCnnArgs),
    /// Write CNN feature vectors for every labelled frame.
    ExtractFeatures(ExtractArgs),
    /// Train the LSTM sequence classifier on feature vectors.
    TrainLstm(TrainLstmArgs),
    /// Predict per-image class probabilities with an LSTM or CNN model.
    Predict(PredictArgs),
    /// Score predictions against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Write predictions as a GeoJSON point map.
    ExportMap(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Road network GeoJSON (FeatureCollection of LineStrings with an `id` property).
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Output sample-point CSV.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Sampling interval in metres.
    #[arg(long)]
    pub interval: Option<f64>,
}

#[derive(Debug, Args)]
pub struct UrlGenArgs {
    /// Sample-point CSV written by `sample`.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// API key appended to every URL.
    #[arg(long)]
    pub key: String,
    /// Requested image size.
    #[arg(long, default_value = "640x640", value_name = "WxH")]
    pub size: String,
    /// Output file, one URL per line; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output label CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output feature JSON-lines file.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Also render PPM frames next to this manifest CSV.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of corridor points.
    #[arg(long)]
    pub n_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainCnnArgs {
    /// Training label CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Frame manifest CSV (`image_id,path`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output model file.
    #[arg(long = "model")]
    pub cnn_model: Option<PathBuf>,
    /// Output loss-history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Trained CNN model.
    #[arg(long)]
    pub cnn_model: Option<PathBuf>,
    /// Label CSV naming the frames.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Frame manifest CSV.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output feature JSON-lines file.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainLstmArgs {
    /// `shared` (one 3-output network) or `separate` (one network per class).
    #[arg(long, default_value = "shared")]
    pub mode: String,
    /// Training label CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Training feature JSON-lines file.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output model file.
    #[arg(long = "model")]
    pub lstm_model: Option<PathBuf>,
    /// Output loss-history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Validation label CSV (requires --val-features).
    #[arg(long, requires = "val_features")]
    pub val_labels: Option<PathBuf>,
    /// Validation feature JSON-lines file.
    #[arg(long, requires = "val_labels")]
    pub val_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// LSTM model; predictions use sliding-window aggregation over features.
    #[arg(long, conflicts_with = "cnn_model")]
    pub lstm_model: Option<PathBuf>,
    /// CNN model; frame-only predictions from pixels.
    #[arg(long)]
    pub cnn_model: Option<PathBuf>,
    /// Label CSV naming the images to predict (labels themselves are ignored).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Feature JSON-lines file (LSTM models).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Frame manifest CSV (CNN models).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output prediction CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Ground-truth label CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output metrics JSON.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Prediction CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Output GeoJSON map.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = commands::Context::resolve(cli.config.as_deref(), &cli.set, cli.seed)?;
    match cli.command {
        Command::Sample(a) => commands::sample(ctx, a),
        Command::UrlGen(a) => commands::url_gen(ctx, a),
        Command::Synth(a) => commands::synth(ctx, a),
        Command::TrainCnn(a) => commands::train_cnn(ctx, a),
        Command::ExtractFeatures(a) => commands::extract_features(ctx, a),
        Command::TrainLstm(a) => commands::train_lstm(ctx, a),
        Command::Predict(a) => commands::predict(ctx, a),
        Command::Evaluate(a) => commands::evaluate(ctx, a),
        Command::ExportMap(a) => commands::export_map(ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "exit_code": e.exit_code(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
