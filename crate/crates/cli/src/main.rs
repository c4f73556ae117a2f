//! `dense-ntp` command-line front end.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed check), 2 usage
//! error (unknown flag, bad config key).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dense_ntp::decode::Background;
use dense_ntp::loss::LossKind;
use dense_ntp::synthlab::{ExperimentConfig, ModelMode, Preset};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "dense-ntp", version, about = "Dense prediction through multi-label next-token losses")]
struct Cli {
    /// TOML file with the subcommand's parameters; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (default `dense-ntp-out/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the tiny model on synthetic scenes.
    Train(TrainArgs),
    /// Evaluate a trained model on the seed's test scenes.
    Eval(EvalArgs),
    /// Decode one test scene into a label map.
    Decode(DecodeArgs),
    /// Quantize depths to bins or dequantize bins to depths.
    DepthQuant(DepthQuantArgs),
    /// RLE masks and tagged messages.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Run an ablation preset.
    Bench(BenchArgs),
    /// Render the top three principal components of hidden states.
    VizPca(VizPcaArgs),
}

#[derive(Debug, Subcommand)]
enum CodecCommand {
    /// PGM label map → RLE payload.
    Encode(CodecEncodeArgs),
    /// RLE payload → PGM label map.
    Decode(CodecDecodeArgs),
    /// Tagged message → JSON structure.
    Parse(CodecParseArgs),
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: dense_ntp::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<ModelMode, String> {
    s.parse().map_err(|e: dense_ntp::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: dense_ntp::Error| e.to_string())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainArgs {
    /// ntpm | ntp_ce | raw_bce | focal | ohem | balanced_bce | indiv_mean
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Relevant negatives per token (ntpm).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    /// linear | attn1
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ModelMode>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    /// Any `ExperimentConfig` field, from the `[experiment]` config table;
    /// the flags above win.
    #[arg(skip)]
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalArgs {
    /// `model.json` written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(skip)]
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum DecodeMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum BackgroundOpt {
    #[default]
    None,
    Sigmoid,
}

impl BackgroundOpt {
    fn background(self) -> Background {
        match self {
            BackgroundOpt::None => Background::None,
            BackgroundOpt::Sigmoid => Background::sigmoid_default(),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DecodeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test scene index.
    #[arg(long)]
    scene: Option<usize>,
    /// Hard argmax labels, or hard labels plus a soft probability map.
    #[arg(long, value_enum)]
    decode_mode: Option<DecodeMode>,
    /// Compare sigmoid category scores against a constant background.
    #[arg(long, value_enum)]
    background: Option<BackgroundOpt>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Output size (defaults to the scene size).
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(skip)]
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DepthQuantArgs {
    /// nyuv2 | cityscapes | ddad | openworld
    #[arg(long)]
    preset: Option<String>,
    /// Depths in meters to quantize (comma separated).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    depth: Option<Vec<f64>>,
    /// Bins to dequantize (comma separated).
    #[arg(long, value_delimiter = ',')]
    bin: Option<Vec<u32>>,
    /// Also quantize the depth map of this synthetic scene index.
    #[arg(long)]
    scene: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CodecEncodeArgs {
    /// PGM file, or `-` for standard input.
    #[arg(long = "in")]
    input: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CodecDecodeArgs {
    /// RLE payload file, or `-` for standard input.
    #[arg(long = "in")]
    input: Option<String>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    /// semantic | depth_bins
    #[arg(long)]
    kind: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CodecParseArgs {
    /// Message file, or `-` for standard input.
    #[arg(long = "in")]
    input: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Pass threshold on the maximum relative error.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BenchArgs {
    /// table3-mini | table4-mini | table5-mini | table6-mini
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(skip)]
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct VizPcaArgs {
    /// Model whose hidden states are projected; raw token features if absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    scene: Option<usize>,
    /// Nearest-neighbour magnification of the token grid.
    #[arg(long)]
    upscale: Option<usize>,
    #[arg(skip)]
    experiment: Option<ExperimentConfig>,
}

/// Why a run failed.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Domain(String),
}

impl From<dense_ntp::Error> for CliError {
    fn from(e: dense_ntp::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
