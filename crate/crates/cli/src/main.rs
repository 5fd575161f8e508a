//! `affkit`: toy data generation, training, decoding and evaluation.
//!
//! Exit codes: 0 success, 1 usage or runtime failure, 2 bad input data.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "affkit", version, about = "Affordance detection and video-to-command toolkit", arg_required_else_help = true)]
struct Cli {
    /// key=value settings file; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print reports as JSON instead of key=value lines.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic affordance scene set and a synthetic video set.
    MakeToyData(MakeToyData),
    /// Train the toy affordance network on a scene set.
    TrainAff(TrainAff),
    /// Segment a scene set with a trained affordance checkpoint.
    EvalAff(EvalAff),
    /// Refine a label map with dense CRF mean-field inference.
    CrfRefine(CrfRefine),
    /// Train the video-to-command network on a manifest.
    TrainV2c(TrainV2c),
    /// Greedy-decode the command for one feature file.
    DecodeV2c(DecodeV2c),
    /// Predict the action class of one feature file.
    ClassifyAction(ClassifyAction),
    /// Score a trained video-to-command checkpoint on a manifest.
    EvalV2c(EvalV2c),
}

#[derive(Debug, Args)]
struct MakeToyData {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "toy-data")]
    out: PathBuf,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    videos: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainAff {
    /// Directory holding scenes.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalAff {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory to write predicted label maps into.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CrfRefine {
    /// RGB image (binary PPM).
    #[arg(long)]
    image: PathBuf,
    /// Initial labels (binary PGM, gray level = label).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Probability given to the initial label of each pixel.
    #[arg(long)]
    confidence: Option<f64>,
    /// Number of labels; defaults to the largest label present plus one.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    sigma_alpha: Option<f64>,
    #[arg(long)]
    sigma_beta: Option<f64>,
    #[arg(long)]
    sigma_gamma: Option<f64>,
}

/// Optional seeded train/test split of a manifest.
#[derive(Debug, Args)]
struct SplitArgs {
    /// Fraction of records used for training; all records when absent.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainV2c {
    /// Directory holding manifest.tsv and vocab.txt.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// lstm or gru.
    #[arg(long)]
    cell: Option<String>,
    /// small or full layer widths.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once every training command and action is reproduced.
    #[arg(long)]
    until_perfect: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
struct DecodeV2c {
    #[arg(long)]
    checkpoint: PathBuf,
    /// AFK1 feature file.
    #[arg(long)]
    features: PathBuf,
    /// Keep only the first and last generated words.
    #[arg(long)]
    first_last: bool,
}

#[derive(Debug, Args)]
struct ClassifyAction {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
}

#[derive(Debug, Args)]
struct EvalV2c {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which records to score when splitting: train, test or all.
    #[arg(long, default_value = "all")]
    part: String,
    #[command(flatten)]
    split: SplitArgs,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("AFFKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("AFFKIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let settings = commands::Settings::load(cli.config.as_deref())?;
    let out = commands::Output { json: cli.json };
    match cli.command {
        Command::Gradcheck { seed } => commands::gradcheck(&settings, &out, seed),
        Command::MakeToyData(a) => commands::make_toy_data(&settings, &out, a),
        Command::TrainAff(a) => commands::train_aff(&settings, &out, a),
        Command::EvalAff(a) => commands::eval_aff(&out, a),
        Command::CrfRefine(a) => commands::crf_refine(&settings, &out, a),
        Command::TrainV2c(a) => commands::train_v2c(&settings, &out, a),
        Command::DecodeV2c(a) => commands::decode_v2c(a),
        Command::ClassifyAction(a) => commands::classify_action(a),
        Command::EvalV2c(a) => commands::eval_v2c(&settings, &out, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
