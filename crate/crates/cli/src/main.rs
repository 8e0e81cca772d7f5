//! `claw`: synthesize data, train, evaluate, predict, check gradients and
//! run ablations from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime
//! failure, 3 gradient check failure. Failures print one `error: ...` line
//! on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "claw", version, about = "Claw UNet vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value config file (`#` comments)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable. Dedicated flags win over these.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic vessel dataset
    Synth(SynthArgs),
    /// Split a dataset 4:1, train, and report test metrics
    Train(TrainArgs),
    /// Score a checkpoint on a dataset
    Eval(EvalArgs),
    /// Segment one image
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on the toy model
    Gradcheck(GradcheckArgs),
    /// Train and compare architecture variants
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub count: Option<usize>,
    /// Image side length
    #[arg(long)]
    pub size: Option<usize>,
}

/// Model and optimization flags shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelTrainArgs {
    /// Model preset: default, desk or toy
    #[arg(long)]
    pub preset: Option<String>,
    /// Model input size; samples are resized to it
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelTrainArgs,
    /// Evaluate on the test split every N epochs
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Also write the freshly initialized parameters to `init.ckpt`
    #[arg(long)]
    pub save_init: bool,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Which part of the 4:1 split to score
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitPart,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Defaults to the threshold stored in the checkpoint
    #[arg(long)]
    pub threshold: Option<f64>,
    /// symmetric-max or directed
    #[arg(long)]
    pub hausdorff_mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Also write the probability map as a 16-bit PNG
    #[arg(long)]
    pub prob: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Batch-norm mode: train or eval
    #[arg(long, default_value = "train")]
    pub mode: String,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Test hook: corrupt one analytic gradient (the check must then fail)
    #[arg(long)]
    pub break_gradients: bool,
    /// Difference the raw loss, letting ReLU masks and pooling choices
    /// change between the two evaluation points
    #[arg(long)]
    pub no_freeze_branches: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelTrainArgs,
    /// Comma-separated list of unet, claw, claw_res, claw_res_att
    #[arg(long)]
    pub variants: Option<String>,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
    Gradcheck(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
            Self::Gradcheck(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Runtime(m) | Self::Gradcheck(m) => m,
        }
    }
}

impl From<claw_unet::Error> for Failure {
    fn from(e: claw_unet::Error) -> Self {
        use claw_unet::Error as E;
        match e {
            E::Config(_) | E::Value(_) => Self::Usage(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error:").trim()));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", one_line(f.message()));
            ExitCode::from(f.code())
        }
    }
}
