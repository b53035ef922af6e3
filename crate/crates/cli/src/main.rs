//! `cdl`: generate synthetic causal worlds, train the diffusion model with
//! its causal heads, and run counterfactual generation and evaluation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cdl", version, about = "Causal diffusion lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic world into an image/factor dataset directory.
    GenData(GenDataArgs),
    /// Train the generator, projector, and structural model jointly.
    Train(TrainArgs),
    /// Draw unconditional samples from a trained checkpoint.
    Sample(SampleArgs),
    /// Generate the counterfactual of one factual image under an intervention.
    Counterfactual(CounterfactualArgs),
    /// Score counterfactual generation against the ground-truth world.
    Evaluate(EvaluateArgs),
    /// Compare the four guidance schedules on one shared set of pairs.
    AblateLambda(AblateLambdaArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
pub enum GuidanceModeArg {
    /// Scale from the noise level, residual width, and gradient norm.
    SelfAdjusted,
    /// Constant scale `--lambda-fixed`.
    Fixed,
    /// `--lambda-fixed` ramped linearly over the schedule.
    Linear,
    /// Per-timestep table fitted by coordinate search.
    Trainable,
    /// No correction; the plain reverse pass.
    Off,
}

impl GuidanceModeArg {
    pub fn name(self) -> &'static str {
        match self {
            Self::SelfAdjusted => "self-adjusted",
            Self::Fixed => "fixed",
            Self::Linear => "linear",
            Self::Trainable => "trainable",
            Self::Off => "off",
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, ValueEnum)]
pub enum StartModeArgs {
    /// Invert the factual image up the sub-schedule (identity-preserving).
    Invert,
    /// Start from a fresh seeded latent.
    Noise,
}

impl StartModeArgs {
    pub fn name(self) -> &'static str {
        match self {
            Self::Invert => "invert",
            Self::Noise => "noise",
        }
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v < 2 {
        return Err("must be at least 2".into());
    }
    Ok(v)
}

#[derive(Args)]
pub struct GenDataArgs {
    /// World to render: `pendulum` or `toy-bars`.
    #[arg(long)]
    pub world: String,
    /// Number of samples to draw.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Exogenous noise scale of the non-root mechanisms.
    #[arg(long, default_value_t = 0.05)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory the dataset is written into.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training config JSON; defaults to the preset for the dataset's world.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Overrides the config iteration target (also extends a resumed run).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Checkpoint to continue from; replays the exact remaining schedule.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Adjacency threshold for the reported graph.
    #[arg(long, default_value_t = 0.3)]
    pub graph_threshold: f64,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of images to draw.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Reverse steps in the sub-schedule.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["index", "image"])))]
pub struct CounterfactualArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the factual image.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sample index within --data.
    #[arg(long, requires = "data")]
    pub index: Option<usize>,
    /// Factual image as a PGM file instead of a dataset row.
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub image: Option<PathBuf>,
    /// Intervention, 1-based: `"z1=0.5,z3=-0.2"`.
    #[arg(long)]
    pub intervene: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = GuidanceModeArg::SelfAdjusted)]
    pub guidance_mode: GuidanceModeArg,
    /// Strength of the self-adjusted schedule.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Scale of the fixed and linear schedules.
    #[arg(long, default_value_t = 0.25)]
    pub lambda_fixed: f64,
    /// Residual width; defaults to the value calibrated at training time.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum, default_value_t = StartModeArgs::Invert)]
    pub start_mode: StartModeArgs,
    /// Abduct and predict through the ground-truth world (needs --index).
    #[arg(long, requires = "index")]
    pub gt_factors: bool,
    /// Write a per-step guidance trace JSON.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub graph_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of (start, intervention) pairs to score.
    #[arg(long, default_value_t = 64, value_parser = at_least_two)]
    pub n_interventions: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = GuidanceModeArg::SelfAdjusted)]
    pub guidance_mode: GuidanceModeArg,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.25)]
    pub lambda_fixed: f64,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum, default_value_t = StartModeArgs::Invert)]
    pub start_mode: StartModeArgs,
    /// Also run autoregressive chains of this many interventions.
    #[arg(long)]
    pub sequential_k: Option<usize>,
    /// Chains in the sequential run.
    #[arg(long, default_value_t = 16)]
    pub chains: usize,
    /// Reuse a predictor checkpoint instead of training one.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long, default_value_t = 1500)]
    pub predictor_iters: usize,
    /// Bins of the trainable lambda table.
    #[arg(long, default_value_t = 5)]
    pub table_bins: usize,
    /// Pairs used when fitting the trainable table.
    #[arg(long, default_value_t = 8)]
    pub fit_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub graph_threshold: f64,
}

#[derive(Args)]
pub struct AblateLambdaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Shared (start, intervention) pairs scored by every schedule.
    #[arg(long, default_value_t = 64, value_parser = at_least_two)]
    pub n_interventions: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.25)]
    pub lambda_fixed: f64,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum, default_value_t = StartModeArgs::Invert)]
    pub start_mode: StartModeArgs,
    #[arg(long, default_value_t = 5)]
    pub table_bins: usize,
    /// Pairs used when fitting the trainable table.
    #[arg(long, default_value_t = 8)]
    pub fit_pairs: usize,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long, default_value_t = 1500)]
    pub predictor_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub graph_threshold: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => commands::gen_data(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Sample(a) => commands::sample(a),
        Cmd::Counterfactual(a) => commands::counterfactual(a),
        Cmd::Evaluate(a) => commands::evaluate(a),
        Cmd::AblateLambda(a) => commands::ablate_lambda(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
