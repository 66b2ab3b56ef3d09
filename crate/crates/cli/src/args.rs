use std::path::PathBuf;

use binn_core::model::CommVariant;
use binn_core::nod::SweepKind;
use binn_core::sims::SystemKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "binn", version, about = "Behavior-inspired relational inference from multi-agent trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a physical system into train/val/test dataset directories.
    Generate(GenerateArgs),
    /// Convert a trajectory CSV into a dataset directory.
    ImportCsv(ImportArgs),
    /// Fit a model and write checkpoints and the metrics log.
    Train(TrainArgs),
    /// Rollout MSE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predicted trajectories and latent traces for a few trajectories.
    Rollout(RolloutArgs),
    /// Equilibrium sweeps of single-agent or learned opinion dynamics.
    Bifurcation(BifurcationArgs),
    /// Latent traces, learned parameters, exclusivity verdicts and sweeps.
    Analyze(AnalyzeArgs),
    /// Retrain with one latent category fewer after a positive exclusivity verdict.
    Reduce(ReduceArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_system)]
    pub system: SystemKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 2000/500/500 splits (the default sizes).
    #[arg(long, conflicts_with = "full_scale")]
    pub desk_scale: bool,
    /// 50000/12500/12500 splits.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Agents for mass-spring and Kuramoto.
    #[arg(long)]
    pub agents: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// CSV with columns traj_id,t,agent_id,px[,py][,vx[,vy]].
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seconds between frames.
    #[arg(long)]
    pub dt: f64,
    /// The file carries velocity columns.
    #[arg(long)]
    pub has_velocity: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset root with train/ and val/ splits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON training configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from per-system defaults instead of the generic ones.
    #[arg(long, value_parser = parse_system)]
    pub system: Option<SystemKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_comm)]
    pub comm: Option<CommVariant>,
    /// Latent categories per agent.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Cap training at 100 epochs.
    #[arg(long)]
    pub desk_scale: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory, or a root whose test/ split is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also report the non-learned baselines.
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Predicted frames after the first; defaults to the dataset length.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Number of leading trajectories to roll out.
    #[arg(long, default_value_t = 4)]
    pub n_traj: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    Attention,
    Input,
}

impl From<SweepArg> for SweepKind {
    fn from(s: SweepArg) -> Self {
        match s {
            SweepArg::Attention => SweepKind::Attention,
            SweepArg::Input => SweepKind::Input,
        }
    }
}

#[derive(Debug, Args)]
pub struct BifurcationArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SweepArg::Attention)]
    pub sweep: SweepArg,
    /// Sweep the learned latent dynamics of this checkpoint instead of a single agent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub d: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Attention held fixed during input sweeps.
    #[arg(long, default_value_t = 2.0)]
    pub u: f64,
    /// Input held fixed during attention sweeps.
    #[arg(long, default_value_t = 0.0)]
    pub b: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub from: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub to: f64,
    #[arg(long, default_value_t = 121)]
    pub resolution: usize,
    /// Latent category driven by the input sweep (checkpoint sweeps).
    #[arg(long, default_value_t = 0)]
    pub category: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectories whose latent traces are exported and pooled.
    #[arg(long, default_value_t = 16)]
    pub n_traj: usize,
    /// Latent category driven by the input sweep.
    #[arg(long, default_value_t = 0)]
    pub category: usize,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// Dataset root with train/ and val/ splits (test/ is scored when present).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch count for the retrained model; defaults to the checkpoint's.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_system(s: &str) -> Result<SystemKind, String> {
    s.parse().map_err(|e: binn_core::sims::SimError| e.to_string())
}

fn parse_comm(s: &str) -> Result<CommVariant, String> {
    s.parse().map_err(|e: binn_core::model::ModelError| e.to_string())
}
