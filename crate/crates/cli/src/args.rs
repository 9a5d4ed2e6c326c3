use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgetrain::ExecMode;

#[derive(Debug, Parser)]
#[command(name = "edgetrain", version, about = "Plan and simulate collaborative Transformer training on edge devices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Choose devices, parallelism and checkpoint interval; write a plan file.
    Plan(PlanArgs),
    /// Simulate a plan file and report latency, energy and traffic.
    Simulate(SimulateArgs),
    /// Simulate every model, parallelism and mode on a testbed.
    Sweep(SweepArgs),
    /// Replay a plan under random device failures with checkpoint/restart.
    Faults(FaultsArgs),
    /// List built-in testbeds, devices and models.
    Presets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Cpu,
    Gpu,
}

impl From<ModeArg> for ExecMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cpu => ExecMode::CpuOnly,
            ModeArg::Gpu => ExecMode::GpuEnabled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Energy,
    Latency,
    Weighted,
}

/// Where the domain, model and job come from.
#[derive(Debug, Args)]
pub struct SetupArgs {
    /// Built-in testbed (see `presets`).
    #[arg(long, conflicts_with = "config")]
    pub testbed: Option<String>,
    /// TOML config with `[domain]`, `[model]` and `[job]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset; overrides the config's `[model]`.
    #[arg(long)]
    pub model: Option<String>,
    /// Execution mode; overrides the testbed or config mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Comma-separated participants. With a testbed or config these are device
    /// ids; on their own they are device presets (`nano,tx2`) forming an ad-hoc domain.
    #[arg(long, value_delimiter = ',')]
    pub devices: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub setup: SetupArgs,
    #[arg(long, value_enum, default_value = "energy")]
    pub objective: ObjectiveArg,
    /// Weight of joules per sample for `--objective weighted`.
    #[arg(long, default_value_t = 1.0)]
    pub weight_energy: f64,
    /// Weight of seconds per sample for `--objective weighted`.
    #[arg(long, default_value_t = 1.0)]
    pub weight_latency: f64,
    /// Search participant subsets instead of using every device.
    #[arg(long)]
    pub select: bool,
    /// Per-device mean time between failures (s) for checkpoint planning.
    #[arg(long)]
    pub mtbf: Option<f64>,
    /// Iterations simulated per candidate.
    #[arg(long, default_value_t = 20)]
    pub iterations: u64,
    /// Plan file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub iterations: u64,
    #[arg(long, default_value_t = 2)]
    pub warmup: u64,
    /// Also bill idle power of devices outside the plan.
    #[arg(long)]
    pub meter_all: bool,
    /// Result file (JSON); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Activity trace (CSV) of every simulated iteration.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, conflicts_with = "config")]
    pub testbed: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Restrict to these model presets.
    #[arg(long, value_delimiter = ',')]
    pub model: Vec<String>,
    /// Restrict to one mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, default_value_t = 20)]
    pub iterations: u64,
    /// Table file (CSV); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FaultsArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Per-device mean time between failures (s).
    #[arg(long, default_value_t = 86_400.0)]
    pub mtbf: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Useful iterations to complete.
    #[arg(long, default_value_t = 1000)]
    pub horizon: u64,
    /// Seconds between checkpoints; planned from the failure rate when absent.
    #[arg(long)]
    pub checkpoint_interval: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub iterations: u64,
    /// Report file (JSON); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
