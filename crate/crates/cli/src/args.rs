use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "saber-sim", version, about = "SLA-aware admission control simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Profile the engine and fit the load-to-speed model.
    Calibrate(CalibrateArgs),
    /// Simulate one workload cell.
    Run(RunArgs),
    /// Sweep mixes, request rates and schedulers.
    Sweep(SweepArgs),
    /// Recompute metrics.json from a records.csv.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// Prefill throughput in tokens/s.
    #[arg(long, default_value_t = 2000.0, conflicts_with = "no_prefill")]
    pub prefill_rate: f64,
    /// Make prefill free.
    #[arg(long)]
    pub no_prefill: bool,
    /// Ground-truth speed law as JSON model file (default usl(100, 0.05, 0.001)).
    #[arg(long, value_name = "FILE")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Composition {
    Homogeneous,
    Mixed,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Largest burst size.
    #[arg(long, default_value_t = 50)]
    pub lmax: usize,
    /// Minimum number of samples to collect.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, env = "SABER_SIM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Mix the profiling requests are drawn from (w1, w2, w3 or a JSON file).
    #[arg(long, default_value = "w3")]
    pub mix: String,
    #[arg(long, value_enum, default_value_t = Composition::Homogeneous)]
    pub composition: Composition,
    #[arg(long, default_value_t = 0.2)]
    pub jitter: f64,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchedulerKind {
    Saber,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LowTier {
    ProtectActive,
    Unconditional,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Full run configuration as JSON; replaces the workload and scheduler flags.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["mix", "rps", "scheduler", "cap", "model"])]
    pub config: Option<PathBuf>,
    /// w1, w2, w3 or a JSON mix file.
    #[arg(long, required_unless_present = "config")]
    pub mix: Option<String>,
    #[arg(long, required_unless_present = "config")]
    pub rps: Option<f64>,
    #[arg(long, value_enum, required_unless_present = "config")]
    pub scheduler: Option<SchedulerKind>,
    /// Batch-size cap of the static scheduler.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Estimation model JSON (best_model.json from calibrate).
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, env = "SABER_SIM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub requests: usize,
    #[arg(long, default_value_t = 0.2)]
    pub jitter: f64,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// Scheduling period in seconds.
    #[arg(long, default_value_t = 0.01)]
    pub tick: f64,
    #[arg(long, value_enum, default_value_t = LowTier::ProtectActive)]
    pub low_tier: LowTier,
    /// Simulation end in seconds (default: last arrival + 10 x max SLA).
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Replay a trace CSV instead of generating arrivals.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Also write the engine event trace.
    #[arg(long)]
    pub events: bool,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CvModeArg {
    Pooled,
    PerRpsMeans,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated mixes.
    #[arg(long, default_value = "w1,w2,w3", value_delimiter = ',')]
    pub mixes: Vec<String>,
    /// Request rates, e.g. `1-10,15,20`.
    #[arg(long, default_value = "1-10,15,20", value_parser = crate::ranges::parse_rps)]
    pub rps: crate::ranges::RpsList,
    /// Static caps, e.g. `10-100:10`; `none` to skip static cells.
    #[arg(long, default_value = "10-100:10", value_parser = crate::ranges::parse_caps)]
    pub caps: crate::ranges::CapList,
    /// Add a SABER column using --model.
    #[arg(long, requires = "model")]
    pub with_saber: bool,
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Extra SABER columns as LABEL=FILE.
    #[arg(long = "variant", value_name = "LABEL=FILE", value_parser = crate::ranges::parse_variant)]
    pub variants: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, env = "SABER_SIM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub requests: usize,
    #[arg(long, default_value_t = 0.2)]
    pub jitter: f64,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, default_value_t = 0.01)]
    pub tick: f64,
    #[arg(long, value_enum, default_value_t = LowTier::ProtectActive)]
    pub low_tier: LowTier,
    #[arg(long, value_enum, default_value_t = CvModeArg::Pooled)]
    pub cv_mode: CvModeArg,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// records.csv written by `run`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
