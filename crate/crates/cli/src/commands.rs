use std::fs::File;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use thiserror::Error;

use saber_sim::calibration::{self, BurstComposition, CalibrationError, ProfilingSpec};
use saber_sim::domain::{catalog, ConfigError, LowTierPolicy, SchedulerConfig, WorkloadMix};
use saber_sim::engine::{write_events, EngineConfig};
use saber_sim::estimator::SpeedModel;
use saber_sim::metrics::{read_records, write_records, MetricsReport};
use saber_sim::scheduler::write_decisions;
use saber_sim::simloop::{run, run_requests, SimConfig, SimError};
use saber_sim::sweep::{self, BestStatic, CvMode, Execution, MixSummary, SchedulerVariant, SweepGrid};
use saber_sim::workload::{read_trace, WorkloadSpec};

use crate::args::{
    CalibrateArgs, Composition, CvModeArg, EngineArgs, LowTier, ReportArgs, RunArgs, SchedulerKind, SweepArgs,
};
use crate::output::{read_json, OutDir};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(e) => e.into(),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::InsufficientLoads { .. } | CalibrationError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_mix(spec: &str) -> CliResult<WorkloadMix> {
    if let Ok(mix) = WorkloadMix::preset(spec) {
        return Ok(mix);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(usage(format!("unknown mix `{spec}` (expected w1, w2, w3 or a JSON file)")));
    }
    let mix: WorkloadMix = read_json(path).map_err(|e| usage(format!("{e:#}")))?;
    mix.validate()?;
    Ok(mix)
}

fn load_model(path: &Path) -> CliResult<SpeedModel> {
    read_json(path).map_err(|e| usage(format!("{e:#}")))
}

fn engine_config(args: &EngineArgs) -> CliResult<EngineConfig> {
    let ground_truth = match &args.ground_truth {
        Some(path) => load_model(path)?,
        None => SpeedModel::default_ground_truth(),
    };
    if !args.no_prefill && !(args.prefill_rate.is_finite() && args.prefill_rate > 0.0) {
        return Err(usage("--prefill-rate must be > 0"));
    }
    Ok(EngineConfig::new(ground_truth, (!args.no_prefill).then_some(args.prefill_rate)))
}

fn low_tier(arg: LowTier) -> LowTierPolicy {
    match arg {
        LowTier::ProtectActive => LowTierPolicy::ProtectActive,
        LowTier::Unconditional => LowTierPolicy::Unconditional,
    }
}

pub fn calibrate(args: CalibrateArgs) -> CliResult {
    let spec = ProfilingSpec {
        mix: load_mix(&args.mix)?,
        max_load: args.lmax,
        target_samples: args.samples,
        seed: args.seed,
        length_jitter: args.jitter,
        composition: match args.composition {
            Composition::Homogeneous => BurstComposition::Homogeneous,
            Composition::Mixed => BurstComposition::Mixed,
        },
    };
    let engine = engine_config(&args.engine)?;
    let samples = calibration::profile(&engine, &spec)?;
    let report = calibration::calibrate(&samples)?;

    let out = OutDir::create(&args.out)?;
    out.write_with("samples.csv", |w| Ok(calibration::write_samples(w, &samples)?))?;
    out.write_json("models.json", &report.all)?;
    out.write_json("best_model.json", &report.best)?;
    eprintln!(
        "{} samples over {} loads; best family {} (R² {:.6})",
        samples.len(),
        calibration::distinct_loads(&samples),
        report.best.family(),
        report.best.fit_r2().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_config(args: &RunArgs) -> CliResult<SimConfig> {
    if let Some(path) = &args.config {
        let cfg: SimConfig = read_json(path).map_err(|e| usage(format!("{e:#}")))?;
        return Ok(cfg);
    }
    let mix = load_mix(args.mix.as_deref().expect("required by clap"))?;
    let rps = args.rps.expect("required by clap");
    let (scheduler, model) = match args.scheduler.expect("required by clap") {
        SchedulerKind::Saber => {
            let path = args.model.as_ref().ok_or_else(|| usage("--scheduler saber requires --model"))?;
            let cfg = SchedulerConfig {
                window_size: args.window,
                tick: args.tick,
                low_tier: low_tier(args.low_tier),
                ..SchedulerConfig::saber()
            };
            (cfg, Some(load_model(path)?))
        }
        SchedulerKind::Static => {
            let cap = args.cap.ok_or_else(|| usage("--scheduler static requires --cap"))?;
            (SchedulerConfig { tick: args.tick, ..SchedulerConfig::fixed(cap) }, None)
        }
    };
    let workload = WorkloadSpec::new(mix, rps, args.requests, args.seed).with_jitter(args.jitter);
    let mut cfg = SimConfig::new(workload, scheduler, model);
    cfg.engine = engine_config(&args.engine)?;
    cfg.horizon = args.horizon;
    Ok(cfg)
}

pub fn run_cmd(args: RunArgs) -> CliResult {
    let mut cfg = run_config(&args)?;
    cfg.record_traces = true;
    cfg.validate()?;
    let output = match &args.trace {
        Some(path) => {
            let mut tasks = catalog();
            tasks.extend(cfg.workload.mix.entries.iter().map(|e| e.task.clone()));
            let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
            let requests = read_trace(file, &tasks).map_err(|e| usage(e.to_string()))?;
            run_requests(&cfg, requests)?
        }
        None => run(&cfg)?,
    };

    let out = OutDir::create(&args.out)?;
    out.write_with("records.csv", |w| Ok(write_records(w, &output.records)?))?;
    out.write_with("decisions.csv", |w| Ok(write_decisions(w, &output.decisions)?))?;
    out.write_json("metrics.json", &output.metrics)?;
    if args.events {
        out.write_with("events.csv", |w| Ok(write_events(w, &output.engine_events)?))?;
    }
    eprintln!("goodput {:.4} over {} requests", output.metrics.goodput, output.records.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepSummary {
    cv_mode: CvMode,
    repeats: usize,
    base_seed: u64,
    requests_per_cell: usize,
    mixes: Vec<MixSummary>,
    best_static: Vec<BestStatic>,
}

pub fn sweep_cmd(args: SweepArgs) -> CliResult {
    let mixes = args.mixes.iter().map(|m| load_mix(m)).collect::<CliResult<Vec<_>>>()?;
    let mut variants: Vec<SchedulerVariant> =
        args.caps.iter().map(|&cap| SchedulerVariant::Static { cap }).collect();
    if args.with_saber {
        let path = args.model.as_ref().ok_or_else(|| usage("--with-saber requires --model"))?;
        variants.push(SchedulerVariant::Saber { label: "saber".into(), model: load_model(path)? });
    }
    for (label, path) in &args.variants {
        variants.push(SchedulerVariant::Saber { label: label.clone(), model: load_model(path)? });
    }
    let grid = SweepGrid { mixes, rps: args.rps.clone(), variants };
    grid.validate()?;

    let workload = WorkloadSpec::new(grid.mixes[0].clone(), grid.rps[0], args.requests, args.seed).with_jitter(args.jitter);
    let scheduler = SchedulerConfig {
        window_size: args.window,
        tick: args.tick,
        low_tier: low_tier(args.low_tier),
        ..SchedulerConfig::saber()
    };
    let mut base = SimConfig::new(workload, scheduler, None);
    base.engine = engine_config(&args.engine)?;
    base.repeats = args.repeats;
    let execution = match args.jobs {
        Some(0) => return Err(usage("--jobs must be >= 1")),
        Some(n) => Execution::Threads(n),
        None => Execution::Parallel,
    };
    let result = sweep::sweep(&grid, &base, execution)?;
    let cv_mode = match args.cv_mode {
        CvModeArg::Pooled => CvMode::Pooled,
        CvModeArg::PerRpsMeans => CvMode::PerRpsMeans,
    };
    let summary = SweepSummary {
        cv_mode,
        repeats: args.repeats,
        base_seed: args.seed,
        requests_per_cell: args.requests,
        mixes: sweep::mix_summary(&result, cv_mode),
        best_static: result.best_static.clone(),
    };

    let out = OutDir::create(&args.out)?;
    out.write_with("results.csv", |w| Ok(sweep::write_rows(w, &result.rows)?))?;
    out.write_json("summary.json", &summary)?;
    eprintln!("{} cells, {} rows", result.cells.len(), result.rows.len());
    Ok(())
}

pub fn report(args: ReportArgs) -> CliResult {
    let file = File::open(&args.records).with_context(|| format!("cannot read {}", args.records.display()))?;
    let records = read_records(file).with_context(|| format!("cannot parse {}", args.records.display()))?;
    let metrics = MetricsReport::from_records(&records).map_err(|e| CliError::Runtime(e.into()))?;
    let out = OutDir::create(&args.out)?;
    out.write_json("metrics.json", &metrics)?;
    Ok(())
}
