//! One experiment cell: workload, scheduler, engine and metrics bound into
//! a tick-driven event loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ConfigError, Request, SchedulerConfig, SchedulerMode, Seconds};
use crate::engine::{EngineConfig, EngineError, EngineEvent, EngineState};
use crate::estimator::SpeedModel;
use crate::metrics::{FinalTier, MetricsError, MetricsReport, RunRecord};
use crate::scheduler::{DecisionRecord, Scheduler, SchedulerError};
use crate::workload::{generate, WorkloadSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Everything that determines one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub workload: WorkloadSpec,
    pub scheduler: SchedulerConfig,
    /// Estimation model; required in SABER mode.
    #[serde(default)]
    pub model: Option<SpeedModel>,
    #[serde(default)]
    pub engine: EngineConfig,
    /// Simulation end; defaults to last arrival + 10 x the mix's largest SLA.
    #[serde(default)]
    pub horizon: Option<Seconds>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Seeds the scheduler's sampling rng.
    pub seed: u64,
    /// Keep decision and engine traces.
    #[serde(default)]
    pub record_traces: bool,
}

fn default_repeats() -> usize {
    3
}

impl SimConfig {
    pub fn new(workload: WorkloadSpec, scheduler: SchedulerConfig, model: Option<SpeedModel>) -> Self {
        let seed = workload.seed;
        SimConfig {
            workload,
            scheduler,
            model,
            engine: EngineConfig::default(),
            horizon: None,
            repeats: default_repeats(),
            seed,
            record_traces: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.workload.validate()?;
        self.scheduler.validate()?;
        if self.scheduler.mode == SchedulerMode::Saber && self.model.is_none() {
            return Err(ConfigError::invalid("model", "saber mode requires an estimation model"));
        }
        if self.repeats < 1 {
            return Err(ConfigError::invalid("repeats", "must be >= 1"));
        }
        if let Some(h) = self.horizon {
            if !(h.is_finite() && h >= 0.0) {
                return Err(ConfigError::invalid("horizon", "must be >= 0"));
            }
        }
        Ok(())
    }

    /// The same config with workload and scheduler seeds set to `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.workload.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub decisions: Vec<DecisionRecord>,
    pub engine_events: Vec<EngineEvent>,
    pub metrics: MetricsReport,
}

/// Generates the configured workload and simulates it.
pub fn run(config: &SimConfig) -> Result<RunOutput, SimError> {
    config.validate()?;
    let requests = generate(&config.workload)?;
    run_requests(config, requests)
}

/// Simulates a given request list (for example a replayed trace).
pub fn run_requests(config: &SimConfig, requests: Vec<Request>) -> Result<RunOutput, SimError> {
    config.validate()?;
    if requests.is_empty() {
        return Err(ConfigError::invalid("workload", "no requests").into());
    }
    let tick = config.scheduler.tick;
    let horizon = config.horizon.unwrap_or_else(|| {
        let last = requests.iter().map(|r| r.arrival_time).fold(0.0, f64::max);
        let max_sla = requests.iter().map(|r| r.task.sla).fold(0.0, f64::max);
        last + 10.0 * max_sla
    });

    let mut scheduler = Scheduler::new(config.scheduler.clone(), config.model.clone(), config.seed)?;
    let mut engine = EngineState::new(config.engine.clone());
    if config.record_traces {
        scheduler = scheduler.with_log();
        engine = engine.with_trace();
    }

    let mut pending = requests.iter().cloned().peekable();
    let mut finished: Vec<Option<Request>> = vec![None; requests.len()];
    let slot_of: std::collections::HashMap<u64, usize> =
        requests.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    let mut outstanding = requests.len();

    let mut k: u64 = 0;
    loop {
        let now = k as f64 * tick;
        if now > horizon {
            break;
        }
        while pending.peek().is_some_and(|r| r.arrival_time <= now) {
            scheduler.enqueue(pending.next().expect("peeked"))?;
        }
        scheduler.tick(&mut engine, now)?;

        let next = ((k + 1) as f64 * tick).min(horizon);
        for done in engine.advance_to(next.max(now))? {
            scheduler.on_completion(done.request.id)?;
            let slot = slot_of[&done.request.id];
            finished[slot] = Some(done.request);
            outstanding -= 1;
        }
        if outstanding == 0 {
            break;
        }
        k += 1;
        // Skip idle stretches straight to the tick of the next arrival.
        if engine.is_idle() && scheduler.queue().is_empty() {
            if let Some(r) = pending.peek() {
                let jump = (r.arrival_time / tick).ceil() as u64;
                if jump > k {
                    let target = (jump as f64 * tick).min(horizon);
                    engine.advance_to(target.max(engine.clock()))?;
                    k = jump;
                }
            }
        }
    }

    let records = requests
        .iter()
        .zip(finished)
        .map(|(issued, done)| {
            let completion_time = done.as_ref().and_then(|d| d.completion_time);
            let admit_time = done.as_ref().and_then(|d| d.admit_time).or_else(|| {
                engine.active_requests().find(|a| a.id == issued.id).and_then(|a| a.admit_time)
            });
            RunRecord {
                request_id: issued.id,
                task: issued.task.name.clone(),
                arrival_time: issued.arrival_time,
                admit_time,
                completion_time,
                sla: issued.task.sla,
                met_sla: RunRecord::meets_sla(completion_time, issued.arrival_time, issued.task.sla),
                final_tier: if scheduler.was_demoted(issued.id) { FinalTier::Low } else { FinalTier::High },
            }
        })
        .collect::<Vec<_>>();
    let metrics = MetricsReport::from_records(&records)?;
    Ok(RunOutput {
        records,
        decisions: scheduler.take_decisions(),
        engine_events: engine.take_trace(),
        metrics,
    })
}
