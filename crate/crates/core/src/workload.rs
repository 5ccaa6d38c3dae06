//! Open-loop workload generation: Poisson arrivals, task sampling from a mix
//! and per-request token lengths jittered around the task averages.

use std::collections::HashMap;
use std::io;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ConfigError, Request, Seconds, TaskProfile, WorkloadMix};

/// Gap added when two sampled arrivals collide.
const TIE_GAP: Seconds = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub mix: WorkloadMix,
    /// Mean arrival rate in requests/second.
    pub rps: f64,
    pub num_requests: usize,
    pub seed: u64,
    /// Relative half-width of the uniform length distribution.
    #[serde(default = "default_jitter")]
    pub length_jitter: f64,
}

fn default_jitter() -> f64 {
    WorkloadSpec::DEFAULT_JITTER
}

impl WorkloadSpec {
    pub const DEFAULT_JITTER: f64 = 0.2;

    pub fn new(mix: WorkloadMix, rps: f64, num_requests: usize, seed: u64) -> Self {
        WorkloadSpec { mix, rps, num_requests, seed, length_jitter: Self::DEFAULT_JITTER }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.length_jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mix.validate()?;
        if !(self.rps.is_finite() && self.rps > 0.0) {
            return Err(ConfigError::invalid("rps", "must be > 0"));
        }
        if self.num_requests < 1 {
            return Err(ConfigError::invalid("num_requests", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return Err(ConfigError::invalid("length_jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// The request-rate grid of the load sweep: 1..=10, 15 and 20 RPS.
pub fn rps_grid() -> Vec<f64> {
    (1..=10).map(f64::from).chain([15.0, 20.0]).collect()
}

/// Samples a token count uniformly in `[avg(1-j), avg(1+j)]`, rounded, at least 1.
pub(crate) fn sample_length<R: Rng + ?Sized>(rng: &mut R, avg: u32, jitter: f64) -> u32 {
    let avg = f64::from(avg);
    let value = rng.random_range(avg * (1.0 - jitter)..=avg * (1.0 + jitter));
    (value.round() as u32).max(1)
}

/// Generates the request list of `spec`. Pure in `spec`.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<Request>, ConfigError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaps = Exp::new(spec.rps).map_err(|e| ConfigError::invalid("rps", e.to_string()))?;
    let weights = WeightedIndex::new(spec.mix.entries.iter().map(|e| e.fraction))
        .map_err(|e| ConfigError::invalid("mix", e.to_string()))?;
    let tasks: Vec<Arc<TaskProfile>> = spec.mix.entries.iter().map(|e| Arc::new(e.task.clone())).collect();

    let mut requests = Vec::with_capacity(spec.num_requests);
    let mut clock: Seconds = 0.0;
    let mut last: Option<Seconds> = None;
    for id in 0..spec.num_requests {
        clock += gaps.sample(&mut rng);
        if let Some(prev) = last {
            if clock <= prev {
                clock = prev + TIE_GAP;
            }
        }
        last = Some(clock);
        let task = &tasks[weights.sample(&mut rng)];
        let input = sample_length(&mut rng, task.avg_input_tokens, spec.length_jitter);
        let output = sample_length(&mut rng, task.avg_output_tokens, spec.length_jitter);
        requests.push(Request::new(id as u64, Arc::clone(task), clock, input, output));
    }
    Ok(requests)
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trace row {row}: {reason}")]
    Row { row: usize, reason: String },
}

/// One row of a replayable workload trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub id: u64,
    pub task: String,
    pub arrival_time: Seconds,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

pub fn write_trace<W: io::Write>(writer: W, requests: &[Request]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in requests {
        w.serialize(TraceRow {
            id: r.id,
            task: r.task.name.clone(),
            arrival_time: r.arrival_time,
            input_tokens: r.input_tokens,
            output_tokens: r.max_output_tokens,
        })?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a trace, resolving task names against `tasks`.
pub fn read_trace<R: io::Read>(reader: R, tasks: &[TaskProfile]) -> Result<Vec<Request>, TraceError> {
    let lookup: HashMap<&str, Arc<TaskProfile>> =
        tasks.iter().map(|t| (t.name.as_str(), Arc::new(t.clone()))).collect();
    let mut out: Vec<Request> = Vec::new();
    for (row, rec) in csv::Reader::from_reader(reader).deserialize::<TraceRow>().enumerate() {
        let rec = rec?;
        let task = lookup
            .get(rec.task.as_str())
            .cloned()
            .ok_or_else(|| ConfigError::UnknownTask(rec.task.clone()))?;
        if let Some(prev) = out.last() {
            if rec.arrival_time < prev.arrival_time {
                return Err(TraceError::Row { row, reason: "arrivals must be non-decreasing".into() });
            }
        }
        if !(rec.arrival_time.is_finite() && rec.arrival_time >= 0.0) {
            return Err(TraceError::Row { row, reason: "arrival_time must be >= 0".into() });
        }
        out.push(Request::new(rec.id, task, rec.arrival_time, rec.input_tokens, rec.output_tokens));
    }
    Ok(out)
}
