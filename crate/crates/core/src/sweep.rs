//! Grid sweeps over (mix, rps, scheduler) cells with repeated seeds, per-cell
//! averaging, best-static selection and per-mix summaries.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::domain::{ConfigError, SchedulerConfig, SchedulerMode, WorkloadMix};
use crate::estimator::SpeedModel;
use crate::metrics::{cv, mean, ratio_to_sla};
use crate::simloop::{run, SimConfig, SimError};

/// One scheduler column of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerVariant {
    Static { cap: usize },
    Saber { label: String, model: SpeedModel },
}

impl SchedulerVariant {
    pub fn label(&self) -> &str {
        match self {
            SchedulerVariant::Static { .. } => "static",
            SchedulerVariant::Saber { label, .. } => label,
        }
    }

    pub fn static_cap(&self) -> Option<usize> {
        match self {
            SchedulerVariant::Static { cap } => Some(*cap),
            SchedulerVariant::Saber { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub mixes: Vec<WorkloadMix>,
    pub rps: Vec<f64>,
    pub variants: Vec<SchedulerVariant>,
}

impl SweepGrid {
    /// Static caps 10, 20, .., 100.
    pub fn default_caps() -> Vec<usize> {
        (1..=10).map(|i| i * 10).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mixes.is_empty() || self.rps.is_empty() || self.variants.is_empty() {
            return Err(ConfigError::invalid("grid", "every axis needs at least one value"));
        }
        Ok(())
    }

    /// Cells in grid order: mix, then rps, then variant.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.mixes.len() * self.rps.len() * self.variants.len());
        for m in 0..self.mixes.len() {
            for r in 0..self.rps.len() {
                for v in 0..self.variants.len() {
                    out.push((m, r, v));
                }
            }
        }
        out
    }
}

/// Long-format result row: one per (cell, repeat).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mix: String,
    pub rps: f64,
    pub scheduler: String,
    pub static_cap: Option<usize>,
    pub repeat_seed: u64,
    pub goodput: f64,
    pub ratio_mean: Option<f64>,
    pub ratio_std: Option<f64>,
    pub cv: Option<f64>,
}

/// Repeat-averaged cell, keeping every completed request's ratio for pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub mix: String,
    pub rps: f64,
    pub scheduler: String,
    pub static_cap: Option<usize>,
    pub goodput: f64,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestStatic {
    pub mix: String,
    pub rps: f64,
    pub cap: usize,
    pub goodput: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellSummary>,
    pub best_static: Vec<BestStatic>,
}

/// How cells are scheduled onto threads. Results never depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Global rayon pool; sequential when built without `parallel`.
    #[default]
    Parallel,
    /// Dedicated pool of N threads; sequential when built without `parallel`.
    Threads(usize),
}

struct Job {
    cell: usize,
    axes: (usize, usize, usize),
    config: SimConfig,
}

struct JobResult {
    row: SweepRow,
    ratios: Vec<f64>,
}

fn run_job(job: &Job, grid: &SweepGrid) -> Result<JobResult, SimError> {
    let (m, r, v) = job.axes;
    let out = run(&job.config)?;
    let variant = &grid.variants[v];
    Ok(JobResult {
        row: SweepRow {
            mix: grid.mixes[m].name.clone(),
            rps: grid.rps[r],
            scheduler: variant.label().to_string(),
            static_cap: variant.static_cap(),
            repeat_seed: job.config.seed,
            goodput: out.metrics.goodput,
            ratio_mean: out.metrics.ratio_mean,
            ratio_std: out.metrics.ratio_std,
            cv: out.metrics.cv,
        },
        ratios: ratio_to_sla(&out.records),
    })
}

fn execute(jobs: &[Job], grid: &SweepGrid, execution: Execution) -> Result<Vec<JobResult>, SimError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let par = || jobs.par_iter().map(|j| run_job(j, grid)).collect::<Result<Vec<_>, _>>();
        match execution {
            Execution::Sequential => {}
            Execution::Parallel => return par(),
            Execution::Threads(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| ConfigError::invalid("jobs", e.to_string()))?;
                return pool.install(par);
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = execution;
    jobs.iter().map(|j| run_job(j, grid)).collect()
}

/// Runs every grid cell `base.repeats` times with seeds `base.seed + i`.
/// `base` supplies workload size, jitter, engine, tick, window and horizon;
/// its own scheduler mode and model are ignored.
pub fn sweep(grid: &SweepGrid, base: &SimConfig, execution: Execution) -> Result<SweepResult, SimError> {
    grid.validate()?;
    base.workload.validate()?;
    base.scheduler.validate()?;
    if base.repeats < 1 {
        return Err(ConfigError::invalid("repeats", "must be >= 1").into());
    }
    let cells = grid.cells();
    let mut jobs = Vec::with_capacity(cells.len() * base.repeats);
    for (i, &(m, r, v)) in cells.iter().enumerate() {
        for rep in 0..base.repeats {
            let mut config = base.reseeded(base.seed.wrapping_add(rep as u64));
            config.record_traces = false;
            config.workload.mix = grid.mixes[m].clone();
            config.workload.rps = grid.rps[r];
            match &grid.variants[v] {
                SchedulerVariant::Static { cap } => {
                    config.scheduler = SchedulerConfig { tick: base.scheduler.tick, ..SchedulerConfig::fixed(*cap) };
                    config.model = None;
                }
                SchedulerVariant::Saber { model, .. } => {
                    config.scheduler = SchedulerConfig { mode: SchedulerMode::Saber, ..base.scheduler.clone() };
                    config.model = Some(model.clone());
                }
            }
            jobs.push(Job { cell: i, axes: (m, r, v), config });
        }
    }
    let results = execute(&jobs, grid, execution)?;

    let mut summaries: Vec<CellSummary> = Vec::with_capacity(cells.len());
    let mut rows = Vec::with_capacity(results.len());
    for (job, res) in jobs.iter().zip(results) {
        if summaries.len() == job.cell {
            summaries.push(CellSummary {
                mix: res.row.mix.clone(),
                rps: res.row.rps,
                scheduler: res.row.scheduler.clone(),
                static_cap: res.row.static_cap,
                goodput: 0.0,
                ratios: Vec::new(),
            });
        }
        let cell = &mut summaries[job.cell];
        cell.goodput += res.row.goodput / base.repeats as f64;
        cell.ratios.extend(res.ratios);
        rows.push(res.row);
    }
    let best_static = best_static(&summaries);
    Ok(SweepResult { rows, cells: summaries, best_static })
}

/// Per-(mix, rps) static cell with the highest goodput; ties go to the smaller cap.
pub fn best_static(cells: &[CellSummary]) -> Vec<BestStatic> {
    let mut best: Vec<BestStatic> = Vec::new();
    for c in cells {
        let Some(cap) = c.static_cap else { continue };
        match best.iter_mut().find(|b| b.mix == c.mix && b.rps == c.rps) {
            Some(b) => {
                if c.goodput > b.goodput || (c.goodput == b.goodput && cap < b.cap) {
                    b.cap = cap;
                    b.goodput = c.goodput;
                }
            }
            None => best.push(BestStatic { mix: c.mix.clone(), rps: c.rps, cap, goodput: c.goodput }),
        }
    }
    best
}

/// Which ratios feed the per-mix CV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Every completed request's ratio, pooled over the RPS sweep.
    #[default]
    Pooled,
    /// One mean ratio per RPS level.
    PerRpsMeans,
}

/// SABER variant versus the per-RPS best static configuration on one mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSummary {
    pub mix: String,
    pub scheduler: String,
    pub saber_goodput: f64,
    pub best_static_goodput: f64,
    pub goodput_delta: f64,
    pub cv_saber: Option<f64>,
    pub cv_best_static: Option<f64>,
    /// Distinct best caps across the RPS sweep.
    pub best_caps: Vec<usize>,
}

fn cv_of(cells: &[&CellSummary], mode: CvMode) -> Option<f64> {
    let values: Vec<f64> = match mode {
        CvMode::Pooled => cells.iter().flat_map(|c| c.ratios.iter().copied()).collect(),
        CvMode::PerRpsMeans => cells.iter().filter_map(|c| mean(&c.ratios)).collect(),
    };
    cv(&values).ok()
}

/// One summary per (mix, SABER variant), in grid order.
pub fn mix_summary(result: &SweepResult, mode: CvMode) -> Vec<MixSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in result.cells.iter().filter(|c| c.static_cap.is_none()) {
        let key = (c.mix.clone(), c.scheduler.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(mix, scheduler)| {
            let saber: Vec<&CellSummary> =
                result.cells.iter().filter(|c| c.mix == mix && c.scheduler == scheduler).collect();
            let best: Vec<&CellSummary> = saber
                .iter()
                .filter_map(|s| {
                    let b = result.best_static.iter().find(|b| b.mix == mix && b.rps == s.rps)?;
                    result.cells.iter().find(|c| c.mix == mix && c.rps == s.rps && c.static_cap == Some(b.cap))
                })
                .collect();
            let saber_goodput = mean(&saber.iter().map(|c| c.goodput).collect::<Vec<_>>()).unwrap_or(0.0);
            let best_static_goodput = mean(&best.iter().map(|c| c.goodput).collect::<Vec<_>>()).unwrap_or(0.0);
            let mut caps: BTreeMap<usize, ()> = BTreeMap::new();
            for b in result.best_static.iter().filter(|b| b.mix == mix) {
                caps.insert(b.cap, ());
            }
            MixSummary {
                cv_saber: cv_of(&saber, mode),
                cv_best_static: cv_of(&best, mode),
                goodput_delta: saber_goodput - best_static_goodput,
                saber_goodput,
                best_static_goodput,
                best_caps: caps.into_keys().collect(),
                mix,
                scheduler,
            }
        })
        .collect()
}

pub fn write_rows<W: io::Write>(writer: W, rows: &[SweepRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: io::Read>(reader: R) -> Result<Vec<SweepRow>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}
