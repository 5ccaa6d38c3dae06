//! Outcome analytics: goodput, completion-time/SLA ratio, coefficient of
//! variation and per-task completion-time CDFs.
//!
//! Requests that never completed are counted in goodput and CDF
//! denominators but have no ratio.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Seconds;

/// Tolerance of the goodput/CDF consistency check.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("mean is zero, coefficient of variation undefined")]
    ZeroMean,
    #[error("goodput {goodput} disagrees with CDF mass at SLA {cdf_mass}")]
    Inconsistent { goodput: f64, cdf_mass: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalTier {
    High,
    Low,
}

/// Outcome of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub request_id: u64,
    pub task: String,
    pub arrival_time: Seconds,
    pub admit_time: Option<Seconds>,
    pub completion_time: Option<Seconds>,
    pub sla: Seconds,
    pub met_sla: bool,
    pub final_tier: FinalTier,
}

impl RunRecord {
    pub fn latency(&self) -> Option<Seconds> {
        self.completion_time.map(|c| c - self.arrival_time)
    }

    /// `met_sla` as derived from the timestamps.
    pub fn meets_sla(completion_time: Option<Seconds>, arrival_time: Seconds, sla: Seconds) -> bool {
        completion_time.is_some_and(|c| c - arrival_time <= sla)
    }
}

pub fn write_records<W: io::Write>(writer: W, records: &[RunRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: io::Read>(reader: R) -> Result<Vec<RunRecord>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

/// Fraction of records that met their SLA.
pub fn goodput(records: &[RunRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let met = records.iter().filter(|r| r.met_sla).count();
    Ok(met as f64 / records.len() as f64)
}

/// Latency divided by SLA for every completed record, in record order.
pub fn ratio_to_sla(records: &[RunRecord]) -> Vec<f64> {
    records.iter().filter_map(|r| r.latency().map(|l| l / r.sla)).collect()
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> Option<f64> {
    let mu = mean(values)?;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / values.len() as f64;
    Some(var.sqrt())
}

/// Coefficient of variation `sigma / mu` with population sigma.
pub fn cv(values: &[f64]) -> Result<f64, MetricsError> {
    let mu = mean(values).ok_or(MetricsError::Empty)?;
    if mu == 0.0 {
        return Err(MetricsError::ZeroMean);
    }
    Ok(population_std(values).expect("non-empty") / mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub latency: Seconds,
    pub fraction: f64,
}

/// Empirical completion-time CDF of one task.
///
/// Fractions are over all issued requests of the task, so the curve
/// plateaus below 1 when some never complete. Tied latencies collapse to one
/// point.
pub fn cdf(records: &[RunRecord], task: &str) -> Vec<CdfPoint> {
    let issued = records.iter().filter(|r| r.task == task).count();
    let mut latencies: Vec<f64> = records.iter().filter(|r| r.task == task).filter_map(RunRecord::latency).collect();
    latencies.sort_by(f64::total_cmp);
    let mut points: Vec<CdfPoint> = Vec::with_capacity(latencies.len());
    for (i, latency) in latencies.into_iter().enumerate() {
        let fraction = (i + 1) as f64 / issued as f64;
        match points.last_mut() {
            Some(last) if last.latency == latency => last.fraction = fraction,
            _ => points.push(CdfPoint { latency, fraction }),
        }
    }
    points
}

/// Height of a CDF at `x` (right-continuous step function).
pub fn cdf_mass_at(points: &[CdfPoint], x: Seconds) -> f64 {
    points.iter().take_while(|p| p.latency <= x).last().map_or(0.0, |p| p.fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub issued: usize,
    pub goodput: f64,
    pub cdf_points: Vec<CdfPoint>,
}

/// Aggregate metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub goodput: f64,
    pub ratio_mean: Option<f64>,
    pub ratio_std: Option<f64>,
    pub cv: Option<f64>,
    pub per_task: BTreeMap<String, TaskMetrics>,
}

impl MetricsReport {
    /// Computes every metric and checks that goodput equals the
    /// issue-weighted CDF mass at each task's SLA.
    pub fn from_records(records: &[RunRecord]) -> Result<Self, MetricsError> {
        let goodput = goodput(records)?;
        let ratios = ratio_to_sla(records);
        let mut per_task = BTreeMap::new();
        let mut sla_of: BTreeMap<&str, Seconds> = BTreeMap::new();
        for r in records {
            sla_of.entry(r.task.as_str()).or_insert(r.sla);
        }
        let total = records.len() as f64;
        let mut cdf_mass = 0.0;
        for (&task, &sla) in &sla_of {
            let subset: Vec<RunRecord> = records.iter().filter(|r| r.task == task).cloned().collect();
            let points = cdf(records, task);
            cdf_mass += subset.len() as f64 / total * cdf_mass_at(&points, sla);
            per_task.insert(
                task.to_string(),
                TaskMetrics { issued: subset.len(), goodput: self::goodput(&subset)?, cdf_points: points },
            );
        }
        if (cdf_mass - goodput).abs() > IDENTITY_TOLERANCE {
            return Err(MetricsError::Inconsistent { goodput, cdf_mass });
        }
        Ok(MetricsReport {
            goodput,
            ratio_mean: mean(&ratios),
            ratio_std: population_std(&ratios),
            cv: cv(&ratios).ok(),
            per_task,
        })
    }
}
