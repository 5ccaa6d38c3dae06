//! Load-to-speed estimation functions `v = f(L)`.
//!
//! Three families are supported:
//!
//! * `usl`: `v1 / (1 + sigma (L - 1) + kappa L (L - 1))`
//! * `logistic`: `vmax / (1 + exp(k (L - L0)))`
//! * `linear`: `max(a L + b, 1e-6)`
//!
//! Fitting is nonlinear least squares (closed form for `linear`), restarted
//! from five deterministic starting points.

mod lm;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use lm::{CurveModel, LmOptions};

/// Lower bound on linear-model predictions, in tokens/second.
pub const SPEED_FLOOR: f64 = 1e-6;

/// Highest load checked when verifying that a fitted model is non-increasing.
const MONOTONE_CHECK_MAX_LOAD: u32 = 1000;

/// R² margin within which two families are considered tied.
pub const R2_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Usl,
    Logistic,
    Linear,
}

impl ModelFamily {
    /// All families in tie-break order.
    pub const ALL: [ModelFamily; 3] = [ModelFamily::Usl, ModelFamily::Logistic, ModelFamily::Linear];

    pub fn n_params(self) -> usize {
        match self {
            ModelFamily::Usl | ModelFamily::Logistic => 3,
            ModelFamily::Linear => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Usl => "usl",
            ModelFamily::Logistic => "logistic",
            ModelFamily::Linear => "linear",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelFamily {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "usl" => Ok(ModelFamily::Usl),
            "logistic" => Ok(ModelFamily::Logistic),
            "linear" => Ok(ModelFamily::Linear),
            other => Err(EstimatorError::InvalidModel(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("load must be >= 1, got {0}")]
    LoadOutOfDomain(usize),
    #[error("no samples")]
    EmptySamples,
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{family} fit needs at least {needed} samples over {needed} distinct loads, got {samples} samples over {distinct} loads")]
    TooFewSamples { family: ModelFamily, needed: usize, samples: usize, distinct: usize },
    #[error("invalid sample (load {load}, speed {speed}): load must be >= 1 and speed > 0")]
    InvalidSample { load: u32, speed: f64 },
    #[error("{family} fit did not converge; best params {best_params:?} with SSE {best_sse}")]
    NoConvergence { family: ModelFamily, best_params: Vec<f64>, best_sse: f64 },
    #[error("{family} fit is increasing in load (params {params:?})")]
    NotMonotone { family: ModelFamily, params: Vec<f64> },
}

/// One profiling observation: per-request speed at a given concurrency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSpeedSample {
    pub load: u32,
    /// Tokens/second.
    pub speed: f64,
}

impl LoadSpeedSample {
    pub fn new(load: u32, speed: f64) -> Self {
        LoadSpeedSample { load, speed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpeedModelRepr {
    family: ModelFamily,
    params: Vec<f64>,
    #[serde(default)]
    fit_r2: Option<f64>,
}

/// A load-to-speed estimation function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpeedModelRepr", into = "SpeedModelRepr")]
pub struct SpeedModel {
    family: ModelFamily,
    params: Vec<f64>,
    fit_r2: Option<f64>,
}

impl TryFrom<SpeedModelRepr> for SpeedModel {
    type Error = EstimatorError;

    fn try_from(r: SpeedModelRepr) -> Result<Self, Self::Error> {
        let model = SpeedModel::from_params(r.family, r.params)?;
        Ok(SpeedModel { fit_r2: r.fit_r2, ..model })
    }
}

impl From<SpeedModel> for SpeedModelRepr {
    fn from(m: SpeedModel) -> Self {
        SpeedModelRepr { family: m.family, params: m.params, fit_r2: m.fit_r2 }
    }
}

impl SpeedModel {
    pub fn from_params(family: ModelFamily, params: Vec<f64>) -> Result<Self, EstimatorError> {
        if params.len() != family.n_params() {
            return Err(EstimatorError::InvalidModel(format!(
                "{family} expects {} params, got {}",
                family.n_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(EstimatorError::InvalidModel("params must be finite".into()));
        }
        match family {
            ModelFamily::Usl => {
                if params[0] <= 0.0 || params[1] < 0.0 || params[2] < 0.0 {
                    return Err(EstimatorError::InvalidModel(
                        "usl requires v1 > 0, sigma >= 0, kappa >= 0".into(),
                    ));
                }
            }
            ModelFamily::Logistic => {
                if params[0] <= 0.0 {
                    return Err(EstimatorError::InvalidModel("logistic requires vmax > 0".into()));
                }
            }
            ModelFamily::Linear => {}
        }
        Ok(SpeedModel { family, params, fit_r2: None })
    }

    pub fn usl(v1: f64, sigma: f64, kappa: f64) -> Result<Self, EstimatorError> {
        Self::from_params(ModelFamily::Usl, vec![v1, sigma, kappa])
    }

    pub fn logistic(vmax: f64, k: f64, l0: f64) -> Result<Self, EstimatorError> {
        Self::from_params(ModelFamily::Logistic, vec![vmax, k, l0])
    }

    pub fn linear(a: f64, b: f64) -> Result<Self, EstimatorError> {
        Self::from_params(ModelFamily::Linear, vec![a, b])
    }

    /// A load-independent speed law.
    pub fn constant(speed: f64) -> Result<Self, EstimatorError> {
        Self::usl(speed, 0.0, 0.0)
    }

    /// The engine's default ground truth: `usl(100, 0.05, 0.001)`.
    pub fn default_ground_truth() -> Self {
        Self::usl(100.0, 0.05, 0.001).expect("valid default")
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn fit_r2(&self) -> Option<f64> {
        self.fit_r2
    }

    /// Speed at integer load `load`.
    pub fn predict(&self, load: usize) -> Result<f64, EstimatorError> {
        if load < 1 {
            return Err(EstimatorError::LoadOutOfDomain(load));
        }
        Ok(self.speed_at(load as f64))
    }

    /// Speed at a (possibly fractional) load. No domain check.
    pub fn speed_at(&self, load: f64) -> f64 {
        eval(self.family, &self.params, load)
    }

    /// Fastest speed the model admits, reached with a single request.
    pub fn max_speed(&self) -> f64 {
        self.speed_at(1.0)
    }

    fn is_non_increasing(&self) -> bool {
        let mut prev = self.speed_at(1.0);
        for load in 2..=MONOTONE_CHECK_MAX_LOAD {
            let v = self.speed_at(f64::from(load));
            if v > prev * (1.0 + 1e-12) + 1e-300 {
                return false;
            }
            prev = v;
        }
        true
    }
}

fn eval(family: ModelFamily, p: &[f64], load: f64) -> f64 {
    match family {
        ModelFamily::Usl => p[0] / usl_denominator(p, load),
        ModelFamily::Logistic => p[0] * logistic_gate(p[1] * (load - p[2])),
        ModelFamily::Linear => (p[0] * load + p[1]).max(SPEED_FLOOR),
    }
}

fn usl_denominator(p: &[f64], load: f64) -> f64 {
    1.0 + p[1] * (load - 1.0) + p[2] * load * (load - 1.0)
}

/// `1 / (1 + exp(z))`, evaluated without overflow.
fn logistic_gate(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

struct UslCurve;

impl CurveModel for UslCurve {
    fn n_params(&self) -> usize {
        3
    }
    fn value(&self, p: &[f64], x: f64) -> f64 {
        eval(ModelFamily::Usl, p, x)
    }
    fn gradient(&self, p: &[f64], x: f64, out: &mut [f64]) {
        let d = usl_denominator(p, x);
        out[0] = 1.0 / d;
        out[1] = -p[0] * (x - 1.0) / (d * d);
        out[2] = -p[0] * x * (x - 1.0) / (d * d);
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(1e-9, f64::INFINITY), (0.0, f64::INFINITY), (0.0, f64::INFINITY)]
    }
}

/// On convex decreasing data the unconstrained logistic optimum runs off to
/// an infinite ceiling; capping it keeps the fit a finite boundary point.
const LOGISTIC_CEILING_FACTOR: f64 = 10.0;

struct LogisticCurve {
    max_ceiling: f64,
}

impl CurveModel for LogisticCurve {
    fn n_params(&self) -> usize {
        3
    }
    fn value(&self, p: &[f64], x: f64) -> f64 {
        eval(ModelFamily::Logistic, p, x)
    }
    fn gradient(&self, p: &[f64], x: f64, out: &mut [f64]) {
        let s = logistic_gate(p[1] * (x - p[2]));
        let slope = s * (1.0 - s);
        out[0] = s;
        out[1] = -p[0] * slope * (x - p[2]);
        out[2] = p[0] * slope * p[1];
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(1e-9, self.max_ceiling), (0.0, f64::INFINITY), (f64::NEG_INFINITY, f64::INFINITY)]
    }
}

fn distinct_loads(samples: &[LoadSpeedSample]) -> usize {
    let mut loads: Vec<u32> = samples.iter().map(|s| s.load).collect();
    loads.sort_unstable();
    loads.dedup();
    loads.len()
}

/// Fits `family` to `samples` by least squares and records the fit's R².
pub fn fit(samples: &[LoadSpeedSample], family: ModelFamily) -> Result<SpeedModel, FitError> {
    let needed = family.n_params();
    let distinct = distinct_loads(samples);
    if samples.len() < needed || distinct < needed {
        return Err(FitError::TooFewSamples { family, needed, samples: samples.len(), distinct });
    }
    if let Some(bad) = samples.iter().find(|s| s.load < 1 || !(s.speed.is_finite() && s.speed > 0.0)) {
        return Err(FitError::InvalidSample { load: bad.load, speed: bad.speed });
    }
    let xs: Vec<f64> = samples.iter().map(|s| f64::from(s.load)).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.speed).collect();

    let params = match family {
        ModelFamily::Linear => fit_linear(&xs, &ys),
        ModelFamily::Usl => multi_start(family, &UslCurve, &xs, &ys, &usl_starts(&xs, &ys))?,
        ModelFamily::Logistic => {
            let max_ceiling = LOGISTIC_CEILING_FACTOR * ys.iter().copied().fold(0.0, f64::max);
            multi_start(family, &LogisticCurve { max_ceiling }, &xs, &ys, &logistic_starts(&xs, &ys))?
        }
    };
    let mut model = SpeedModel::from_params(family, params.clone())
        .map_err(|_| FitError::NoConvergence { family, best_params: params.clone(), best_sse: f64::NAN })?;
    if !model.is_non_increasing() {
        return Err(FitError::NotMonotone { family, params });
    }
    model.fit_r2 = Some(r_squared(&model, samples).expect("samples are non-empty"));
    Ok(model)
}

fn multi_start<M: CurveModel>(
    family: ModelFamily,
    curve: &M,
    xs: &[f64],
    ys: &[f64],
    starts: &[Vec<f64>],
) -> Result<Vec<f64>, FitError> {
    let mut best: Option<lm::LmOutcome> = None;
    let mut best_any: Option<lm::LmOutcome> = None;
    for start in starts {
        let out = lm::minimize(curve, xs, ys, start, LmOptions::default());
        if !out.sse.is_finite() {
            continue;
        }
        let slot = if out.converged { &mut best } else { &mut best_any };
        if slot.as_ref().is_none_or(|b| out.sse < b.sse) {
            *slot = Some(out);
        }
    }
    match (best, best_any) {
        (Some(b), _) => Ok(b.params),
        (None, Some(b)) => Err(FitError::NoConvergence { family, best_params: b.params, best_sse: b.sse }),
        (None, None) => Err(FitError::NoConvergence { family, best_params: Vec::new(), best_sse: f64::NAN }),
    }
}

fn fit_linear(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let a = sxy / sxx;
    vec![a, my - a * mx]
}

/// Starting points for the USL fit. The first solves the linearised problem
/// `1/v = (1 + sigma (L-1) + kappa L (L-1)) / v1` exactly.
fn usl_starts(xs: &[f64], ys: &[f64]) -> Vec<Vec<f64>> {
    let vmax = ys.iter().copied().fold(0.0, f64::max);
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let row = Vector3::new(1.0, x - 1.0, x * (x - 1.0));
        ata += row * row.transpose();
        atb += row / y;
    }
    let linearised = ata
        .lu()
        .solve(&atb)
        .filter(|c| c[0] > 0.0 && c.iter().all(|v| v.is_finite()))
        .map(|c| vec![1.0 / c[0], (c[1] / c[0]).max(0.0), (c[2] / c[0]).max(0.0)])
        .unwrap_or_else(|| vec![vmax, 0.05, 0.001]);
    vec![
        linearised.clone(),
        vec![linearised[0], linearised[1] * 2.0 + 1e-3, linearised[2] * 0.5],
        vec![vmax, 0.01, 1e-4],
        vec![vmax, 0.1, 1e-3],
        vec![vmax * 1.2, 0.0, 1e-2],
    ]
}

/// Starting points for the logistic fit: for each candidate ceiling the
/// logit `ln(vmax / v - 1) = k (L - L0)` is solved by ordinary regression.
fn logistic_starts(xs: &[f64], ys: &[f64]) -> Vec<Vec<f64>> {
    let vobs = ys.iter().copied().fold(0.0, f64::max);
    let mean_x = xs.iter().sum::<f64>() / xs.len() as f64;
    [1.01, 1.1, 1.5, 2.0, 4.0]
        .iter()
        .map(|scale| {
            let vmax = vobs * scale;
            let zs: Vec<f64> = ys.iter().map(|&y| (vmax / y - 1.0).max(1e-9).ln()).collect();
            let line = fit_linear(xs, &zs);
            let (k, intercept) = (line[0], line[1]);
            if k.is_finite() && k > 1e-9 {
                vec![vmax, k, -intercept / k]
            } else {
                vec![vmax, 0.01, mean_x]
            }
        })
        .collect()
}

/// Coefficient of determination of `model` on `samples`.
///
/// When all speeds are equal (zero total variance) the result is 1 if the
/// model reproduces them exactly and 0 otherwise.
pub fn r_squared(model: &SpeedModel, samples: &[LoadSpeedSample]) -> Result<f64, EstimatorError> {
    let observed: Vec<f64> = samples.iter().map(|s| s.speed).collect();
    let predicted: Vec<f64> = samples.iter().map(|s| model.speed_at(f64::from(s.load))).collect();
    r_squared_of(&observed, &predicted)
}

/// R² of `predicted` against `observed`, with the same zero-variance convention.
pub fn r_squared_of(observed: &[f64], predicted: &[f64]) -> Result<f64, EstimatorError> {
    if observed.is_empty() || observed.len() != predicted.len() {
        return Err(EstimatorError::EmptySamples);
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = observed.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Fastest speed of `model`; see [`SpeedModel::max_speed`].
pub fn max_speed(model: &SpeedModel) -> f64 {
    model.max_speed()
}
