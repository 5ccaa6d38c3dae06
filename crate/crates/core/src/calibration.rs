//! Offline phase: profile the engine with bursts of increasing concurrency,
//! harvest (load, speed) samples and pick the best-fitting speed model.

use std::collections::BTreeSet;
use std::io;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ConfigError, Request, SchedulerConfig, TaskProfile, WorkloadMix};
use crate::engine::{Completion, EngineConfig, EngineError, EngineState};
use crate::estimator::{fit, r_squared, LoadSpeedSample, ModelFamily, SpeedModel, R2_TIE_EPS};
use crate::scheduler::{static_step, SchedulerError, TwoTierQueue};
use crate::workload::sample_length;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("insufficient distinct loads: {found} (need at least 3)")]
    InsufficientLoads { found: usize },
    #[error("no model family could be fitted")]
    NoFamilyFitted,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

/// How requests inside one profiling burst are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurstComposition {
    /// One task and one length pair per burst, so concurrency stays constant.
    #[default]
    Homogeneous,
    /// Task and lengths drawn per request.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilingSpec {
    pub mix: WorkloadMix,
    /// Largest burst size, `L_max`.
    pub max_load: usize,
    pub target_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub length_jitter: f64,
    #[serde(default)]
    pub composition: BurstComposition,
}

impl ProfilingSpec {
    pub const DEFAULT_MAX_LOAD: usize = 50;
    pub const DEFAULT_TARGET_SAMPLES: usize = 1000;

    pub fn new(mix: WorkloadMix, seed: u64) -> Self {
        ProfilingSpec {
            mix,
            max_load: Self::DEFAULT_MAX_LOAD,
            target_samples: Self::DEFAULT_TARGET_SAMPLES,
            seed,
            length_jitter: 0.2,
            composition: BurstComposition::Homogeneous,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mix.validate()?;
        if self.max_load < 1 {
            return Err(ConfigError::invalid("max_load", "must be >= 1"));
        }
        if self.target_samples < 1 {
            return Err(ConfigError::invalid("target_samples", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return Err(ConfigError::invalid("length_jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Turns a finished request into a sample, if it decoded for a positive time.
pub fn sample_of(done: &Completion) -> Option<LoadSpeedSample> {
    let duration = done.decode_duration();
    if duration <= 0.0 || done.request.max_output_tokens == 0 {
        return None;
    }
    let load = done.mean_load.round().max(1.0) as u32;
    Some(LoadSpeedSample::new(load, f64::from(done.request.max_output_tokens) / duration))
}

/// Runs bursts of sizes 1, 2, .., `max_load`, 1, 2, .. through the static
/// scheduler until at least `target_samples` completions were observed.
pub fn profile(engine_config: &EngineConfig, spec: &ProfilingSpec) -> Result<Vec<LoadSpeedSample>, CalibrationError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = WeightedIndex::new(spec.mix.entries.iter().map(|e| e.fraction))
        .map_err(|e| ConfigError::invalid("mix", e.to_string()))?;
    let tasks: Vec<Arc<TaskProfile>> = spec.mix.entries.iter().map(|e| Arc::new(e.task.clone())).collect();
    let cap = SchedulerConfig::fixed(10 * spec.max_load);

    let mut engine = EngineState::new(engine_config.clone());
    let mut queue = TwoTierQueue::new();
    let mut samples = Vec::with_capacity(spec.target_samples);
    let mut next_id = 0u64;
    let mut size = 1usize;
    while samples.len() < spec.target_samples {
        let now = engine.clock();
        let mut draw = || {
            let task = &tasks[weights.sample(&mut rng)];
            let input = sample_length(&mut rng, task.avg_input_tokens, spec.length_jitter);
            let output = sample_length(&mut rng, task.avg_output_tokens, spec.length_jitter);
            (Arc::clone(task), input, output)
        };
        let shared = draw();
        for i in 0..size {
            let (task, input, output) = match spec.composition {
                BurstComposition::Homogeneous => shared.clone(),
                BurstComposition::Mixed if i == 0 => shared.clone(),
                BurstComposition::Mixed => draw(),
            };
            queue.enqueue(Request::new(next_id, task, now, input, output))?;
            next_id += 1;
        }
        static_step(&mut queue, &mut engine, &cap, now, None)?;
        samples.extend(engine.drain()?.iter().filter_map(sample_of));
        size = size % spec.max_load + 1;
    }
    Ok(samples)
}

/// One family's outcome in the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFit {
    pub family: ModelFamily,
    pub model: Option<SpeedModel>,
    pub r2: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub best: SpeedModel,
    pub all: Vec<FamilyFit>,
}

impl CalibrationReport {
    pub fn fit_of(&self, family: ModelFamily) -> Option<&FamilyFit> {
        self.all.iter().find(|f| f.family == family)
    }
}

pub fn distinct_loads(samples: &[LoadSpeedSample]) -> usize {
    samples.iter().map(|s| s.load).collect::<BTreeSet<_>>().len()
}

/// Fits every family and selects the highest R²; near-ties go to the
/// earlier family in `usl, logistic, linear` order.
pub fn calibrate(samples: &[LoadSpeedSample]) -> Result<CalibrationReport, CalibrationError> {
    let found = distinct_loads(samples);
    if found < 3 {
        return Err(CalibrationError::InsufficientLoads { found });
    }
    let mut all = Vec::with_capacity(ModelFamily::ALL.len());
    let mut best: Option<(SpeedModel, f64)> = None;
    for family in ModelFamily::ALL {
        let outcome = fit(samples, family)
            .map_err(|e| e.to_string())
            .and_then(|m| r_squared(&m, samples).map(|r2| (m, r2)).map_err(|e| e.to_string()));
        match outcome {
            Ok((model, r2)) => {
                if best.as_ref().is_none_or(|(_, b)| r2 > b + R2_TIE_EPS) {
                    best = Some((model.clone(), r2));
                }
                all.push(FamilyFit { family, model: Some(model), r2: Some(r2), error: None });
            }
            Err(error) => all.push(FamilyFit { family, model: None, r2: None, error: Some(error) }),
        }
    }
    let (best, _) = best.ok_or(CalibrationError::NoFamilyFitted)?;
    Ok(CalibrationReport { best, all })
}

pub fn write_samples<W: io::Write>(writer: W, samples: &[LoadSpeedSample]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<R: io::Read>(reader: R) -> Result<Vec<LoadSpeedSample>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{catalog_task, MixEntry, CODE_QNA};

    fn qna_mix() -> WorkloadMix {
        WorkloadMix::new("qna", vec![MixEntry { task: catalog_task(CODE_QNA).unwrap(), fraction: 1.0 }]).unwrap()
    }

    fn free_prefill(model: SpeedModel) -> EngineConfig {
        EngineConfig::new(model, None)
    }

    #[test]
    fn single_request_burst_runs_at_v1() {
        let mut spec = ProfilingSpec::new(qna_mix(), 1);
        spec.target_samples = 1;
        let samples = profile(&EngineConfig::default(), &spec).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].load, 1);
        assert!((samples[0].speed - 100.0).abs() < 1e-9);
    }

    #[test]
    fn constant_law_burst_of_ten() {
        let mut spec = ProfilingSpec::new(qna_mix(), 3);
        spec.max_load = 10;
        spec.target_samples = 10;
        let cfg = free_prefill(SpeedModel::constant(50.0).unwrap());
        let samples = profile(&cfg, &spec).unwrap();
        // bursts 1..4 yield 10 samples; run the size-10 burst on its own
        assert_eq!(samples.len(), 10);

        let mut engine = EngineState::new(cfg);
        let task = Arc::new(catalog_task(CODE_QNA).unwrap());
        for id in 0..10 {
            engine.admit(Request::new(id, Arc::clone(&task), 0.0, 100, 40), 0.0).unwrap();
        }
        let samples: Vec<_> = engine.drain().unwrap().iter().filter_map(sample_of).collect();
        assert_eq!(samples.len(), 10);
        for s in samples {
            assert_eq!(s.load, 10);
            assert!((s.speed - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn profiling_is_deterministic() {
        let spec = ProfilingSpec::new(WorkloadMix::w3(), 9);
        let a = profile(&EngineConfig::default(), &spec).unwrap();
        let b = profile(&EngineConfig::default(), &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.len() >= 1000);
    }

    #[test]
    fn homogeneous_bursts_sample_the_law_exactly() {
        let mut spec = ProfilingSpec::new(WorkloadMix::w1(), 4);
        spec.target_samples = 200;
        let truth = SpeedModel::default_ground_truth();
        for s in profile(&EngineConfig::default(), &spec).unwrap() {
            let want = truth.predict(s.load as usize).unwrap();
            assert!((s.speed - want).abs() / want < 1e-9, "{s:?} vs {want}");
        }
    }

    #[test]
    fn too_few_loads_is_an_error() {
        let mut spec = ProfilingSpec::new(qna_mix(), 2);
        spec.target_samples = 3;
        let samples = profile(&EngineConfig::default(), &spec).unwrap();
        assert!(matches!(calibrate(&samples), Err(CalibrationError::InsufficientLoads { found: 2 })));
    }

    #[test]
    fn default_engine_selects_usl_and_recovers_it() {
        let spec = ProfilingSpec::new(WorkloadMix::w3(), 11);
        let samples = profile(&EngineConfig::default(), &spec).unwrap();
        let report = calibrate(&samples).unwrap();
        assert_eq!(report.best.family(), ModelFamily::Usl);
        for (got, want) in report.best.params().iter().zip([100.0, 0.05, 0.001]) {
            assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
        }
        let r2 = |f| report.fit_of(f).unwrap().r2.unwrap();
        assert!(r2(ModelFamily::Usl) >= 0.9999);
        assert!(r2(ModelFamily::Usl) >= r2(ModelFamily::Logistic));
        assert!(r2(ModelFamily::Logistic) >= r2(ModelFamily::Linear));
    }

    #[test]
    fn exact_linear_law_ties_go_to_usl_or_linear_wins() {
        let samples: Vec<_> = (1..=20).map(|l| LoadSpeedSample::new(l, 100.0 - 2.0 * f64::from(l))).collect();
        let report = calibrate(&samples).unwrap();
        let linear = report.fit_of(ModelFamily::Linear).unwrap().r2.unwrap();
        assert!((linear - 1.0).abs() < 1e-12);
        let usl = report.fit_of(ModelFamily::Usl).unwrap().r2.unwrap_or(0.0);
        if usl >= linear - R2_TIE_EPS {
            assert_eq!(report.best.family(), ModelFamily::Usl);
        } else {
            assert_eq!(report.best.family(), ModelFamily::Linear);
        }
    }

    #[test]
    fn samples_csv_round_trip() {
        let samples = vec![LoadSpeedSample::new(1, 100.0), LoadSpeedSample::new(7, 73.5)];
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "load,speed\n1,100.0\n7,73.5\n");
        assert_eq!(read_samples(buf.as_slice()).unwrap(), samples);
    }
}
