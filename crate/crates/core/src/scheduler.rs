//! Online scheduling: the two-tier queue with required-speed demotion, the
//! windowed admission-control step, and the fixed-batch-size baseline.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    required_speed, ConfigError, LowTierPolicy, Request, RequestState, SchedulerConfig, SchedulerMode, Seconds,
    TransitionError,
};
use crate::engine::{EngineError, EngineState};
use crate::estimator::SpeedModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("request {id} cannot be enqueued in state {state}")]
    NotQueuedHigh { id: u64, state: RequestState },
    #[error("request {0} completed twice or was never admitted by this scheduler")]
    UnknownCompletion(u64),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    AdmitHigh,
    AdmitLow,
    RejectOwn,
    RejectActive,
    Demote,
}

/// One row of the scheduler decision trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time: Seconds,
    pub request_id: u64,
    pub decision: Decision,
    pub load_before: usize,
    pub pred_speed: f64,
    pub req_speed: f64,
}

pub fn write_decisions<W: io::Write>(writer: W, records: &[DecisionRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// High tier in arrival order, low tier in demotion order.
#[derive(Debug, Clone, Default)]
pub struct TwoTierQueue {
    high: VecDeque<Request>,
    low: VecDeque<Request>,
}

impl TwoTierQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, request: Request) -> Result<(), SchedulerError> {
        if request.state != RequestState::QueuedHigh {
            return Err(SchedulerError::NotQueuedHigh { id: request.id, state: request.state });
        }
        self.high.push_back(request);
        Ok(())
    }

    pub fn high(&self) -> &VecDeque<Request> {
        &self.high
    }

    pub fn low(&self) -> &VecDeque<Request> {
        &self.low
    }

    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty() && self.low.is_empty()
    }

    /// Moves every high-tier request that can no longer meet its deadline,
    /// even at the model's fastest speed, to the tail of the low tier.
    /// Returns the demoted requests' ids in order.
    pub fn refresh_tiers(
        &mut self,
        model: &SpeedModel,
        now: Seconds,
        log: Option<&mut Vec<DecisionRecord>>,
        load: usize,
    ) -> Result<Vec<u64>, SchedulerError> {
        let fastest = model.max_speed();
        let mut kept = VecDeque::with_capacity(self.high.len());
        let mut demoted = Vec::new();
        let mut rows = Vec::new();
        for mut request in self.high.drain(..) {
            let need = required_speed(&request, now);
            if !need.is_feasible() || need.tokens_per_sec() > fastest {
                request.transition(RequestState::QueuedLow)?;
                demoted.push(request.id);
                rows.push(DecisionRecord {
                    time: now,
                    request_id: request.id,
                    decision: Decision::Demote,
                    load_before: load,
                    pred_speed: fastest,
                    req_speed: need.tokens_per_sec(),
                });
                self.low.push_back(request);
            } else {
                kept.push_back(request);
            }
        }
        self.high = kept;
        if let Some(log) = log {
            log.extend(rows);
        }
        Ok(demoted)
    }
}

/// Recorded required speeds of requests admitted from the high tier.
#[derive(Debug, Clone, Default)]
pub struct ActiveLedger {
    entries: BTreeMap<u64, f64>,
    low_admitted: BTreeSet<u64>,
}

impl ActiveLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u64, required: f64) {
        self.entries.insert(id, required);
    }

    pub fn note_low_admission(&mut self, id: u64) {
        self.low_admitted.insert(id);
    }

    pub fn get(&self, id: u64) -> Option<f64> {
        self.entries.get(&id).copied()
    }

    pub fn entries(&self) -> &BTreeMap<u64, f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest recorded requirement, 0 when empty.
    pub fn max_required(&self) -> f64 {
        self.entries.values().copied().fold(0.0, f64::max)
    }

    /// Drops `id` once its request finished.
    pub fn on_completion(&mut self, id: u64) -> Result<(), SchedulerError> {
        if self.entries.remove(&id).is_some() || self.low_admitted.remove(&id) {
            Ok(())
        } else {
            Err(SchedulerError::UnknownCompletion(id))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Admission {
    pub request_id: u64,
    pub tier: Tier,
}

fn push(log: &mut Option<&mut Vec<DecisionRecord>>, row: DecisionRecord) {
    if let Some(log) = log.as_deref_mut() {
        log.push(row);
    }
}

/// One pass of the admission-control loop. Admits at most one request.
///
/// With a non-empty high tier, the first `window_size` positions are visited
/// in random order; a candidate is admitted when the predicted per-request
/// speed at `L + 1` covers both its own required speed and every ledger
/// entry. Otherwise, the low-tier head is admitted best-effort.
#[allow(clippy::too_many_arguments)]
pub fn admission_step<R: rand::Rng + ?Sized>(
    queue: &mut TwoTierQueue,
    ledger: &mut ActiveLedger,
    engine: &mut EngineState,
    model: &SpeedModel,
    cfg: &SchedulerConfig,
    now: Seconds,
    rng: &mut R,
    mut log: Option<&mut Vec<DecisionRecord>>,
) -> Result<Option<Admission>, SchedulerError> {
    let load = engine.observe_load();
    let pred = model.speed_at((load + 1) as f64);
    let protected = ledger.max_required();

    if !queue.high.is_empty() {
        let window = cfg.window_size.min(queue.high.len());
        for pos in index::sample(rng, window, window).into_iter() {
            let candidate = &queue.high[pos];
            let need = required_speed(candidate, now).tokens_per_sec();
            let verdict = if pred < need {
                Some(Decision::RejectOwn)
            } else if pred < protected {
                Some(Decision::RejectActive)
            } else {
                None
            };
            let row = |decision| DecisionRecord {
                time: now,
                request_id: candidate.id,
                decision,
                load_before: load,
                pred_speed: pred,
                req_speed: need,
            };
            if let Some(decision) = verdict {
                push(&mut log, row(decision));
                continue;
            }
            push(&mut log, row(Decision::AdmitHigh));
            let mut request = queue.high.remove(pos).expect("sampled position is in range");
            request.recorded_required_speed = Some(need);
            let id = request.id;
            engine.admit(request, now)?;
            ledger.insert(id, need);
            return Ok(Some(Admission { request_id: id, tier: Tier::High }));
        }
        return Ok(None);
    }

    let Some(head) = queue.low.front() else {
        return Ok(None);
    };
    let need = required_speed(head, now).tokens_per_sec();
    let row = |decision| DecisionRecord {
        time: now,
        request_id: head.id,
        decision,
        load_before: load,
        pred_speed: pred,
        req_speed: need,
    };
    if cfg.low_tier == LowTierPolicy::ProtectActive && pred < protected {
        push(&mut log, row(Decision::RejectActive));
        return Ok(None);
    }
    push(&mut log, row(Decision::AdmitLow));
    let mut request = queue.low.pop_front().expect("checked non-empty");
    request.recorded_required_speed = Some(need);
    let id = request.id;
    engine.admit(request, now)?;
    ledger.note_low_admission(id);
    Ok(Some(Admission { request_id: id, tier: Tier::Low }))
}

/// Fixed max-concurrency baseline: FIFO admission up to the batch cap.
pub fn static_step(
    queue: &mut TwoTierQueue,
    engine: &mut EngineState,
    cfg: &SchedulerConfig,
    now: Seconds,
    mut log: Option<&mut Vec<DecisionRecord>>,
) -> Result<Vec<u64>, SchedulerError> {
    let mut admitted = Vec::new();
    while engine.observe_load() < cfg.static_batch_size {
        let Some(request) = queue.high.pop_front() else {
            break;
        };
        push(
            &mut log,
            DecisionRecord {
                time: now,
                request_id: request.id,
                decision: Decision::AdmitHigh,
                load_before: engine.observe_load(),
                pred_speed: f64::NAN,
                req_speed: required_speed(&request, now).tokens_per_sec(),
            },
        );
        admitted.push(request.id);
        engine.admit(request, now)?;
    }
    Ok(admitted)
}

/// Per-simulation scheduler: queue, ledger, rng and optional decision log.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    model: Option<SpeedModel>,
    queue: TwoTierQueue,
    ledger: ActiveLedger,
    rng: ChaCha8Rng,
    log: Option<Vec<DecisionRecord>>,
    demoted: BTreeSet<u64>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, model: Option<SpeedModel>, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        if config.mode == SchedulerMode::Saber && model.is_none() {
            return Err(ConfigError::invalid("model", "saber mode requires an estimation model"));
        }
        Ok(Scheduler {
            config,
            model,
            queue: TwoTierQueue::new(),
            ledger: ActiveLedger::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: None,
            demoted: BTreeSet::new(),
        })
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn queue(&self) -> &TwoTierQueue {
        &self.queue
    }

    pub fn ledger(&self) -> &ActiveLedger {
        &self.ledger
    }

    pub fn was_demoted(&self, id: u64) -> bool {
        self.demoted.contains(&id)
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_decisions(&mut self) -> Vec<DecisionRecord> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn enqueue(&mut self, request: Request) -> Result<(), SchedulerError> {
        self.queue.enqueue(request)
    }

    /// One scheduling period: demotion then admission (SABER), or the
    /// static fill. Returns the ids admitted.
    pub fn tick(&mut self, engine: &mut EngineState, now: Seconds) -> Result<Vec<u64>, SchedulerError> {
        match self.config.mode {
            SchedulerMode::Static => static_step(&mut self.queue, engine, &self.config, now, self.log.as_mut()),
            SchedulerMode::Saber => {
                let model = self.model.as_ref().expect("checked at construction");
                let load = engine.observe_load();
                let demoted = self.queue.refresh_tiers(model, now, self.log.as_mut(), load)?;
                self.demoted.extend(demoted);
                let admitted = admission_step(
                    &mut self.queue,
                    &mut self.ledger,
                    engine,
                    model,
                    &self.config,
                    now,
                    &mut self.rng,
                    self.log.as_mut(),
                )?;
                Ok(admitted.map(|a| a.request_id).into_iter().collect())
            }
        }
    }

    pub fn on_completion(&mut self, id: u64) -> Result<(), SchedulerError> {
        match self.config.mode {
            SchedulerMode::Saber => self.ledger.on_completion(id),
            SchedulerMode::Static => Ok(()),
        }
    }
}
