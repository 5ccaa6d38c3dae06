//! Ground-truth continuous-batching engine.
//!
//! Every active request occupies one batch slot. A freshly admitted request
//! first pays a prefill debt of `input_tokens / prefill_rate` seconds, then
//! decodes at `ground_truth(L)` tokens/second where `L` is the number of
//! occupied slots. Between admissions and completions the dynamics are
//! piecewise constant, so completion instants are computed analytically.

use std::collections::HashSet;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{required_speed, Request, RequestState, Seconds, TransitionError};
use crate::estimator::SpeedModel;

/// Two event instants closer than this (relative) are treated as simultaneous.
const SIMULTANEITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("cannot move clock backwards from {clock} to {target}")]
    TimeReversal { clock: Seconds, target: Seconds },
    #[error("request {0} was already admitted")]
    DuplicateAdmission(u64),
    #[error("admission at {now} does not match engine clock {clock}")]
    ClockMismatch { now: Seconds, clock: Seconds },
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub ground_truth: SpeedModel,
    /// Prefill throughput in tokens/second; `None` makes prefill free.
    pub prefill_rate: Option<f64>,
}

impl EngineConfig {
    pub const DEFAULT_PREFILL_RATE: f64 = 2000.0;

    pub fn new(ground_truth: SpeedModel, prefill_rate: Option<f64>) -> Self {
        EngineConfig { ground_truth, prefill_rate }
    }

    fn prefill_time(&self, input_tokens: u32) -> Seconds {
        match self.prefill_rate {
            Some(rate) if rate.is_finite() && rate > 0.0 => f64::from(input_tokens) / rate,
            _ => 0.0,
        }
    }
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            ground_truth: SpeedModel::default_ground_truth(),
            prefill_rate: Some(Self::DEFAULT_PREFILL_RATE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineEventKind {
    Admit,
    DecodeStart,
    Complete,
}

/// One row of the engine event trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineEvent {
    pub time: Seconds,
    pub event: EngineEventKind,
    pub request_id: u64,
    pub load_after: usize,
}

/// A finished request together with what the engine observed about it.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub request: Request,
    pub decode_start: Seconds,
    /// Time-weighted mean number of occupied slots over the decode window.
    pub mean_load: f64,
}

impl Completion {
    pub fn decode_duration(&self) -> Seconds {
        self.request.completion_time.unwrap_or(self.decode_start) - self.decode_start
    }
}

#[derive(Debug, Clone)]
struct Slot {
    request: Request,
    prefill_left: Seconds,
    progress: f64,
    decode_start: Option<Seconds>,
    load_integral: f64,
}

impl Slot {
    fn target(&self) -> f64 {
        f64::from(self.request.max_output_tokens)
    }

    /// Time until this slot's next event at the given decode speed.
    fn time_to_event(&self, speed: f64) -> Seconds {
        if self.decode_start.is_none() {
            self.prefill_left
        } else {
            (self.target() - self.progress).max(0.0) / speed
        }
    }

    fn advance(&mut self, dt: Seconds, speed: f64, load: usize) {
        if self.decode_start.is_none() {
            self.prefill_left -= dt;
        } else {
            self.progress = (self.progress + speed * dt).min(self.target());
            self.load_integral += load as f64 * dt;
            self.request.generated_tokens = self.progress.floor() as u32;
        }
    }
}

/// The simulated serving engine.
#[derive(Debug, Clone)]
pub struct EngineState {
    config: EngineConfig,
    clock: Seconds,
    active: Vec<Slot>,
    admitted: HashSet<u64>,
    completed: Vec<Request>,
    trace: Option<Vec<EngineEvent>>,
}

impl EngineState {
    pub fn new(config: EngineConfig) -> Self {
        EngineState {
            config,
            clock: 0.0,
            active: Vec::new(),
            admitted: HashSet::new(),
            completed: Vec::new(),
            trace: None,
        }
    }

    /// Enables event-trace recording.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn clock(&self) -> Seconds {
        self.clock
    }

    /// Number of occupied batch slots, `L`.
    pub fn observe_load(&self) -> usize {
        self.active.len()
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty()
    }

    pub fn active_requests(&self) -> impl Iterator<Item = &Request> {
        self.active.iter().map(|s| &s.request)
    }

    /// Exact decode progress of an active request.
    pub fn progress_of(&self, id: u64) -> Option<f64> {
        self.active.iter().find(|s| s.request.id == id).map(|s| s.progress)
    }

    pub fn completed(&self) -> &[Request] {
        &self.completed
    }

    pub fn trace(&self) -> &[EngineEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<EngineEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log(&mut self, event: EngineEventKind, request_id: u64) {
        let load_after = self.active.len();
        let time = self.clock;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(EngineEvent { time, event, request_id, load_after });
        }
    }

    /// Current decode speed of every decoding request.
    pub fn current_speed(&self) -> Option<f64> {
        (!self.active.is_empty()).then(|| self.config.ground_truth.speed_at(self.active.len() as f64))
    }

    /// Puts a queued request into the batch at the current clock.
    pub fn admit(&mut self, mut request: Request, now: Seconds) -> Result<(), EngineError> {
        if (now - self.clock).abs() > 1e-9 * self.clock.abs().max(1.0) {
            return Err(EngineError::ClockMismatch { now, clock: self.clock });
        }
        if self.admitted.contains(&request.id) {
            return Err(EngineError::DuplicateAdmission(request.id));
        }
        if request.recorded_required_speed.is_none() {
            request.recorded_required_speed = Some(required_speed(&request, self.clock).tokens_per_sec());
        }
        request.transition(RequestState::Executing)?;
        request.admit_time = Some(self.clock);
        let id = request.id;
        let prefill = self.config.prefill_time(request.input_tokens);
        self.admitted.insert(id);
        self.active.push(Slot {
            progress: f64::from(request.generated_tokens),
            request,
            prefill_left: prefill,
            decode_start: None,
            load_integral: 0.0,
        });
        self.log(EngineEventKind::Admit, id);
        if prefill <= 0.0 {
            self.start_decode(self.active.len() - 1);
        }
        Ok(())
    }

    fn start_decode(&mut self, idx: usize) {
        let slot = &mut self.active[idx];
        slot.prefill_left = 0.0;
        slot.decode_start = Some(self.clock);
        let id = slot.request.id;
        self.log(EngineEventKind::DecodeStart, id);
    }

    /// Time of the next internal event, if any request is active.
    pub fn next_event_time(&self) -> Option<Seconds> {
        let speed = self.current_speed()?;
        let dt = self.active.iter().map(|s| s.time_to_event(speed)).fold(f64::INFINITY, f64::min);
        Some(self.clock + dt)
    }

    /// Runs the batch forward to `t`, returning completions in time order.
    pub fn advance_to(&mut self, t: Seconds) -> Result<Vec<Completion>, EngineError> {
        if t < self.clock {
            return Err(EngineError::TimeReversal { clock: self.clock, target: t });
        }
        let mut done = Vec::new();
        loop {
            if self.active.is_empty() {
                self.clock = t;
                break;
            }
            let load = self.active.len();
            let speed = self.config.ground_truth.speed_at(load as f64);
            let times: Vec<Seconds> = self.active.iter().map(|s| s.time_to_event(speed)).collect();
            let dt = times.iter().copied().fold(f64::INFINITY, f64::min);
            let remaining = t - self.clock;
            let tolerance = SIMULTANEITY_EPS * dt.max(1.0);
            if dt > remaining + tolerance {
                for slot in &mut self.active {
                    slot.advance(remaining, speed, load);
                }
                self.clock = t;
                break;
            }
            // An event within rounding distance of `t` fires at `t` itself,
            // so the clock never stalls on a step too small to represent.
            for slot in &mut self.active {
                slot.advance(dt, speed, load);
            }
            self.clock = (self.clock + dt).min(t);
            let cutoff = dt + tolerance;

            let mut finished = Vec::new();
            for (i, &ti) in times.iter().enumerate() {
                if ti > cutoff {
                    continue;
                }
                if self.active[i].decode_start.is_none() {
                    self.start_decode(i);
                } else {
                    self.active[i].progress = self.active[i].target();
                    finished.push(i);
                }
            }
            let mut slots: Vec<Slot> = finished.iter().rev().map(|&i| self.active.remove(i)).collect();
            slots.reverse();
            for slot in slots {
                done.push(self.finish(slot)?);
            }
        }
        Ok(done)
    }

    fn finish(&mut self, mut slot: Slot) -> Result<Completion, EngineError> {
        let decode_start = slot.decode_start.unwrap_or(self.clock);
        let duration = self.clock - decode_start;
        let mean_load = if duration > 0.0 {
            slot.load_integral / duration
        } else {
            // zero-length decode: the slot count at the instant it ran
            (self.active.len() + 1) as f64
        };
        slot.request.generated_tokens = slot.request.max_output_tokens;
        slot.request.completion_time = Some(self.clock);
        slot.request.transition(RequestState::Completed)?;
        let id = slot.request.id;
        self.completed.push(slot.request.clone());
        self.log(EngineEventKind::Complete, id);
        Ok(Completion { request: slot.request, decode_start, mean_load })
    }

    /// Advances until the batch is empty.
    pub fn drain(&mut self) -> Result<Vec<Completion>, EngineError> {
        let mut done = Vec::new();
        while let Some(next) = self.next_event_time() {
            done.extend(self.advance_to(next)?);
        }
        Ok(done)
    }
}

pub fn write_events<W: io::Write>(writer: W, events: &[EngineEvent]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::domain::TaskProfile;

    fn req(id: u64, input: u32, output: u32) -> Request {
        let task = Arc::new(TaskProfile::new("t", input.max(1), output.max(1), 100.0).unwrap());
        Request::new(id, task, 0.0, input, output)
    }

    fn free_prefill(law: SpeedModel) -> EngineState {
        EngineState::new(EngineConfig::new(law, None)).with_trace()
    }

    #[test]
    fn admit_increments_load() {
        let mut e = free_prefill(SpeedModel::constant(100.0).unwrap());
        assert_eq!(e.observe_load(), 0);
        e.admit(req(1, 10, 10), 0.0).unwrap();
        assert_eq!(e.observe_load(), 1);
        assert!(matches!(e.admit(req(1, 10, 10), 0.0), Err(EngineError::DuplicateAdmission(1))));
    }

    #[test]
    fn prefill_delays_decoding() {
        let mut e = EngineState::new(EngineConfig::new(SpeedModel::constant(100.0).unwrap(), Some(2000.0)))
            .with_trace();
        e.admit(req(1, 2000, 100), 0.0).unwrap();
        let done = e.drain().unwrap();
        assert_eq!(done.len(), 1);
        assert!((done[0].decode_start - 1.0).abs() < 1e-12);
        assert!((done[0].request.completion_time.unwrap() - 2.0).abs() < 1e-12);
        let kinds: Vec<_> = e.trace().iter().map(|ev| ev.event).collect();
        assert_eq!(kinds, [EngineEventKind::Admit, EngineEventKind::DecodeStart, EngineEventKind::Complete]);
    }

    #[test]
    fn single_request_completes_on_time() {
        let mut e = free_prefill(SpeedModel::constant(100.0).unwrap());
        e.admit(req(1, 1, 100), 0.0).unwrap();
        let done = e.advance_to(5.0).unwrap();
        assert_eq!(done.len(), 1);
        assert!((done[0].request.completion_time.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(done[0].request.generated_tokens, 100);
        assert_eq!(done[0].request.state, RequestState::Completed);
        assert_eq!(e.clock(), 5.0);
    }

    #[test]
    fn two_requests_share_then_speed_up() {
        let law = SpeedModel::usl(100.0, 0.1, 0.0).unwrap();
        let mut e = free_prefill(law.clone());
        e.admit(req(1, 1, 300), 0.0).unwrap();
        e.admit(req(2, 1, 300), 0.0).unwrap();
        assert!((e.current_speed().unwrap() - 100.0 / 1.1).abs() < 1e-12);
        let done = e.drain().unwrap();
        assert_eq!(done.len(), 2);
        for c in &done {
            assert!((c.request.completion_time.unwrap() - 3.3).abs() < 1e-9);
        }

        let mut e = free_prefill(law);
        e.admit(req(1, 1, 150), 0.0).unwrap();
        e.admit(req(2, 1, 300), 0.0).unwrap();
        let done = e.drain().unwrap();
        let t1 = done[0].request.completion_time.unwrap();
        assert!((t1 - 1.65).abs() < 1e-9);
        // 150 tokens left at 100 tok/s
        let t2 = done[1].request.completion_time.unwrap();
        assert!((t2 - 3.15).abs() < 1e-9);
        assert!((done[1].mean_load - (2.0 * 1.65 + 1.5) / 3.15).abs() < 1e-9);
    }

    #[test]
    fn zero_interval_is_a_no_op() {
        let mut e = free_prefill(SpeedModel::constant(10.0).unwrap());
        e.admit(req(1, 1, 100), 0.0).unwrap();
        e.advance_to(1.0).unwrap();
        let before = e.progress_of(1).unwrap();
        assert!(e.advance_to(1.0).unwrap().is_empty());
        assert_eq!(e.progress_of(1).unwrap(), before);
        assert!(matches!(e.advance_to(0.5), Err(EngineError::TimeReversal { .. })));
    }

    #[test]
    fn load_after_completions() {
        let mut e = free_prefill(SpeedModel::constant(10.0).unwrap());
        e.admit(req(1, 1, 5), 0.0).unwrap();
        e.admit(req(2, 1, 50), 0.0).unwrap();
        e.admit(req(3, 1, 50), 0.0).unwrap();
        let done = e.advance_to(1.0).unwrap();
        assert_eq!(done.len(), 1);
        assert_eq!(e.observe_load(), 2);
        assert_eq!(e.trace().last().unwrap().load_after, 2);
    }

    #[test]
    fn admission_requires_matching_clock() {
        let mut e = free_prefill(SpeedModel::constant(10.0).unwrap());
        assert!(matches!(e.admit(req(1, 1, 5), 3.0), Err(EngineError::ClockMismatch { .. })));
    }

    #[test]
    fn zero_token_request_completes_immediately() {
        let mut e = free_prefill(SpeedModel::constant(10.0).unwrap());
        let r = req(1, 1, 0);
        e.admit(r, 0.0).unwrap();
        let done = e.advance_to(0.0).unwrap();
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].request.completion_time, Some(0.0));
    }

    #[test]
    fn events_csv_header() {
        let mut e = free_prefill(SpeedModel::constant(10.0).unwrap());
        e.admit(req(4, 1, 5), 0.0).unwrap();
        e.drain().unwrap();
        let mut buf = Vec::new();
        write_events(&mut buf, e.trace()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,event,request_id,load_after"));
        assert_eq!(lines.next(), Some("0.0,admit,4,1"));
        assert_eq!(lines.next(), Some("0.0,decode_start,4,1"));
        assert_eq!(lines.next(), Some("0.5,complete,4,0"));
    }
}
