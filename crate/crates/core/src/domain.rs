//! Domain types shared by every module: task profiles, workload mixes,
//! requests and scheduler configuration, plus the two per-request formulas
//! (absolute deadline and required generation speed).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in seconds.
pub type Seconds = f64;

/// Validation failures for configuration and domain values.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid task profile `{name}`: {reason}")]
    TaskProfile { name: String, reason: String },
    #[error("invalid workload mix `{name}`: {reason}")]
    Mix { name: String, reason: String },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown workload mix `{0}`")]
    UnknownMix(String),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { field, reason: reason.into() }
    }
}

pub const CODE_QNA: &str = "Code QnA";
pub const CODE_GENERATION: &str = "Code Generation";
pub const CODE_SUMMARY: &str = "Code Summary";
pub const CODE_TRANSLATION: &str = "Code Translation";

/// A class of coding task with average token demand and an end-to-end SLA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub name: String,
    pub avg_input_tokens: u32,
    pub avg_output_tokens: u32,
    /// Latency budget in seconds.
    pub sla: Seconds,
}

impl TaskProfile {
    pub fn new(
        name: impl Into<String>,
        avg_input_tokens: u32,
        avg_output_tokens: u32,
        sla: Seconds,
    ) -> Result<Self, ConfigError> {
        let profile = TaskProfile {
            name: name.into(),
            avg_input_tokens,
            avg_output_tokens,
            sla,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |reason: &str| {
            Err(ConfigError::TaskProfile {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.is_empty() {
            return fail("name must not be empty");
        }
        if self.avg_input_tokens < 1 {
            return fail("avg_input_tokens must be >= 1");
        }
        if self.avg_output_tokens < 1 {
            return fail("avg_output_tokens must be >= 1");
        }
        if !(self.sla.is_finite() && self.sla > 0.0) {
            return fail("sla must be a positive number of seconds");
        }
        Ok(())
    }
}

/// The four built-in coding task classes.
pub fn catalog() -> Vec<TaskProfile> {
    vec![
        TaskProfile { name: CODE_QNA.into(), avg_input_tokens: 186, avg_output_tokens: 43, sla: 1.0 },
        TaskProfile {
            name: CODE_GENERATION.into(),
            avg_input_tokens: 463,
            avg_output_tokens: 387,
            sla: 8.0,
        },
        TaskProfile { name: CODE_SUMMARY.into(), avg_input_tokens: 31, avg_output_tokens: 30, sla: 1.0 },
        TaskProfile {
            name: CODE_TRANSLATION.into(),
            avg_input_tokens: 670,
            avg_output_tokens: 617,
            sla: 12.0,
        },
    ]
}

/// Looks a task up in the built-in catalog.
pub fn catalog_task(name: &str) -> Result<TaskProfile, ConfigError> {
    catalog()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| ConfigError::UnknownTask(name.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub task: TaskProfile,
    pub fraction: f64,
}

/// Task proportions of an open-loop workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadMix {
    pub name: String,
    pub entries: Vec<MixEntry>,
}

impl WorkloadMix {
    pub fn new(name: impl Into<String>, entries: Vec<MixEntry>) -> Result<Self, ConfigError> {
        let mix = WorkloadMix { name: name.into(), entries };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |reason: String| Err(ConfigError::Mix { name: self.name.clone(), reason });
        if self.entries.is_empty() {
            return fail("mix has no entries".into());
        }
        let mut total = 0.0;
        for (i, entry) in self.entries.iter().enumerate() {
            entry.task.validate()?;
            if !(0.0..=1.0).contains(&entry.fraction) {
                return fail(format!("fraction for `{}` outside [0, 1]", entry.task.name));
            }
            if self.entries[..i].iter().any(|e| e.task.name == entry.task.name) {
                return fail(format!("task `{}` listed twice", entry.task.name));
            }
            total += entry.fraction;
        }
        if (total - 1.0).abs() > 1e-9 {
            return fail(format!("fractions sum to {total}, expected 1"));
        }
        Ok(())
    }

    /// Builds a mix from catalog task names.
    pub fn from_catalog(name: &str, parts: &[(&str, f64)]) -> Result<Self, ConfigError> {
        let entries = parts
            .iter()
            .map(|(task, fraction)| Ok(MixEntry { task: catalog_task(task)?, fraction: *fraction }))
            .collect::<Result<Vec<_>, ConfigError>>()?;
        WorkloadMix::new(name, entries)
    }

    /// Heavy mix: mostly long-output tasks.
    pub fn w1() -> Self {
        Self::from_catalog(
            "w1",
            &[(CODE_TRANSLATION, 0.4), (CODE_GENERATION, 0.4), (CODE_QNA, 0.1), (CODE_SUMMARY, 0.1)],
        )
        .expect("built-in mix is valid")
    }

    /// Light mix: mostly short-output tasks.
    pub fn w2() -> Self {
        Self::from_catalog(
            "w2",
            &[(CODE_QNA, 0.4), (CODE_SUMMARY, 0.4), (CODE_GENERATION, 0.1), (CODE_TRANSLATION, 0.1)],
        )
        .expect("built-in mix is valid")
    }

    /// Balanced mix: a quarter of each task.
    pub fn w3() -> Self {
        Self::from_catalog(
            "w3",
            &[(CODE_QNA, 0.25), (CODE_GENERATION, 0.25), (CODE_SUMMARY, 0.25), (CODE_TRANSLATION, 0.25)],
        )
        .expect("built-in mix is valid")
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name.to_ascii_lowercase().as_str() {
            "w1" => Ok(Self::w1()),
            "w2" => Ok(Self::w2()),
            "w3" => Ok(Self::w3()),
            _ => Err(ConfigError::UnknownMix(name.to_string())),
        }
    }

    pub fn fraction_of(&self, task: &str) -> f64 {
        self.entries.iter().find(|e| e.task.name == task).map_or(0.0, |e| e.fraction)
    }

    pub fn max_sla(&self) -> Seconds {
        self.entries.iter().map(|e| e.task.sla).fold(0.0, f64::max)
    }
}

/// Lifecycle of a request inside one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    QueuedHigh,
    QueuedLow,
    Executing,
    Completed,
}

impl RequestState {
    pub fn can_transition_to(self, next: RequestState) -> bool {
        use RequestState::*;
        matches!(
            (self, next),
            (QueuedHigh, QueuedLow) | (QueuedHigh, Executing) | (QueuedLow, Executing) | (Executing, Completed)
        )
    }

    pub fn is_queued(self) -> bool {
        matches!(self, RequestState::QueuedHigh | RequestState::QueuedLow)
    }
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RequestState::QueuedHigh => "queued_high",
            RequestState::QueuedLow => "queued_low",
            RequestState::Executing => "executing",
            RequestState::Completed => "completed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("request {id}: forbidden state transition {from} -> {to}")]
pub struct TransitionError {
    pub id: u64,
    pub from: RequestState,
    pub to: RequestState,
}

/// One inference job.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub task: Arc<TaskProfile>,
    pub arrival_time: Seconds,
    pub input_tokens: u32,
    pub max_output_tokens: u32,
    /// Absolute deadline, `arrival_time + task.sla`.
    pub deadline: Seconds,
    pub generated_tokens: u32,
    pub state: RequestState,
    pub admit_time: Option<Seconds>,
    pub completion_time: Option<Seconds>,
    /// Required speed snapshot taken when the request started executing.
    pub recorded_required_speed: Option<f64>,
}

impl Request {
    pub fn new(
        id: u64,
        task: Arc<TaskProfile>,
        arrival_time: Seconds,
        input_tokens: u32,
        max_output_tokens: u32,
    ) -> Self {
        let deadline = deadline_of(arrival_time, &task);
        Request {
            id,
            task,
            arrival_time,
            input_tokens,
            max_output_tokens,
            deadline,
            generated_tokens: 0,
            state: RequestState::QueuedHigh,
            admit_time: None,
            completion_time: None,
            recorded_required_speed: None,
        }
    }

    pub fn transition(&mut self, next: RequestState) -> Result<(), TransitionError> {
        if !self.state.can_transition_to(next) {
            return Err(TransitionError { id: self.id, from: self.state, to: next });
        }
        self.state = next;
        Ok(())
    }

    pub fn remaining_tokens(&self) -> u32 {
        self.max_output_tokens - self.generated_tokens.min(self.max_output_tokens)
    }

    /// End-to-end latency, if the request completed.
    pub fn latency(&self) -> Option<Seconds> {
        self.completion_time.map(|c| c - self.arrival_time)
    }
}

/// Absolute deadline of a request arriving at `arrival`.
pub fn deadline_of(arrival: Seconds, task: &TaskProfile) -> Seconds {
    arrival + task.sla
}

/// Token speed a request needs from `now` on to meet its deadline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RequiredSpeed {
    Feasible(f64),
    /// The deadline has already passed; no finite speed suffices.
    PastDeadline,
}

impl RequiredSpeed {
    /// Speed in tokens/second, `f64::INFINITY` when past the deadline.
    pub fn tokens_per_sec(self) -> f64 {
        match self {
            RequiredSpeed::Feasible(v) => v,
            RequiredSpeed::PastDeadline => f64::INFINITY,
        }
    }

    pub fn is_feasible(self) -> bool {
        matches!(self, RequiredSpeed::Feasible(_))
    }
}

/// Remaining output tokens divided by the time left until the deadline.
///
/// For a request that has not generated anything yet this is the maximum
/// output length over the remaining time.
pub fn required_speed(request: &Request, now: Seconds) -> RequiredSpeed {
    let remaining_time = request.deadline - now;
    if remaining_time <= 0.0 {
        return RequiredSpeed::PastDeadline;
    }
    RequiredSpeed::Feasible(f64::from(request.remaining_tokens()) / remaining_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerMode {
    Saber,
    Static,
}

/// How the low tier is drained when the high tier is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowTierPolicy {
    /// Admit the low-tier head only if the predicted speed at `L + 1` still
    /// covers every ledger entry. The request's own requirement is ignored.
    ProtectActive,
    /// Admit the low-tier head with no check at all.
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Number of queue-head positions the admission window samples from.
    pub window_size: usize,
    /// Scheduling period in seconds.
    pub tick: Seconds,
    pub mode: SchedulerMode,
    /// Max concurrency for static mode.
    pub static_batch_size: usize,
    #[serde(default = "default_low_tier")]
    pub low_tier: LowTierPolicy,
}

fn default_low_tier() -> LowTierPolicy {
    LowTierPolicy::ProtectActive
}

impl SchedulerConfig {
    pub const DEFAULT_WINDOW: usize = 8;
    pub const DEFAULT_TICK: Seconds = 0.01;

    pub fn saber() -> Self {
        SchedulerConfig {
            window_size: Self::DEFAULT_WINDOW,
            tick: Self::DEFAULT_TICK,
            mode: SchedulerMode::Saber,
            static_batch_size: 1,
            low_tier: LowTierPolicy::ProtectActive,
        }
    }

    pub fn fixed(batch_size: usize) -> Self {
        SchedulerConfig {
            window_size: Self::DEFAULT_WINDOW,
            tick: Self::DEFAULT_TICK,
            mode: SchedulerMode::Static,
            static_batch_size: batch_size,
            low_tier: LowTierPolicy::ProtectActive,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_size < 1 {
            return Err(ConfigError::invalid("window_size", "must be >= 1"));
        }
        if !(self.tick.is_finite() && self.tick > 0.0) {
            return Err(ConfigError::invalid("tick", "must be a positive number of seconds"));
        }
        if self.mode == SchedulerMode::Static && self.static_batch_size < 1 {
            return Err(ConfigError::invalid("static_batch_size", "must be >= 1 in static mode"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(sla: f64, out: u32) -> Arc<TaskProfile> {
        Arc::new(TaskProfile::new("t", 10, out, sla).unwrap())
    }

    #[test]
    fn catalog_has_four_rows() {
        let c = catalog();
        assert_eq!(c.len(), 4);
        let qna = catalog_task(CODE_QNA).unwrap();
        assert_eq!((qna.avg_input_tokens, qna.avg_output_tokens, qna.sla), (186, 43, 1.0));
        let tr = catalog_task(CODE_TRANSLATION).unwrap();
        assert_eq!((tr.avg_input_tokens, tr.avg_output_tokens, tr.sla), (670, 617, 12.0));
        let summary = catalog_task(CODE_SUMMARY).unwrap();
        assert_eq!((summary.avg_input_tokens, summary.avg_output_tokens), (31, 30));
        for t in &c {
            t.validate().unwrap();
        }
    }

    #[test]
    fn presets_sum_to_one() {
        for mix in [WorkloadMix::w1(), WorkloadMix::w2(), WorkloadMix::w3()] {
            let total: f64 = mix.entries.iter().map(|e| e.fraction).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert_eq!(WorkloadMix::w1().fraction_of(CODE_TRANSLATION), 0.4);
        assert_eq!(WorkloadMix::w2().fraction_of(CODE_SUMMARY), 0.4);
        assert_eq!(WorkloadMix::w3().fraction_of(CODE_QNA), 0.25);
    }

    #[test]
    fn bad_mix_rejected() {
        assert!(WorkloadMix::from_catalog("x", &[(CODE_QNA, 0.5), (CODE_SUMMARY, 0.4)]).is_err());
        assert!(WorkloadMix::from_catalog("x", &[(CODE_QNA, 0.5), (CODE_QNA, 0.5)]).is_err());
        assert!(WorkloadMix::preset("w9").is_err());
    }

    #[test]
    fn deadline_examples() {
        assert_eq!(deadline_of(0.0, &catalog_task(CODE_QNA).unwrap()), 1.0);
        assert_eq!(deadline_of(3.5, &catalog_task(CODE_TRANSLATION).unwrap()), 15.5);
        assert!(TaskProfile::new("zero", 1, 1, 0.0).is_err());
    }

    #[test]
    fn required_speed_examples() {
        let mut r = Request::new(1, task(10.0, 500), 0.0, 10, 500);
        assert_eq!(required_speed(&r, 0.0), RequiredSpeed::Feasible(50.0));
        assert_eq!(required_speed(&r, 5.0), RequiredSpeed::Feasible(100.0));
        assert_eq!(required_speed(&r, 10.0), RequiredSpeed::PastDeadline);
        assert_eq!(required_speed(&r, 11.0).tokens_per_sec(), f64::INFINITY);
        r.generated_tokens = 500;
        assert_eq!(required_speed(&r, 4.0), RequiredSpeed::Feasible(0.0));

        let mut r = Request::new(2, task(6.0, 300), 0.0, 10, 300);
        r.generated_tokens = 60;
        assert_eq!(required_speed(&r, 0.0), RequiredSpeed::Feasible(40.0));
    }

    #[test]
    fn state_machine() {
        let mut r = Request::new(1, task(1.0, 5), 0.0, 1, 5);
        assert!(r.transition(RequestState::Completed).is_err());
        r.transition(RequestState::QueuedLow).unwrap();
        assert!(r.transition(RequestState::QueuedHigh).is_err());
        r.transition(RequestState::Executing).unwrap();
        r.transition(RequestState::Completed).unwrap();
        assert!(r.transition(RequestState::Executing).is_err());
    }

    #[test]
    fn scheduler_config_validation() {
        SchedulerConfig::saber().validate().unwrap();
        let mut c = SchedulerConfig::fixed(0);
        assert!(c.validate().is_err());
        c.static_batch_size = 3;
        c.tick = 0.0;
        assert!(c.validate().is_err());
        c.tick = 0.01;
        c.window_size = 0;
        assert!(c.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn required_speed_grows_as_slack_shrinks(
                out in 1u32..2000, sla in 0.5f64..30.0, a in 0.0f64..1.0, b in 0.0f64..1.0,
            ) {
                let r = Request::new(1, task(sla, out), 0.0, 1, out);
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                prop_assume!(hi - lo > 1e-6 && hi < 0.999);
                let v1 = required_speed(&r, lo * sla).tokens_per_sec();
                let v2 = required_speed(&r, hi * sla).tokens_per_sec();
                prop_assert!(v2 > v1);
            }

            #[test]
            fn required_speed_is_scale_invariant(
                tokens in 1u32..500, remaining in 0.1f64..20.0, scale in 1u32..8,
            ) {
                let a = Request::new(1, task(remaining, tokens), 0.0, 1, tokens);
                let scaled = tokens * scale;
                let b = Request::new(2, task(remaining * f64::from(scale), scaled), 0.0, 1, scaled);
                let va = required_speed(&a, 0.0).tokens_per_sec();
                let vb = required_speed(&b, 0.0).tokens_per_sec();
                prop_assert!((va - vb).abs() <= 1e-9 * va.max(1.0));
            }
        }
    }
}
