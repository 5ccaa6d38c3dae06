//! Deterministic simulator for SLA-aware admission control on a
//! continuous-batching LLM serving engine.
//!
//! The crate covers the offline phase (profiling the engine and fitting a
//! load-to-speed model), the online phase (a two-tier deadline queue with
//! predictive admission), fixed-batch-size baselines, and the metrics used to
//! compare them across load sweeps.

pub mod calibration;
pub mod domain;
pub mod engine;
pub mod estimator;
pub mod metrics;
pub mod scheduler;
pub mod simloop;
pub mod sweep;
pub mod workload;

pub use calibration::{calibrate, profile, CalibrationError, CalibrationReport, ProfilingSpec};
pub use domain::{Request, SchedulerConfig, SchedulerMode, TaskProfile, WorkloadMix};
pub use engine::{EngineConfig, EngineState};
pub use estimator::{fit, LoadSpeedSample, ModelFamily, SpeedModel};
pub use metrics::{MetricsReport, RunRecord};
pub use scheduler::Scheduler;
pub use simloop::{run, run_requests, RunOutput, SimConfig, SimError};
pub use sweep::{sweep, Execution, SweepGrid, SweepResult};
pub use workload::{generate, WorkloadSpec};
