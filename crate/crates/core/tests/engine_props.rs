mod common;

use std::sync::Arc;

use proptest::prelude::*;
use saber_sim::domain::{Request, TaskProfile};
use saber_sim::engine::{EngineConfig, EngineEventKind, EngineState};
use saber_sim::estimator::SpeedModel;

use common::{integrate, usl, Job};

#[derive(Debug, Clone)]
struct Scenario {
    v1: f64,
    sigma: f64,
    kappa: f64,
    prefill_rate: Option<f64>,
    /// (admit time, input tokens, output tokens)
    requests: Vec<(f64, u32, u32)>,
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (
        50.0..150.0f64,
        0.0..0.2f64,
        0.0..0.01f64,
        prop::option::of(500.0..5000.0f64),
        prop::collection::vec((0.0..3.0f64, 1u32..800, 1u32..400), 1..=5),
    )
        .prop_map(|(v1, sigma, kappa, prefill_rate, mut requests)| {
            requests.sort_by(|a, b| a.0.total_cmp(&b.0));
            Scenario { v1, sigma, kappa, prefill_rate, requests }
        })
}

fn simulate(s: &Scenario) -> (EngineState, Vec<f64>) {
    let truth = SpeedModel::usl(s.v1, s.sigma, s.kappa).unwrap();
    let mut engine = EngineState::new(EngineConfig::new(truth, s.prefill_rate)).with_trace();
    let task = Arc::new(TaskProfile::new("t", 1, 1, 1000.0).unwrap());
    let mut completions = vec![f64::NAN; s.requests.len()];
    for (id, &(at, input, output)) in s.requests.iter().enumerate() {
        for c in engine.advance_to(at).unwrap() {
            completions[c.request.id as usize] = c.request.completion_time.unwrap();
        }
        engine.admit(Request::new(id as u64, Arc::clone(&task), at, input, output), at).unwrap();
    }
    for c in engine.drain().unwrap() {
        completions[c.request.id as usize] = c.request.completion_time.unwrap();
    }
    (engine, completions)
}

fn jobs(s: &Scenario) -> Vec<Job> {
    s.requests
        .iter()
        .map(|&(admit, input, output)| Job {
            admit,
            prefill: s.prefill_rate.map_or(0.0, |r| f64::from(input) / r),
            tokens: f64::from(output),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn completion_times_match_reference_integrator(s in scenario()) {
        let (_, got) = simulate(&s);
        let want = integrate(&jobs(&s), usl(s.v1, s.sigma, s.kappa));
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-6 * w.abs(), "engine {g} vs reference {w}");
        }
    }

    #[test]
    fn completions_are_time_ordered_and_only_speed_up(s in scenario()) {
        let (engine, _) = simulate(&s);
        let truth = &engine.config().ground_truth;
        let mut last = f64::NEG_INFINITY;
        for e in engine.trace() {
            prop_assert!(e.time >= last);
            last = e.time;
            if e.event == EngineEventKind::Complete {
                prop_assert!(truth.speed_at(e.load_after as f64) >= truth.speed_at((e.load_after + 1) as f64));
            }
        }
    }

    #[test]
    fn every_request_generates_exactly_its_demand(s in scenario()) {
        let (engine, _) = simulate(&s);
        prop_assert_eq!(engine.completed().len(), s.requests.len());
        for r in engine.completed() {
            prop_assert_eq!(r.generated_tokens, r.max_output_tokens);
            prop_assert!(r.completion_time.is_some());
        }
        prop_assert!(engine.is_idle());
    }
}

#[test]
fn load_tracks_admissions_and_completions() {
    let s = Scenario {
        v1: 100.0,
        sigma: 0.0,
        kappa: 0.0,
        prefill_rate: None,
        requests: vec![(0.0, 1, 100), (0.0, 1, 300), (0.0, 1, 300)],
    };
    let (engine, got) = simulate(&s);
    assert_eq!(got, vec![1.0, 3.0, 3.0]);
    let loads: Vec<usize> = engine.trace().iter().filter(|e| e.event == EngineEventKind::Complete).map(|e| e.load_after).collect();
    assert_eq!(loads, [2, 0, 0]);
}
