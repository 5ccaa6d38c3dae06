use proptest::prelude::*;
use saber_sim::metrics::{self, cdf, cdf_mass_at, FinalTier, MetricsReport};
use saber_sim::RunRecord;

const TASKS: [(&str, f64); 3] = [("chat", 2.0), ("code", 5.0), ("summ", 8.0)];

fn records() -> impl Strategy<Value = Vec<RunRecord>> {
    prop::collection::vec((0usize..3, 0.0..50.0f64, prop::option::of(0.0..12.0f64), any::<bool>()), 1..120).prop_map(
        |rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (task, arrival, latency, low))| {
                    let (name, sla) = TASKS[task];
                    // Quantize some latencies so ties and exact-SLA hits occur.
                    let latency = latency.map(|l| if i % 3 == 0 { (l * 2.0).round() / 2.0 } else { l });
                    let completion_time = latency.map(|l| arrival + l);
                    RunRecord {
                        request_id: i as u64,
                        task: name.to_string(),
                        arrival_time: arrival,
                        admit_time: completion_time.map(|_| arrival),
                        completion_time,
                        sla,
                        met_sla: RunRecord::meets_sla(completion_time, arrival, sla),
                        final_tier: if low { FinalTier::Low } else { FinalTier::High },
                    }
                })
                .collect()
        },
    )
}

fn brute_goodput(rs: &[RunRecord]) -> f64 {
    let mut met = 0.0;
    for r in rs {
        if let Some(c) = r.completion_time {
            if c - r.arrival_time <= r.sla {
                met += 1.0;
            }
        }
    }
    met / rs.len() as f64
}

/// Fraction of the task's issued requests with latency <= x, by counting.
fn brute_cdf(rs: &[RunRecord], task: &str, x: f64) -> f64 {
    let issued = rs.iter().filter(|r| r.task == task).count() as f64;
    let below = rs.iter().filter(|r| r.task == task && r.latency().is_some_and(|l| l <= x)).count() as f64;
    below / issued
}

fn brute_cv(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    var.sqrt() / mu
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn report_matches_counting_oracles(rs in records()) {
        let report = MetricsReport::from_records(&rs).unwrap();
        prop_assert!((report.goodput - brute_goodput(&rs)).abs() <= 1e-12);

        let ratios: Vec<f64> = rs.iter().filter_map(|r| r.latency().map(|l| l / r.sla)).collect();
        if ratios.is_empty() {
            prop_assert!(report.cv.is_none());
        } else if ratios.iter().any(|&v| v > 0.0) {
            prop_assert!((report.cv.unwrap() - brute_cv(&ratios)).abs() <= 1e-12);
        }

        let mut mass = 0.0;
        for (name, sla) in TASKS {
            let issued = rs.iter().filter(|r| r.task == name).count();
            if issued == 0 {
                prop_assert!(!report.per_task.contains_key(name));
                continue;
            }
            let points = &report.per_task[name].cdf_points;
            for p in points {
                prop_assert!((p.fraction - brute_cdf(&rs, name, p.latency)).abs() <= 1e-12);
            }
            for w in points.windows(2) {
                prop_assert!(w[0].latency < w[1].latency && w[0].fraction < w[1].fraction);
            }
            for x in [0.0, 0.5, sla, sla + 0.25, 20.0] {
                prop_assert!((cdf_mass_at(points, x) - brute_cdf(&rs, name, x)).abs() <= 1e-12);
            }
            mass += issued as f64 / rs.len() as f64 * brute_cdf(&rs, name, sla);
        }
        prop_assert!((mass - report.goodput).abs() <= 1e-12);
    }

    #[test]
    fn cv_is_scale_invariant(values in prop::collection::vec(0.1..10.0f64, 1..50), scale in 0.01..100.0f64) {
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        let a = metrics::cv(&values).unwrap();
        let b = metrics::cv(&scaled).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-9));
    }
}

#[test]
fn cv_of_one_two_three() {
    let v = metrics::cv(&[1.0, 2.0, 3.0]).unwrap();
    assert!((v - 0.40825).abs() <= 1e-5);
    assert!((v - (2.0f64 / 3.0).sqrt() / 2.0).abs() <= 1e-15);
}

#[test]
fn never_completed_requests_lower_the_cdf_plateau() {
    let mut rs = Vec::new();
    for i in 0..4 {
        rs.push(RunRecord {
            request_id: i,
            task: "chat".into(),
            arrival_time: 0.0,
            admit_time: None,
            completion_time: (i < 3).then_some(1.0 + i as f64),
            sla: 2.0,
            met_sla: RunRecord::meets_sla((i < 3).then_some(1.0 + i as f64), 0.0, 2.0),
            final_tier: FinalTier::High,
        });
    }
    let points = cdf(&rs, "chat");
    assert_eq!(points.last().unwrap().fraction, 0.75);
    assert_eq!(MetricsReport::from_records(&rs).unwrap().goodput, 0.5);
}
