//! Independent reference model of the engine: fixed 1e-4 s steps, each cut
//! short at the first prefill end, completion or admission inside it.

#![allow(dead_code)]

pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Job {
    pub admit: f64,
    pub prefill: f64,
    pub tokens: f64,
}

/// Ground-truth USL written out by hand.
pub fn usl(v1: f64, sigma: f64, kappa: f64) -> impl Fn(usize) -> f64 {
    move |l| {
        let l = l as f64;
        v1 / (1.0 + sigma * (l - 1.0) + kappa * l * (l - 1.0))
    }
}

/// Completion time of every job, integrating tokens step by step.
pub fn integrate(jobs: &[Job], speed: impl Fn(usize) -> f64) -> Vec<f64> {
    let n = jobs.len();
    let mut progress = vec![0.0; n];
    let mut prefill_left: Vec<f64> = jobs.iter().map(|j| j.prefill).collect();
    let mut done: Vec<Option<f64>> = vec![None; n];
    let mut t = jobs.iter().map(|j| j.admit).fold(f64::INFINITY, f64::min);
    while done.iter().any(Option::is_none) {
        let active: Vec<usize> = (0..n).filter(|&i| done[i].is_none() && jobs[i].admit <= t + 1e-15).collect();
        let mut h = STEP;
        for j in jobs.iter().filter(|j| j.admit > t + 1e-15) {
            h = h.min(j.admit - t);
        }
        if active.is_empty() {
            t += h;
            continue;
        }
        let v = speed(active.len());
        for &i in &active {
            if prefill_left[i] > 0.0 {
                h = h.min(prefill_left[i]);
            } else {
                h = h.min((jobs[i].tokens - progress[i]) / v);
            }
        }
        t += h;
        for &i in &active {
            if prefill_left[i] > 0.0 {
                prefill_left[i] -= h;
                if prefill_left[i] <= 1e-15 {
                    prefill_left[i] = 0.0;
                }
            } else {
                progress[i] += v * h;
                if jobs[i].tokens - progress[i] <= 1e-9 * jobs[i].tokens.max(1.0) {
                    done[i] = Some(t);
                }
            }
        }
    }
    done.into_iter().map(|d| d.expect("all finished")).collect()
}
