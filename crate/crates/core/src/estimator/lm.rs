//! Small dense Levenberg-Marquardt solver for curve fits with a handful of
//! parameters and analytic Jacobians.

use nalgebra::{DMatrix, DVector};

pub(crate) trait CurveModel {
    fn n_params(&self) -> usize;
    fn value(&self, params: &[f64], x: f64) -> f64;
    fn gradient(&self, params: &[f64], x: f64, out: &mut [f64]);
    /// Box constraints, one `(lower, upper)` pair per parameter.
    fn bounds(&self) -> Vec<(f64, f64)>;
}

fn project(bounds: &[(f64, f64)], params: &mut [f64]) {
    for (p, &(lo, hi)) in params.iter_mut().zip(bounds) {
        *p = p.clamp(lo, hi);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iterations: usize,
    /// Relative SSE decrease below which an accepted step counts as converged.
    pub ftol: f64,
    /// Relative step length below which the iteration counts as converged.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iterations: 2000, ftol: 1e-15, xtol: 1e-13 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    pub sse: f64,
    pub converged: bool,
}

fn sse<M: CurveModel>(model: &M, params: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - model.value(params, x);
            r * r
        })
        .sum()
}

pub(crate) fn minimize<M: CurveModel>(
    model: &M,
    xs: &[f64],
    ys: &[f64],
    start: &[f64],
    opts: LmOptions,
) -> LmOutcome {
    let n = model.n_params();
    let m = xs.len();
    let bounds = model.bounds();
    let mut params = start.to_vec();
    project(&bounds, &mut params);
    let mut cost = sse(model, &params, xs, ys);
    let mut lambda = 1e-3;
    let mut grad = vec![0.0; n];

    for _ in 0..opts.max_iterations {
        if !cost.is_finite() {
            return LmOutcome { params, sse: cost, converged: false };
        }
        let mut jac = DMatrix::<f64>::zeros(m, n);
        let mut resid = DVector::<f64>::zeros(m);
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            model.gradient(&params, x, &mut grad);
            for (j, g) in grad.iter().enumerate() {
                jac[(i, j)] = *g;
            }
            resid[i] = y - model.value(&params, x);
        }
        // Parameters pinned at a bound whose descent direction points
        // outward are held fixed for this iteration.
        let raw_jtr = jac.transpose() * &resid;
        for j in 0..n {
            let (lo, hi) = bounds[j];
            if (params[j] <= lo && raw_jtr[j] < 0.0) || (params[j] >= hi && raw_jtr[j] > 0.0) {
                jac.column_mut(j).fill(0.0);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &resid;
        if jtr.amax() <= 1e-300 || cost == 0.0 {
            return LmOutcome { params, sse: cost, converged: true };
        }

        // Inner loop: raise damping until a step lowers the cost.
        loop {
            let mut damped = jtj.clone();
            for j in 0..n {
                if jtj[(j, j)] == 0.0 {
                    damped[(j, j)] = 1.0;
                } else {
                    damped[(j, j)] += lambda * jtj[(j, j)].max(1e-12);
                }
            }
            let step = match damped.clone().cholesky() {
                Some(ch) => ch.solve(&jtr),
                None => match damped.lu().solve(&jtr) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        if lambda > 1e20 {
                            return LmOutcome { params, sse: cost, converged: true };
                        }
                        continue;
                    }
                },
            };
            let mut candidate: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
            project(&bounds, &mut candidate);
            let new_cost = sse(model, &candidate, xs, ys);
            if new_cost.is_finite() && new_cost < cost {
                let step_norm = candidate.iter().zip(&params).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let param_norm = params.iter().map(|p| p * p).sum::<f64>().sqrt();
                let rel_drop = (cost - new_cost) / cost.max(1e-300);
                params = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-15);
                if rel_drop <= opts.ftol || step_norm <= opts.xtol * (param_norm + opts.xtol) {
                    return LmOutcome { params, sse: cost, converged: true };
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                // No descent direction left: a stationary point of the projected problem.
                return LmOutcome { params, sse: cost, converged: true };
            }
        }
    }
    LmOutcome { params, sse: cost, converged: false }
}
