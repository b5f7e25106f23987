//! Browser bindings for the static demo page in `www/`.
//!
//! Every export returns a flat `Float64Array`; the layouts are documented on
//! each function. The `*_rows` functions hold the logic and are plain Rust so
//! they can be tested natively.

use cgfm::oracle::{discrete_marginal_velocity, DiscreteCouplingToy, GaussianToy};
use cgfm::pathkit::PredictionTarget;
use cgfm::rng::stream_rng;
use cgfm::sampling::{integrate, Trace, DEFAULT_EPS_DEN};
use cgfm::scheduler::Scheduler;
use ndarray::Array2;
use wasm_bindgen::prelude::*;

const MAX_PATHS: usize = 5000;
const MAX_STEPS: usize = 1000;

fn check_sizes(paths: usize, steps: usize) -> Result<(), String> {
    if paths == 0 || paths > MAX_PATHS {
        return Err(format!("paths must be in 1..={MAX_PATHS}"));
    }
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    Ok(())
}

/// Rows of `[t, alpha, beta, alpha', beta']` at `points` evenly spaced times.
pub fn scheduler_rows(spec: &str, points: usize) -> Result<Vec<f64>, String> {
    let s: Scheduler = spec.parse().map_err(|e| format!("{e}"))?;
    if points < 2 {
        return Err("need at least 2 points".into());
    }
    let mut out = Vec::with_capacity(points * 5);
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let v = s.eval(t).map_err(|e| e.to_string())?;
        out.extend([t, v.alpha, v.beta, v.d_alpha, v.d_beta]);
    }
    Ok(out)
}

/// Flattens recorded sampler states into `(steps + 1) x paths`, step-major.
fn flatten_states(trace: &Trace) -> Vec<f64> {
    trace.states.iter().flat_map(|s| s.iter().copied()).collect()
}

/// Trajectories of the two-atom toy (sources at -1 and 1, targets at -2 and
/// 2 with weights `1 - right_weight` and `right_weight`) under its exact
/// marginal velocity. Layout: `(steps + 1) x paths`, step-major.
pub fn discrete_rows(
    spec: &str,
    sigma: f64,
    right_weight: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<f64>, String> {
    check_sizes(paths, steps)?;
    let s: Scheduler = spec.parse().map_err(|e| format!("{e}"))?;
    let toy = DiscreteCouplingToy::new(
        vec![-1.0, 1.0],
        vec![0.5, 0.5],
        vec![-2.0, 2.0],
        vec![1.0 - right_weight, right_weight],
        sigma,
        s,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = stream_rng(seed, 0);
    let x0 = Array2::from_shape_vec((paths, 1), toy.sample_source(paths, &mut rng)).expect("n x 1");
    let field = |t: f64, x: &Array2<f64>| -> cgfm::Result<Array2<f64>> {
        let mut out = Array2::zeros(x.dim());
        for (o, &xi) in out.iter_mut().zip(x.iter()) {
            *o = discrete_marginal_velocity(&toy, t, xi)?;
        }
        Ok(out)
    };
    let mut trace = Trace { record_states: true, ..Trace::default() };
    integrate(&field, PredictionTarget::Ut, s, steps, DEFAULT_EPS_DEN, x0, Some(&mut trace))
        .map_err(|e| e.to_string())?;
    Ok(flatten_states(&trace))
}

/// Trajectories from N(0, 1) to N(3, 1) along CondOT, with the network
/// replaced by the exact posterior for `target` (`u`, `x0` or `x1`).
/// Layout: `(steps + 1) x paths`, step-major.
pub fn gaussian_rows(target: &str, steps: usize, paths: usize, seed: u64) -> Result<Vec<f64>, String> {
    check_sizes(paths, steps)?;
    let target: PredictionTarget = target.parse().map_err(|e| format!("{e}"))?;
    let toy = GaussianToy {
        mu0: 0.0,
        var0: 1.0,
        mu1: 3.0,
        var1: 1.0,
    };
    let s = Scheduler::CondOt;
    let mut rng = stream_rng(seed, 0);
    let x0 = Array2::from_shape_vec((paths, 1), toy.sample_source(paths, &mut rng)).expect("n x 1");
    let field = |t: f64, x: &Array2<f64>| -> cgfm::Result<Array2<f64>> {
        let mut out = Array2::zeros(x.dim());
        for (o, &xi) in out.iter_mut().zip(x.iter()) {
            *o = toy.ideal_output(target, s, t, xi)?;
        }
        Ok(out)
    };
    let mut trace = Trace { record_states: true, ..Trace::default() };
    integrate(&field, target, s, steps, DEFAULT_EPS_DEN, x0, Some(&mut trace)).map_err(|e| e.to_string())?;
    Ok(flatten_states(&trace))
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scheduler_curves(spec: &str, points: usize) -> Result<Vec<f64>, JsError> {
    js(scheduler_rows(spec, points))
}

#[wasm_bindgen]
pub fn discrete_trajectories(
    spec: &str,
    sigma: f64,
    right_weight: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    js(discrete_rows(spec, sigma, right_weight, steps, paths, seed))
}

#[wasm_bindgen]
pub fn gaussian_trajectories(target: &str, steps: usize, paths: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    js(gaussian_rows(target, steps, paths, seed))
}
