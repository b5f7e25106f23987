//! Numerical self-checks run by `cgfm verify`. Each check compares an
//! implementation against an independent reference and reports a metric
//! with its tolerance.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::netcore::{NetConfig, VelocityNet};
use crate::oracle::{
    discrete_marginal_velocity, enumerate_loss_grads, finite_diff_grad, gradient_check_toy,
    linear_field_endpoint, max_abs_diff, max_relative_error, transport_toy, GaussianToy,
    GRADIENT_CHECK_T_GRID,
};
use crate::pathkit::{conditional_velocity, standard_normal, PredictionTarget};
use crate::rng::{derive, Rng};
use crate::sampling::{integrate, Trace, DEFAULT_EPS_DEN};
use crate::scheduler::Scheduler;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub skipped: bool,
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
    pub ms: u64,
}

impl CheckResult {
    fn new(name: &str, metric: f64, tolerance: f64, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            skipped: false,
            metric,
            tolerance,
            detail,
            ms: 0,
        }
    }

    fn at_most(name: &str, metric: f64, tolerance: f64, detail: String) -> Self {
        Self::new(name, metric, tolerance, metric <= tolerance, detail)
    }
}

/// Deliberate defects for testing that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the analytic gradient of the first weight by 1.01.
    CorruptBackward,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Checks not started before this much time has elapsed are skipped.
    pub budget: Option<Duration>,
    pub fault: Option<Fault>,
}

type CheckFn = fn(&VerifyOptions) -> Result<CheckResult>;

pub const CHECKS: [(&str, CheckFn); 10] = [
    ("scheduler_boundaries", check_scheduler_boundaries),
    ("scheduler_derivatives", check_scheduler_derivatives),
    ("velocity_consistency", check_velocity_consistency),
    ("network_gradients", check_network_gradients),
    ("loss_gradient_equivalence", check_gradient_equivalence),
    ("discrete_transport", check_discrete_transport),
    ("gaussian_transport", check_gaussian_transport),
    ("parameterization_x1_vs_u", check_x1_equivalence),
    ("parameterization_x0_vs_u", check_x0_equivalence),
    ("integrator_order", check_integrator_order),
];

/// Runs every check in order. A check that returns an error is reported as
/// failed with the error message.
pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let start = Instant::now();
    CHECKS
        .iter()
        .map(|(name, f)| {
            if opts.budget.is_some_and(|b| start.elapsed() >= b) {
                return CheckResult {
                    skipped: true,
                    ..CheckResult::new(name, f64::NAN, f64::NAN, false, "time budget exhausted".into())
                };
            }
            let t = Instant::now();
            let mut r = f(opts).unwrap_or_else(|e| {
                CheckResult::new(name, f64::NAN, f64::NAN, false, format!("error: {e}"))
            });
            r.ms = t.elapsed().as_millis() as u64;
            r
        })
        .collect()
}

pub fn any_failed(results: &[CheckResult]) -> bool {
    results.iter().any(|r| !r.passed && !r.skipped)
}

fn rng_for(opts: &VerifyOptions, label: u64) -> Rng {
    Rng::seed_from_u64(derive(opts.seed, label))
}

pub const BOUNDARY_TOL: f64 = 1e-12;
pub const DERIVATIVE_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;
/// Random times are drawn away from the endpoints so that both sides of the
/// central difference stay inside [0, 1].
const FD_T_RANGE: (f64, f64) = (1e-3, 1.0 - 1e-3);

pub fn check_scheduler_boundaries(_: &VerifyOptions) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in Scheduler::ALL_DEFAULT {
        let a = s.eval(0.0)?;
        let b = s.eval(1.0)?;
        for d in [a.alpha, b.alpha - 1.0, a.beta - 1.0, b.beta] {
            worst = worst.max(d.abs());
        }
    }
    Ok(CheckResult::at_most(
        "scheduler_boundaries",
        worst,
        BOUNDARY_TOL,
        "alpha(0)=0, alpha(1)=1, beta(0)=1, beta(1)=0 for condot, poly:3, vp, cosine".into(),
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn check_scheduler_derivatives(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts, 1);
    let mut worst = 0.0f64;
    for s in Scheduler::ALL_DEFAULT {
        for _ in 0..1000 {
            let t = rng.random_range(FD_T_RANGE.0..FD_T_RANGE.1);
            let v = s.eval(t)?;
            let (p, m) = (s.eval(t + FD_STEP)?, s.eval(t - FD_STEP)?);
            let fa = (p.alpha - m.alpha) / (2.0 * FD_STEP);
            let fb = (p.beta - m.beta) / (2.0 * FD_STEP);
            worst = worst.max(rel(v.d_alpha, fa)).max(rel(v.d_beta, fb));
        }
    }
    Ok(CheckResult::at_most(
        "scheduler_derivatives",
        worst,
        DERIVATIVE_TOL,
        "analytic vs central differences, 1000 random t per scheduler (error relative to max(1, |d|))".into(),
    ))
}

pub fn check_velocity_consistency(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts, 2);
    let mut worst = 0.0f64;
    for s in Scheduler::ALL_DEFAULT {
        for _ in 0..100 {
            let t = rng.random_range(FD_T_RANGE.0..FD_T_RANGE.1);
            let x0 = standard_normal((2, 3), &mut rng);
            let x1 = standard_normal((2, 3), &mut rng);
            let u = conditional_velocity(s, t, &x0, &x1)?;
            let up = s.interpolate(t + FD_STEP, &x0, &x1)?;
            let dn = s.interpolate(t - FD_STEP, &x0, &x1)?;
            let fd = (up - dn) / (2.0 * FD_STEP);
            for (a, b) in u.iter().zip(fd.iter()) {
                worst = worst.max(rel(*a, *b));
            }
        }
    }
    Ok(CheckResult::at_most(
        "velocity_consistency",
        worst,
        DERIVATIVE_TOL,
        "conditional velocity vs d/dt of the interpolant, 100 draws per scheduler".into(),
    ))
}

pub const GRADIENT_REL_TOL: f64 = 1e-4;

pub fn check_network_gradients(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = rng_for(opts, 3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let channels = rng.random_range(1..=3usize);
        let horizon = rng.random_range(1..=(12 / channels).min(4));
        let history = rng.random_range(1..=5usize);
        let depth = rng.random_range(1..=2usize);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=32usize)).collect();
        let k = rng.random_range(0..=3usize);
        let cfg = NetConfig::new(channels, history, horizon)
            .with_hidden(hidden)
            .with_time_embed_k(k);
        let mut net = VelocityNet::new(cfg, &mut rng)?;
        let t = rng.random_range(0.0..1.0);
        let xt = standard_normal((channels, horizon), &mut rng);
        let h = standard_normal((channels, history), &mut rng);
        let up = standard_normal((channels, horizon), &mut rng);
        let mut analytic = net.backward(t, &xt, &h, &up)?.flat();
        if opts.fault == Some(Fault::CorruptBackward) {
            analytic[0] *= 1.01;
        }
        let theta = net.params_flat();
        let numeric = finite_diff_grad(
            |p| {
                net.set_params_flat(p).expect("same length");
                (&net.forward(t, &xt, &h).expect("valid shapes") * &up).sum()
            },
            &theta,
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(CheckResult::at_most(
        "network_gradients",
        worst,
        GRADIENT_REL_TOL,
        "backward vs central differences (h = 1e-5) on 20 random small networks".into(),
    ))
}

pub const GRADIENT_EQUIVALENCE_TOL: f64 = 1e-6;

/// Marginal and conditional objectives have the same parameter gradient.
pub fn check_gradient_equivalence(opts: &VerifyOptions) -> Result<CheckResult> {
    let toy = gradient_check_toy();
    let mut worst = 0.0f64;
    let mut min_gap = f64::INFINITY;
    for r in 0..5u64 {
        let mut rng = rng_for(opts, 40 + r);
        let cfg = NetConfig::new(1, 1, 1).with_hidden(vec![4]).with_time_embed_k(1);
        let net = VelocityNet::new(cfg, &mut rng)?;
        let e = enumerate_loss_grads(&net, &toy, &GRADIENT_CHECK_T_GRID, PredictionTarget::Ut)?;
        worst = worst.max(max_abs_diff(&e.grad_gm, &e.grad_cgm));
        min_gap = min_gap.min(e.loss_cgm - e.loss_gm);
    }
    let passed = worst < GRADIENT_EQUIVALENCE_TOL && min_gap > 0.0;
    Ok(CheckResult::new(
        "loss_gradient_equivalence",
        worst,
        GRADIENT_EQUIVALENCE_TOL,
        passed,
        format!("5 random 29-parameter nets; smallest loss gap L_CGM - L_GM = {min_gap:.4e}"),
    ))
}

pub const TRANSPORT_TOL: f64 = 0.02;

/// Fraction of terminal samples nearest each target atom after integrating
/// the exact marginal velocity of the discrete toy.
pub fn discrete_transport_fractions(seed: u64, samples: usize, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let toy = transport_toy();
    let mut rng = Rng::seed_from_u64(seed);
    let x0 = Array2::from_shape_vec((samples, 1), toy.sample_source(samples, &mut rng)).expect("n x 1");
    let field = |t: f64, x: &Array2<f64>| -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.dim());
        for (o, &xi) in out.iter_mut().zip(x.iter()) {
            *o = discrete_marginal_velocity(&toy, t, xi)?;
        }
        Ok(out)
    };
    let x1 = integrate(&field, PredictionTarget::Ut, toy.scheduler, steps, DEFAULT_EPS_DEN, x0, None)?;
    let fr = toy.nearest_atom_fractions(x1.as_slice().expect("contiguous"));
    Ok((fr, toy.target_weights.clone()))
}

pub fn check_discrete_transport(opts: &VerifyOptions) -> Result<CheckResult> {
    let (fr, w) = discrete_transport_fractions(derive(opts.seed, 5), 10_000, 100)?;
    let worst = fr.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(CheckResult::at_most(
        "discrete_transport",
        worst,
        TRANSPORT_TOL,
        format!("2x2 toy, sigma 0.1, condot, 100 midpoint steps, 10^4 samples: fractions {fr:.4?} vs weights {w:?}"),
    ))
}

pub const GAUSSIAN_TOY: GaussianToy = GaussianToy {
    mu0: 0.0,
    var0: 1.0,
    mu1: 3.0,
    var1: 1.0,
};
pub const GAUSSIAN_STEPS: usize = 40;
pub const GAUSSIAN_SAMPLES: usize = 10_000;
pub const EQUIVALENCE_TOL: f64 = 1e-8;

/// Terminal states from the closed-form posterior under `target`, with the
/// evaluation times recorded.
pub fn gaussian_trajectories(seed: u64, target: PredictionTarget) -> Result<(Array2<f64>, Trace)> {
    let toy = GAUSSIAN_TOY;
    let s = Scheduler::CondOt;
    let mut rng = Rng::seed_from_u64(seed);
    let x0 = Array2::from_shape_vec((GAUSSIAN_SAMPLES, 1), toy.sample_source(GAUSSIAN_SAMPLES, &mut rng))
        .expect("n x 1");
    let field = move |t: f64, x: &Array2<f64>| -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.dim());
        for (o, &xi) in out.iter_mut().zip(x.iter()) {
            *o = toy.ideal_output(target, s, t, xi)?;
        }
        Ok(out)
    };
    let mut trace = Trace::default();
    let x1 = integrate(&field, target, s, GAUSSIAN_STEPS, DEFAULT_EPS_DEN, x0, Some(&mut trace))?;
    Ok((x1, trace))
}

pub fn check_gaussian_transport(opts: &VerifyOptions) -> Result<CheckResult> {
    let (x1, _) = gaussian_trajectories(derive(opts.seed, 6), PredictionTarget::X1Pred)?;
    let mean = x1.mean().unwrap_or(f64::NAN);
    let std = x1.std(0.0);
    let worst = (mean - GAUSSIAN_TOY.mu1).abs().max((std - GAUSSIAN_TOY.var1.sqrt()).abs());
    Ok(CheckResult::at_most(
        "gaussian_transport",
        worst,
        0.05,
        format!("N(0,1) -> N(3,1), condot, x1-prediction oracle: mean {mean:.4}, std {std:.4}"),
    ))
}

/// Largest per-trajectory difference between `target` and `Ut` samplers
/// driven by the same closed-form posterior.
pub fn parameterization_gap(seed: u64, target: PredictionTarget) -> Result<(f64, Trace)> {
    let (a, trace) = gaussian_trajectories(seed, target)?;
    let (b, _) = gaussian_trajectories(seed, PredictionTarget::Ut)?;
    Ok((max_abs_diff(a.as_slice().unwrap(), b.as_slice().unwrap()), trace))
}

fn equivalence(opts: &VerifyOptions, name: &str, target: PredictionTarget) -> Result<CheckResult> {
    let (gap, trace) = parameterization_gap(derive(opts.seed, 6), target)?;
    Ok(CheckResult::at_most(
        name,
        gap,
        EQUIVALENCE_TOL,
        format!(
            "max per-trajectory |{target} - u| over {GAUSSIAN_SAMPLES} trajectories, {GAUSSIAN_STEPS} steps; \
             denominator floor active at {} evaluations",
            trace.floor_hits
        ),
    ))
}

pub fn check_x1_equivalence(opts: &VerifyOptions) -> Result<CheckResult> {
    equivalence(opts, "parameterization_x1_vs_u", PredictionTarget::X1Pred)
}

pub fn check_x0_equivalence(opts: &VerifyOptions) -> Result<CheckResult> {
    equivalence(opts, "parameterization_x0_vs_u", PredictionTarget::X0Pred)
}

pub const ORDER_GRID: [usize; 4] = [10, 20, 40, 80];

/// Endpoint errors of the midpoint rule on `u = k x` from `x0 = 1`.
pub fn linear_field_errors(k: f64) -> Result<Vec<f64>> {
    ORDER_GRID
        .iter()
        .map(|&n| {
            let f = move |_t: f64, x: &Array2<f64>| -> Result<Array2<f64>> { Ok(x * k) };
            let x1 = integrate(&f, PredictionTarget::Ut, Scheduler::CondOt, n, DEFAULT_EPS_DEN, Array2::ones((1, 1)), None)?;
            Ok((x1[[0, 0]] - linear_field_endpoint(1.0, k)).abs())
        })
        .collect()
}

pub fn check_integrator_order(_: &VerifyOptions) -> Result<CheckResult> {
    let errs = linear_field_errors(1.3)?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let passed = ratios.iter().all(|r| (3.0..=5.0).contains(r));
    let worst = ratios.iter().map(|r| (r - 4.0).abs()).fold(0.0, f64::max);
    Ok(CheckResult::new(
        "integrator_order",
        worst,
        1.0,
        passed,
        format!("error ratios per doubling of N over {ORDER_GRID:?}: {ratios:.4?}"),
    ))
}
