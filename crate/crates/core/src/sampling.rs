//! Midpoint-rule integration of the learned field from source to forecast.

use ndarray::{s, Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CgfmError, Result};
use crate::netcore::{time_embed, VelocityNet};
use crate::pathkit::{draw_source, AuxLookup, PredictionTarget, SourceMode};
use crate::rng::{path_rng, stream};
use crate::scheduler::Scheduler;

pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_EPS_DEN: f64 = 1e-6;
/// Windows integrated together in one batched pass. Fixed so results do not
/// depend on the worker count.
pub const WINDOW_CHUNK: usize = 64;
pub const THREADS_ENV: &str = "CGFM_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub target: PredictionTarget,
    pub source: SourceMode,
    pub eps_den: f64,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            target: PredictionTarget::X1Pred,
            source: SourceMode::Noise,
            eps_den: DEFAULT_EPS_DEN,
            num_samples: 1,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        if self.steps == 0 {
            return Err(CgfmError::Config("steps must be >= 1".into()));
        }
        if !(self.eps_den > 0.0) {
            return Err(CgfmError::Config(format!("eps_den must be > 0, got {}", self.eps_den)));
        }
        if self.num_samples == 0 {
            return Err(CgfmError::Config("num_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// `[0, 1/N, ..., 1]`.
pub fn time_grid(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(CgfmError::Config("time grid needs N >= 1".into()));
    }
    let mut g: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    g[n] = 1.0;
    Ok(g)
}

/// Coefficients `(a, b)` with `u = a x + b y` for network output `y`, and
/// whether the denominator floor was needed.
pub fn velocity_coefficients(
    target: PredictionTarget,
    s: Scheduler,
    t: f64,
    eps_den: f64,
) -> Result<(f64, f64, bool)> {
    let v = s.eval(t)?;
    Ok(match target {
        PredictionTarget::Ut => (0.0, 1.0, false),
        PredictionTarget::X1Pred => {
            let den = v.beta.max(eps_den);
            let r = v.d_beta / den;
            (r, v.d_alpha - v.alpha * r, v.beta < eps_den)
        }
        PredictionTarget::X0Pred => {
            let den = v.alpha.max(eps_den);
            let r = v.d_alpha / den;
            (r, v.d_beta - v.beta * r, v.alpha < eps_den)
        }
    })
}

/// Converts a network output under `target` into a velocity.
pub fn velocity_from_prediction(
    target: PredictionTarget,
    s: Scheduler,
    t: f64,
    x: &Array2<f64>,
    net_output: &Array2<f64>,
    eps_den: f64,
) -> Result<Array2<f64>> {
    crate::scheduler::check_same_shape("velocity_from_prediction", x, net_output)?;
    if target == PredictionTarget::Ut {
        return Ok(net_output.clone());
    }
    let (a, b, floored) = velocity_coefficients(target, s, t, eps_den)?;
    if floored {
        log::warn!("denominator floor {eps_den} active for {target} at t = {t}");
    }
    Ok(Zip::from(x).and(net_output).map_collect(|&x, &y| a * x + b * y))
}

/// Anything that maps a batch of flattened states at time `t` to raw
/// outputs under some parameterization.
pub trait Predictor {
    fn predict(&self, t: f64, x: &Array2<f64>) -> Result<Array2<f64>>;
}

impl<F> Predictor for F
where
    F: Fn(f64, &Array2<f64>) -> Result<Array2<f64>>,
{
    fn predict(&self, t: f64, x: &Array2<f64>) -> Result<Array2<f64>> {
        self(t, x)
    }
}

/// The network evaluated on a batch of windows, each with its own history.
pub struct NetPredictor<'a> {
    pub net: &'a VelocityNet,
    /// One flattened `C x L` history per row.
    pub histories: Array2<f64>,
}

impl Predictor for NetPredictor<'_> {
    fn predict(&self, t: f64, x: &Array2<f64>) -> Result<Array2<f64>> {
        let cfg = self.net.config();
        let (sd, hd) = (cfg.state_dim(), cfg.history_dim());
        let n = x.nrows();
        if x.ncols() != sd || self.histories.dim() != (n, hd) {
            return Err(CgfmError::Shape {
                context: "sampler batch",
                expected: vec![n, sd],
                found: x.shape().to_vec(),
            });
        }
        let emb = time_embed(t, cfg.time_embed_k);
        let mut input = Array2::zeros((n, cfg.input_dim()));
        input.slice_mut(s![.., ..sd]).assign(x);
        input.slice_mut(s![.., sd..sd + hd]).assign(&self.histories);
        for (k, e) in emb.iter().enumerate() {
            input.column_mut(sd + hd + k).fill(*e);
        }
        self.net.predict_batch(&input)
    }
}

/// Times at which the field was evaluated, for checking endpoint avoidance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub eval_times: Vec<f64>,
    pub floor_hits: usize,
    /// When set, `states` receives the initial state and the state after
    /// every step.
    pub record_states: bool,
    pub states: Vec<Array2<f64>>,
}

/// Integrates `dx/dt = u(t, x)` from `t = 0` to `1` with the midpoint rule
/// on the uniform `N`-step grid. Rows of `x0` are independent states.
pub fn integrate(
    predictor: &dyn Predictor,
    target: PredictionTarget,
    s: Scheduler,
    steps: usize,
    eps_den: f64,
    x0: Array2<f64>,
    mut trace: Option<&mut Trace>,
) -> Result<Array2<f64>> {
    let grid = time_grid(steps)?;
    let mut x = x0;
    let mut floor_hits = 0;
    let record = trace.as_ref().is_some_and(|t| t.record_states);
    let mut states = if record { vec![x.clone()] } else { Vec::new() };
    let mut velocity = |t: f64, x: &Array2<f64>, trace: &mut Option<&mut Trace>| -> Result<Array2<f64>> {
        if let Some(tr) = trace.as_deref_mut() {
            tr.eval_times.push(t);
        }
        let y = predictor.predict(t, x)?;
        if y.dim() != x.dim() {
            return Err(CgfmError::Shape {
                context: "predictor output",
                expected: x.shape().to_vec(),
                found: y.shape().to_vec(),
            });
        }
        if target == PredictionTarget::Ut {
            return Ok(y);
        }
        let (a, b, floored) = velocity_coefficients(target, s, t, eps_den)?;
        if floored {
            floor_hits += 1;
        }
        Ok(Zip::from(x).and(&y).map_collect(|&x, &y| a * x + b * y))
    };
    for i in 0..steps {
        let (t0, t1) = (grid[i], grid[i + 1]);
        let dt = t1 - t0;
        let tm = t0 + 0.5 * dt;
        let u0 = velocity(t0, &x, &mut trace)?;
        let xm = &x + &(&u0 * (0.5 * dt));
        let um = velocity(tm, &xm, &mut trace)?;
        x.scaled_add(dt, &um);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CgfmError::NonFiniteState { step: i, t: t1 });
        }
        if record {
            states.push(x.clone());
        }
    }
    if floor_hits > 0 {
        log::warn!("denominator floor {eps_den} activated {floor_hits} times for {target}");
    }
    if let Some(tr) = trace {
        tr.floor_hits += floor_hits;
        tr.states.extend(states);
    }
    Ok(x)
}

/// Worker count from `CGFM_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Source draw for one window and one sample index; independent of how
/// windows are batched or scheduled.
pub fn window_source(
    cfg: &SampleConfig,
    window: usize,
    draw: usize,
    shape: (usize, usize),
    aux: Option<&dyn AuxLookup>,
) -> Result<Array2<f64>> {
    let mut rng = path_rng(cfg.seed, &[stream::SAMPLING, window as u64, draw as u64]);
    draw_source(window, shape, cfg.source, aux, &mut rng)
}

/// Forecast for one window from its history.
pub fn sample(
    net: &VelocityNet,
    window: usize,
    h: &Array2<f64>,
    cfg: &SampleConfig,
    scheduler: Scheduler,
    aux: Option<&dyn AuxLookup>,
) -> Result<Array2<f64>> {
    let out = forecast_batch(net, &[(window, h.clone())], cfg, scheduler, aux)?;
    Ok(out.into_iter().next().expect("one window"))
}

/// Forecasts for a batch of `(window index, history)` pairs, integrated
/// together.
pub fn forecast_batch(
    net: &VelocityNet,
    windows: &[(usize, Array2<f64>)],
    cfg: &SampleConfig,
    scheduler: Scheduler,
    aux: Option<&dyn AuxLookup>,
) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    let nc = net.config();
    let shape = (nc.channels, nc.horizon);
    let n = windows.len();
    let mut histories = Array2::zeros((n, nc.history_dim()));
    for (r, (_, h)) in windows.iter().enumerate() {
        if h.dim() != (nc.channels, nc.history) {
            return Err(CgfmError::Shape {
                context: "history window",
                expected: vec![nc.channels, nc.history],
                found: h.shape().to_vec(),
            });
        }
        histories.row_mut(r).iter_mut().zip(h.iter()).for_each(|(d, s)| *d = *s);
    }
    let predictor = NetPredictor { net, histories };
    let mut acc = Array2::<f64>::zeros((n, nc.state_dim()));
    for draw in 0..cfg.num_samples {
        let mut x0 = Array2::zeros((n, nc.state_dim()));
        for (r, (w, _)) in windows.iter().enumerate() {
            let src = window_source(cfg, *w, draw, shape, aux)?;
            x0.row_mut(r).iter_mut().zip(src.iter()).for_each(|(d, s)| *d = *s);
        }
        let x1 = integrate(&predictor, cfg.target, scheduler, cfg.steps, cfg.eps_den, x0, None)?;
        acc += &x1;
    }
    if cfg.num_samples > 1 {
        acc /= cfg.num_samples as f64;
    }
    Ok(acc
        .axis_iter(Axis(0))
        .map(|row| row.to_owned().into_shape_with_order(shape).expect("C x Fh"))
        .collect())
}

/// Forecasts many windows, in fixed-size chunks spread over `threads`
/// workers (or `CGFM_THREADS`, or all cores). Output order follows input
/// order and does not depend on the worker count.
pub fn forecast_windows(
    net: &VelocityNet,
    windows: &[(usize, Array2<f64>)],
    cfg: &SampleConfig,
    scheduler: Scheduler,
    aux: Option<&(dyn AuxLookup + Sync)>,
    threads: Option<usize>,
) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    let threads = threads.or_else(threads_from_env);
    let run = || -> Result<Vec<Array2<f64>>> {
        let parts = windows
            .par_chunks(WINDOW_CHUNK)
            .map(|chunk| forecast_batch(net, chunk, cfg, scheduler, aux.map(|a| a as &dyn AuxLookup)))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    };
    match threads {
        Some(1) => windows
            .chunks(WINDOW_CHUNK)
            .map(|chunk| forecast_batch(net, chunk, cfg, scheduler, aux.map(|a| a as &dyn AuxLookup)))
            .collect::<Result<Vec<_>>>()
            .map(|p| p.into_iter().flatten().collect()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CgfmError::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}
