//! Two-sided conditional path machinery: source draws, noise smoothing,
//! path points, conditional velocities and regression targets.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CgfmError, Result};
use crate::rng::Rng;
use crate::scheduler::{check_same_shape, Scheduler};

pub const DEFAULT_SIGMA: f64 = 1.0;

/// Where `x0` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SourceMode {
    Noise,
    AuxOutput { sigma: f64 },
}

impl SourceMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SourceMode::AuxOutput { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(
                CgfmError::Config(format!("smoothing sigma must be finite and >= 0, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match *self {
            SourceMode::Noise => None,
            SourceMode::AuxOutput { sigma } => Some(sigma),
        }
    }
}

impl fmt::Display for SourceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceMode::Noise => write!(f, "noise"),
            SourceMode::AuxOutput { sigma } => write!(f, "aux(sigma={sigma})"),
        }
    }
}

/// What the network regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PredictionTarget {
    /// The conditional velocity `alpha' x1 + beta' x0`.
    Ut,
    X0Pred,
    X1Pred,
}

impl PredictionTarget {
    pub const ALL: [PredictionTarget; 3] = [
        PredictionTarget::Ut,
        PredictionTarget::X0Pred,
        PredictionTarget::X1Pred,
    ];
}

impl fmt::Display for PredictionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionTarget::Ut => "u",
            PredictionTarget::X0Pred => "x0",
            PredictionTarget::X1Pred => "x1",
        })
    }
}

impl FromStr for PredictionTarget {
    type Err = CgfmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "u" | "ut" | "velocity" => Ok(PredictionTarget::Ut),
            "x0" => Ok(PredictionTarget::X0Pred),
            "x1" => Ok(PredictionTarget::X1Pred),
            other => Err(CgfmError::Config(format!(
                "unknown prediction target {other:?} (expected u, x0 or x1)"
            ))),
        }
    }
}

impl TryFrom<String> for PredictionTarget {
    type Error = CgfmError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PredictionTarget> for String {
    fn from(p: PredictionTarget) -> String {
        p.to_string()
    }
}

/// Auxiliary predictions addressed by window index, in normalized units.
pub trait AuxLookup {
    fn aux_for(&self, window: usize) -> Result<Array2<f64>>;
}

/// One draw from the conditional independent coupling, plus its path point.
#[derive(Debug, Clone)]
pub struct CouplingSample {
    pub h: Array2<f64>,
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: f64,
    pub xt: Array2<f64>,
}

impl CouplingSample {
    pub fn new(
        scheduler: Scheduler,
        h: Array2<f64>,
        x0: Array2<f64>,
        x1: Array2<f64>,
        t: f64,
    ) -> Result<Self> {
        let xt = scheduler.interpolate(t, &x0, &x1)?;
        Ok(Self { h, x0, x1, t, xt })
    }
}

pub fn standard_normal(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// `x0 + sigma * eps` with fresh standard normal `eps`.
pub fn smooth(x0: &Array2<f64>, sigma: f64, rng: &mut Rng) -> Array2<f64> {
    if sigma == 0.0 {
        return x0.clone();
    }
    x0.mapv(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Draws `x0 ~ p(x0 | h)` for the window with index `window`.
pub fn draw_source(
    window: usize,
    shape: (usize, usize),
    mode: SourceMode,
    aux: Option<&dyn AuxLookup>,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    match mode {
        SourceMode::Noise => Ok(standard_normal(shape, rng)),
        SourceMode::AuxOutput { sigma } => {
            let aux = aux.ok_or(CgfmError::MissingAux { window })?;
            let a = aux.aux_for(window)?;
            if a.dim() != shape {
                return Err(CgfmError::Shape {
                    context: "auxiliary prediction",
                    expected: vec![shape.0, shape.1],
                    found: a.shape().to_vec(),
                });
            }
            Ok(smooth(&a, sigma, rng))
        }
    }
}

/// Source half of the coupling for a dataset window `(h, x1)`; `x1` is the
/// window's own future so only `x0` consumes randomness.
pub fn draw_coupling(
    window: usize,
    h: &Array2<f64>,
    x1: &Array2<f64>,
    mode: SourceMode,
    aux: Option<&dyn AuxLookup>,
    rng: &mut Rng,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let x0 = draw_source(window, x1.dim(), mode, aux, rng)?;
    Ok((h.clone(), x0, x1.clone()))
}

/// Regression target for the chosen parameterization.
pub fn target_g(
    target: PredictionTarget,
    scheduler: Scheduler,
    t: f64,
    x0: &Array2<f64>,
    x1: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_same_shape("target_g", x0, x1)?;
    match target {
        PredictionTarget::Ut => conditional_velocity(scheduler, t, x0, x1),
        PredictionTarget::X0Pred => Ok(x0.clone()),
        PredictionTarget::X1Pred => Ok(x1.clone()),
    }
}

/// `alpha'(t) x1 + beta'(t) x0`, the time derivative of the conditional path.
pub fn conditional_velocity(
    scheduler: Scheduler,
    t: f64,
    x0: &Array2<f64>,
    x1: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_same_shape("conditional_velocity", x0, x1)?;
    let v = scheduler.eval(t)?;
    Ok(Zip::from(x0)
        .and(x1)
        .map_collect(|&a, &b| v.d_alpha * b + v.d_beta * a))
}
