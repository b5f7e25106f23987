//! Affine-path schedulers.
//!
//! A scheduler is a pair of smooth maps `alpha, beta: [0, 1] -> [0, 1]` with
//! `alpha(0) = beta(1) = 0` and `alpha(1) = beta(0) = 1`. The path point is
//! `x_t = alpha(t) * x1 + beta(t) * x0`.
//!
//! | kind     | alpha          | beta            |
//! |----------|----------------|-----------------|
//! | CondOT   | t              | 1 - t           |
//! | Poly-n   | t^n            | 1 - t^n         |
//! | LinearVP | t              | sqrt(1 - t^2)   |
//! | Cosine   | sin(pi t / 2)  | cos(pi t / 2)   |

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{CgfmError, Result};

pub const DEFAULT_POLY_DEGREE: u32 = 3;

/// LinearVP's `beta'` diverges at t = 1; derivatives are evaluated no later
/// than this.
pub const VP_DERIVATIVE_CLAMP: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheduler {
    CondOt,
    Poly(u32),
    LinearVp,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerValues {
    pub alpha: f64,
    pub beta: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

impl Scheduler {
    pub const ALL_DEFAULT: [Scheduler; 4] = [
        Scheduler::CondOt,
        Scheduler::Poly(DEFAULT_POLY_DEGREE),
        Scheduler::LinearVp,
        Scheduler::Cosine,
    ];

    /// Polynomial scheduler; degrees below 2 are rejected since n = 1 is CondOT.
    pub fn poly(n: u32) -> Result<Self> {
        let s = Scheduler::Poly(n);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Scheduler::Poly(n) if n < 2 => Err(CgfmError::Config(format!(
                "poly scheduler degree must satisfy n >= 2, got {n}"
            ))),
            _ => Ok(()),
        }
    }

    /// Closed-form `(alpha, beta, alpha', beta')` at `t`.
    pub fn eval(&self, t: f64) -> Result<SchedulerValues> {
        self.validate()?;
        if !(0.0..=1.0).contains(&t) {
            return Err(CgfmError::Domain(format!(
                "scheduler time must lie in [0, 1], got {t}"
            )));
        }
        Ok(self.values(t))
    }

    /// Unchecked evaluation for hot loops; callers guarantee `t` in [0, 1].
    pub(crate) fn values(&self, t: f64) -> SchedulerValues {
        match *self {
            Scheduler::CondOt => SchedulerValues {
                alpha: t,
                beta: 1.0 - t,
                d_alpha: 1.0,
                d_beta: -1.0,
            },
            Scheduler::Poly(n) => {
                let tn1 = t.powi(n as i32 - 1);
                let tn = tn1 * t;
                let d = f64::from(n) * tn1;
                SchedulerValues {
                    alpha: tn,
                    beta: 1.0 - tn,
                    d_alpha: d,
                    d_beta: -d,
                }
            }
            Scheduler::LinearVp => {
                let td = t.min(VP_DERIVATIVE_CLAMP);
                SchedulerValues {
                    alpha: t,
                    beta: (1.0 - t * t).max(0.0).sqrt(),
                    d_alpha: 1.0,
                    d_beta: -td / (1.0 - td * td).sqrt(),
                }
            }
            Scheduler::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                // sin(pi/2) and cos(pi/2) are not exact in floating point.
                let (s, c) = if t == 1.0 { (1.0, 0.0) } else { (s, c) };
                SchedulerValues {
                    alpha: s,
                    beta: c,
                    d_alpha: FRAC_PI_2 * c,
                    d_beta: -FRAC_PI_2 * s,
                }
            }
        }
    }

    /// `alpha(t) * x1 + beta(t) * x0`, elementwise.
    pub fn interpolate(&self, t: f64, x0: &Array2<f64>, x1: &Array2<f64>) -> Result<Array2<f64>> {
        check_same_shape("interpolate", x0, x1)?;
        let v = self.eval(t)?;
        if t == 1.0 {
            return Ok(x1.clone());
        }
        Ok(Zip::from(x0)
            .and(x1)
            .map_collect(|&a, &b| v.alpha * b + v.beta * a))
    }
}

pub(crate) fn check_same_shape(
    context: &'static str,
    a: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CgfmError::Shape {
            context,
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheduler::CondOt => write!(f, "condot"),
            Scheduler::Poly(n) => write!(f, "poly:{n}"),
            Scheduler::LinearVp => write!(f, "vp"),
            Scheduler::Cosine => write!(f, "cosine"),
        }
    }
}

impl FromStr for Scheduler {
    type Err = CgfmError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "condot" => Ok(Scheduler::CondOt),
            "vp" | "linearvp" => Ok(Scheduler::LinearVp),
            "cosine" => Ok(Scheduler::Cosine),
            "poly" => Ok(Scheduler::Poly(DEFAULT_POLY_DEGREE)),
            _ => {
                let Some(deg) = s.strip_prefix("poly:") else {
                    return Err(CgfmError::Config(format!(
                        "unknown scheduler {s:?} (expected condot, poly:<n>, vp or cosine)"
                    )));
                };
                let n: u32 = deg.parse().map_err(|_| {
                    CgfmError::Config(format!(
                        "poly scheduler degree must be an integer n >= 2, got {deg:?}"
                    ))
                })?;
                Scheduler::poly(n)
            }
        }
    }
}

impl TryFrom<String> for Scheduler {
    type Error = CgfmError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scheduler> for String {
    fn from(s: Scheduler) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn all() -> Vec<Scheduler> {
        vec![
            Scheduler::CondOt,
            Scheduler::Poly(2),
            Scheduler::Poly(3),
            Scheduler::Poly(5),
            Scheduler::LinearVp,
            Scheduler::Cosine,
        ]
    }

    #[test]
    fn condot_midpoint() {
        let v = Scheduler::CondOt.eval(0.5).unwrap();
        assert_eq!((v.alpha, v.beta, v.d_alpha, v.d_beta), (0.5, 0.5, 1.0, -1.0));
    }

    #[test]
    fn poly3_midpoint() {
        let v = Scheduler::Poly(3).eval(0.5).unwrap();
        assert_eq!(
            (v.alpha, v.beta, v.d_alpha, v.d_beta),
            (0.125, 0.875, 0.75, -0.75)
        );
    }

    #[test]
    fn boundary_values_exact() {
        for s in all() {
            let v0 = s.eval(0.0).unwrap();
            let v1 = s.eval(1.0).unwrap();
            assert_eq!((v0.alpha, v0.beta), (0.0, 1.0), "{s}");
            assert_eq!((v1.alpha, v1.beta), (1.0, 0.0), "{s}");
        }
    }

    #[test]
    fn out_of_range_time_is_domain_error() {
        for t in [-1e-12, 1.0 + 1e-12, f64::NAN] {
            assert!(matches!(
                Scheduler::CondOt.eval(t),
                Err(CgfmError::Domain(_))
            ));
        }
    }

    #[test]
    fn vp_derivative_is_clamped_near_one() {
        let v = Scheduler::LinearVp.eval(1.0).unwrap();
        assert!(v.d_beta.is_finite());
        assert!(v.d_beta < -1e4);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        for s in all() {
            assert_eq!(s.to_string().parse::<Scheduler>().unwrap(), s);
        }
        assert_eq!("poly".parse::<Scheduler>().unwrap(), Scheduler::Poly(3));
        let err = "poly:0".parse::<Scheduler>().unwrap_err().to_string();
        assert!(err.contains("n >= 2"), "{err}");
        assert!("poly:1".parse::<Scheduler>().is_err());
        assert!("linear".parse::<Scheduler>().is_err());
    }

    #[test]
    fn interpolate_examples() {
        let x0 = arr2(&[[0.0, 0.0]]);
        let x1 = arr2(&[[2.0, 2.0]]);
        let mid = Scheduler::CondOt.interpolate(0.5, &x0, &x1).unwrap();
        assert_eq!(mid, arr2(&[[1.0, 1.0]]));

        let x0 = arr2(&[[0.3, -1.7]]);
        let x1 = arr2(&[[1.0 / 3.0, 9.1]]);
        for s in all() {
            assert_eq!(s.interpolate(1.0, &x0, &x1).unwrap(), x1);
        }

        // sin(pi/6) + cos(pi/6) = 1/2 + sqrt(3)/2.
        let ones = arr2(&[[1.0]]);
        let out = Scheduler::Cosine.interpolate(1.0 / 3.0, &ones, &ones).unwrap();
        let expected = 0.5 + 3f64.sqrt() / 2.0;
        assert!((out[[0, 0]] - expected).abs() < 1e-15);
        assert!((out[[0, 0]] - 1.366_025_403_784_438_6).abs() < 1e-15);
    }

    #[test]
    fn interpolate_shape_mismatch() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((3, 2));
        assert!(matches!(
            Scheduler::CondOt.interpolate(0.2, &a, &b),
            Err(CgfmError::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn monotone_on_open_interval(t1 in 1e-6f64..0.999_999, dt in 1e-6f64..0.5) {
            let t2 = (t1 + dt).min(0.999_999_9);
            prop_assume!(t2 > t1);
            for s in all() {
                let a = s.eval(t1).unwrap();
                let b = s.eval(t2).unwrap();
                prop_assert!(a.alpha < b.alpha, "{s} alpha");
                prop_assert!(a.beta > b.beta, "{s} beta");
                prop_assert!(a.d_alpha > 0.0 && -a.d_beta > 0.0, "{s} derivative sign");
            }
        }

        #[test]
        fn mass_and_norm_identities(t in 0.0f64..=1.0) {
            for s in [Scheduler::CondOt, Scheduler::Poly(3), Scheduler::Poly(4)] {
                let v = s.eval(t).unwrap();
                prop_assert_eq!(v.alpha + v.beta, 1.0);
            }
            for s in [Scheduler::LinearVp, Scheduler::Cosine] {
                let v = s.eval(t).unwrap();
                prop_assert!((v.alpha * v.alpha + v.beta * v.beta - 1.0).abs() < 1e-12);
            }
        }
    }
}
