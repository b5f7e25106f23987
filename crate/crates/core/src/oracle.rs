//! Closed-form and brute-force references used to check the learned pieces.
//!
//! Everything here is one-dimensional: states, targets and histories are
//! scalars (`C = Fh = 1`).

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{CgfmError, Result};
use crate::netcore::{Gradients, VelocityNet};
use crate::pathkit::PredictionTarget;
use crate::rng::Rng;
use crate::scheduler::Scheduler;

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Magnitudes below this are treated as this large when forming relative
/// errors, so entries that are zero up to rounding do not dominate.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, REL_ERR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Independent Gaussian endpoints `X0 ~ N(mu0, var0)`, `X1 ~ N(mu1, var1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianToy {
    pub mu0: f64,
    pub var0: f64,
    pub mu1: f64,
    pub var1: f64,
}

impl GaussianToy {
    fn gain(&self, s: Scheduler, t: f64) -> Result<(f64, f64, f64)> {
        if !(self.var0 >= 0.0 && self.var1 >= 0.0) {
            return Err(CgfmError::Degenerate("variances must be non-negative".into()));
        }
        let v = s.eval(t)?;
        let denom = v.alpha * v.alpha * self.var1 + v.beta * v.beta * self.var0;
        if denom <= 0.0 {
            return Err(CgfmError::Degenerate(format!(
                "X_t has zero variance at t = {t}"
            )));
        }
        Ok((v.alpha, v.beta, denom))
    }

    /// `E[X1 | X_t = x]`.
    pub fn posterior_x1(&self, s: Scheduler, t: f64, x: f64) -> Result<f64> {
        let (a, b, d) = self.gain(s, t)?;
        Ok(self.mu1 + a * self.var1 / d * (x - a * self.mu1 - b * self.mu0))
    }

    /// `E[X0 | X_t = x]`.
    pub fn posterior_x0(&self, s: Scheduler, t: f64, x: f64) -> Result<f64> {
        let (a, b, d) = self.gain(s, t)?;
        Ok(self.mu0 + b * self.var0 / d * (x - a * self.mu1 - b * self.mu0))
    }

    /// `alpha' E[X1 | x] + beta' E[X0 | x]`.
    pub fn marginal_velocity(&self, s: Scheduler, t: f64, x: f64) -> Result<f64> {
        let v = s.eval(t)?;
        Ok(v.d_alpha * self.posterior_x1(s, t, x)? + v.d_beta * self.posterior_x0(s, t, x)?)
    }

    /// What an ideal network trained for `target` would output.
    pub fn ideal_output(&self, target: PredictionTarget, s: Scheduler, t: f64, x: f64) -> Result<f64> {
        match target {
            PredictionTarget::Ut => self.marginal_velocity(s, t, x),
            PredictionTarget::X0Pred => self.posterior_x0(s, t, x),
            PredictionTarget::X1Pred => self.posterior_x1(s, t, x),
        }
    }

    pub fn sample_source(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        let sd = self.var0.sqrt();
        (0..n)
            .map(|_| self.mu0 + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `E[X1 | X_t = x]` for independent Gaussian endpoints.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_posterior_mean(
    s: Scheduler,
    t: f64,
    x: f64,
    mu0: f64,
    var0: f64,
    mu1: f64,
    var1: f64,
) -> Result<f64> {
    GaussianToy { mu0, var0, mu1, var1 }.posterior_x1(s, t, x)
}

/// Finite atoms on both sides, with the source smoothed by `sigma * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCouplingToy {
    pub source: Vec<f64>,
    pub source_weights: Vec<f64>,
    pub target: Vec<f64>,
    pub target_weights: Vec<f64>,
    pub sigma: f64,
    pub scheduler: Scheduler,
}

/// Posterior quantities at one `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretePosterior {
    pub x0_mean: f64,
    pub x1_mean: f64,
    pub velocity: f64,
}

impl DiscretePosterior {
    pub fn for_target(&self, target: PredictionTarget) -> f64 {
        match target {
            PredictionTarget::Ut => self.velocity,
            PredictionTarget::X0Pred => self.x0_mean,
            PredictionTarget::X1Pred => self.x1_mean,
        }
    }
}

fn check_weights(w: &[f64], atoms: &[f64], side: &str) -> Result<()> {
    if w.is_empty() || w.len() != atoms.len() {
        return Err(CgfmError::Config(format!(
            "{side}: {} atoms but {} weights",
            atoms.len(),
            w.len()
        )));
    }
    if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CgfmError::Config(format!("{side} weights must be non-negative and sum to 1")));
    }
    if atoms.iter().any(|a| !a.is_finite()) {
        return Err(CgfmError::Config(format!("{side} atoms must be finite")));
    }
    Ok(())
}

impl DiscreteCouplingToy {
    pub fn new(
        source: Vec<f64>,
        source_weights: Vec<f64>,
        target: Vec<f64>,
        target_weights: Vec<f64>,
        sigma: f64,
        scheduler: Scheduler,
    ) -> Result<Self> {
        check_weights(&source_weights, &source, "source")?;
        check_weights(&target_weights, &target, "target")?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(CgfmError::Config(format!("sigma must be > 0, got {sigma}")));
        }
        scheduler.validate()?;
        Ok(Self {
            source,
            source_weights,
            target,
            target_weights,
            sigma,
            scheduler,
        })
    }

    pub fn pairs(&self) -> usize {
        self.source.len() * self.target.len()
    }

    /// Exact posterior over atom pairs at `(t, x)`. Given a pair `(a, c)` and
    /// `X_t = x`, the smoothed source point is pinned to `(x - alpha c) / beta`,
    /// so the per-pair velocity is `alpha' c + beta' (x - alpha c) / beta`.
    pub fn posterior(&self, t: f64, x: f64) -> Result<DiscretePosterior> {
        if !(0.0..1.0).contains(&t) {
            return Err(CgfmError::Domain(format!(
                "discrete toy posterior needs 0 <= t < 1, got {t}"
            )));
        }
        let v = self.scheduler.eval(t)?;
        let sd = v.beta * self.sigma;
        let mut logw = Vec::with_capacity(self.pairs());
        for (&a, &wa) in self.source.iter().zip(&self.source_weights) {
            for (&c, &wc) in self.target.iter().zip(&self.target_weights) {
                let z = (x - v.alpha * c - v.beta * a) / sd;
                logw.push(wa.ln() + wc.ln() - 0.5 * z * z);
            }
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(CgfmError::Underflow { x, t });
        }
        let mut total = 0.0;
        let mut x0 = 0.0;
        let mut x1 = 0.0;
        let mut k = 0;
        for _ in &self.source {
            for &c in &self.target {
                let w = (logw[k] - max).exp();
                total += w;
                x0 += w * (x - v.alpha * c) / v.beta;
                x1 += w * c;
                k += 1;
            }
        }
        let (x0, x1) = (x0 / total, x1 / total);
        Ok(DiscretePosterior {
            x0_mean: x0,
            x1_mean: x1,
            velocity: v.d_alpha * x1 + v.d_beta * x0,
        })
    }

    /// Draws from the smoothed source: an atom by weight plus `sigma * eps`.
    pub fn sample_source(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let i = pick(&self.source_weights, rng.random_range(0.0..1.0));
                self.source[i] + self.sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    /// Fraction of `samples` whose nearest target atom is each atom.
    pub fn nearest_atom_fractions(&self, samples: &[f64]) -> Vec<f64> {
        let mut counts = vec![0usize; self.target.len()];
        for &x in samples {
            let j = (0..self.target.len())
                .min_by(|&i, &j| {
                    (x - self.target[i])
                        .abs()
                        .total_cmp(&(x - self.target[j]).abs())
                })
                .unwrap();
            counts[j] += 1;
        }
        counts.iter().map(|&c| c as f64 / samples.len() as f64).collect()
    }
}

fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Exact Bayes marginal velocity of the discrete toy at `(t, x)`.
pub fn discrete_marginal_velocity(toy: &DiscreteCouplingToy, t: f64, x: f64) -> Result<f64> {
    Ok(toy.posterior(t, x)?.velocity)
}

/// Gauss–Hermite rule for expectations under `N(0, 1)`: returns nodes and
/// weights with `sum w_k f(z_k) ~ E[f(Z)]`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the orthonormal physicists' Hermite recurrence.
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let weights = w.iter().map(|v| v / sqrt_pi).collect();
    (nodes, weights)
}

pub const GH_NODES: usize = 16;
pub const ENUMERATION_BUDGET: usize = 10_000;

/// Exact losses and gradients of the marginal (GM) and conditional (CGM)
/// objectives for a scalar network on a discrete toy.
#[derive(Debug, Clone)]
pub struct EnumeratedGrads {
    pub grad_gm: Vec<f64>,
    pub grad_cgm: Vec<f64>,
    pub loss_gm: f64,
    pub loss_cgm: f64,
    pub points: usize,
}

/// Enumerates every `(t, source atom, target atom, quadrature node)`
/// combination. The CGM objective regresses the per-sample target; the GM
/// objective regresses the posterior mean of that target at the same point.
/// `t` values are weighted equally.
pub fn enumerate_loss_grads(
    net: &VelocityNet,
    toy: &DiscreteCouplingToy,
    t_grid: &[f64],
    target: PredictionTarget,
) -> Result<EnumeratedGrads> {
    enumerate_loss_grads_with(net, toy, t_grid, target, GH_NODES, ENUMERATION_BUDGET)
}

pub fn enumerate_loss_grads_with(
    net: &VelocityNet,
    toy: &DiscreteCouplingToy,
    t_grid: &[f64],
    target: PredictionTarget,
    nodes: usize,
    budget: usize,
) -> Result<EnumeratedGrads> {
    let cfg = net.config();
    if cfg.channels != 1 || cfg.horizon != 1 {
        return Err(CgfmError::Config(format!(
            "enumeration needs a scalar network, got {} x {}",
            cfg.channels, cfg.horizon
        )));
    }
    let needed = t_grid.len() * toy.pairs() * nodes;
    if needed > budget {
        return Err(CgfmError::Budget { needed, budget });
    }
    if t_grid.is_empty() {
        return Err(CgfmError::Input("empty t grid".into()));
    }
    let (z, zw) = gauss_hermite(nodes);
    let s = toy.scheduler;
    let h = Array2::<f64>::zeros((1, cfg.history));
    let mut xs = Vec::with_capacity(needed);
    let mut ts = Vec::with_capacity(needed);
    let mut weight = Vec::with_capacity(needed);
    let mut g_cond = Vec::with_capacity(needed);
    let mut g_marg = Vec::with_capacity(needed);
    for &t in t_grid {
        let v = s.eval(t)?;
        for (&a, &wa) in toy.source.iter().zip(&toy.source_weights) {
            for (&c, &wc) in toy.target.iter().zip(&toy.target_weights) {
                for (&zk, &wk) in z.iter().zip(&zw) {
                    let x0 = a + toy.sigma * zk;
                    let xt = v.alpha * c + v.beta * x0;
                    let g = match target {
                        PredictionTarget::Ut => v.d_alpha * c + v.d_beta * x0,
                        PredictionTarget::X0Pred => x0,
                        PredictionTarget::X1Pred => c,
                    };
                    xs.push(xt);
                    ts.push(t);
                    weight.push(wa * wc * wk / t_grid.len() as f64);
                    g_cond.push(g);
                    g_marg.push(toy.posterior(t, xt)?.for_target(target));
                }
            }
        }
    }
    let states: Vec<Array2<f64>> = xs.iter().map(|&x| Array2::from_elem((1, 1), x)).collect();
    let input = net.assemble_inputs(
        ts.iter()
            .zip(&states)
            .map(|(&t, x)| (t, x.view(), h.view()))
            .collect::<Vec<_>>()
            .into_iter(),
    )?;
    let (out, cache) = net.forward_batch(&input)?;
    let u: Array1<f64> = out.column(0).to_owned();
    let objective = |g: &[f64]| -> (f64, Gradients) {
        let mut loss = 0.0;
        let mut up = Array2::zeros((needed, 1));
        for k in 0..needed {
            let r = u[k] - g[k];
            loss += weight[k] * r * r;
            up[[k, 0]] = 2.0 * weight[k] * r;
        }
        (loss, net.backward_batch(&cache, &up))
    };
    let (loss_cgm, grad_cgm) = objective(&g_cond);
    let (loss_gm, grad_gm) = objective(&g_marg);
    Ok(EnumeratedGrads {
        grad_gm: grad_gm.flat(),
        grad_cgm: grad_cgm.flat(),
        loss_gm,
        loss_cgm,
        points: needed,
    })
}

/// The toy used for the gradient-equality check: closely spaced atoms and
/// unit smoothing so every per-pair integrand is smooth on the quadrature
/// scale.
pub fn gradient_check_toy() -> DiscreteCouplingToy {
    DiscreteCouplingToy::new(
        vec![-0.4, 0.3],
        vec![0.6, 0.4],
        vec![0.5, 1.1],
        vec![0.45, 0.55],
        1.0,
        Scheduler::CondOt,
    )
    .expect("valid toy")
}

pub const GRADIENT_CHECK_T_GRID: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

/// Two source atoms at -1 and 1, two target atoms at -2 and 2 with unequal
/// weights, narrow smoothing.
pub fn transport_toy() -> DiscreteCouplingToy {
    DiscreteCouplingToy::new(
        vec![-1.0, 1.0],
        vec![0.5, 0.5],
        vec![-2.0, 2.0],
        vec![0.3, 0.7],
        0.1,
        Scheduler::CondOt,
    )
    .expect("valid toy")
}

/// `x0 -> x0 * exp(k)` is the exact time-1 flow of `u(t, x) = k x`.
pub fn linear_field_endpoint(x0: f64, k: f64) -> f64 {
    x0 * k.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::NetConfig;
    use crate::pathkit::conditional_velocity;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;

    #[test]
    fn quadratic_gradient() {
        let theta = [1.5, -2.0, 0.25, 0.0];
        let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &theta, 1e-5);
        for (gi, ti) in g.iter().zip(theta) {
            assert!((gi - 2.0 * ti).abs() < 1e-9);
        }
    }

    #[test]
    fn step_size_sweep_has_interior_minimum() {
        let f = |p: &[f64]| p[0].sin() * p[1].exp() + p[0].powi(3) * 0.1;
        let p = [0.7f64, -0.3];
        let exact = [
            p[0].cos() * p[1].exp() + 0.3 * p[0] * p[0],
            p[0].sin() * p[1].exp(),
        ];
        let errs: Vec<f64> = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]
            .iter()
            .map(|&h| max_abs_diff(&finite_diff_grad(f, &p, h), &exact))
            .collect();
        let best = errs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        // Truncation dominates on the left, rounding on the right.
        assert!(errs[0] > errs[best] && errs[6] > errs[best], "{errs:?}");
        assert!((2..=5).contains(&best), "{errs:?}");
    }

    #[test]
    fn gaussian_posterior_examples() {
        let s = Scheduler::CondOt;
        assert_eq!(gaussian_posterior_mean(s, 0.5, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap(), 1.0);
        for x in [-3.0, 0.0, 7.5] {
            assert_eq!(gaussian_posterior_mean(s, 0.3, x, 1.0, 2.0, 4.0, 0.0).unwrap(), 4.0);
        }
        assert!(gaussian_posterior_mean(s, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn gaussian_posterior_is_affine_in_x() {
        let toy = GaussianToy { mu0: 0.2, var0: 1.3, mu1: -1.0, var1: 0.4 };
        for s in Scheduler::ALL_DEFAULT {
            for t in [0.1, 0.5, 0.9] {
                let f = |x| toy.posterior_x1(s, t, x).unwrap();
                let (a, b, c) = (f(-1.0), f(0.5), f(2.0));
                assert!(((b - a) / 1.5 - (c - b) / 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_posterior_matches_monte_carlo() {
        let toy = GaussianToy { mu0: 0.0, var0: 1.0, mu1: 3.0, var1: 0.5 };
        let s = Scheduler::Poly(3);
        let t = 0.7;
        let v = s.eval(t).unwrap();
        let mut rng = Rng::seed_from_u64(12);
        let x_star = 1.0;
        let (mut sum, mut n) = (0.0, 0usize);
        for _ in 0..1_000_000 {
            let x0: f64 = rng.sample(StandardNormal);
            let x1 = 3.0 + 0.5f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let xt = v.alpha * x1 + v.beta * x0;
            if (xt - x_star).abs() < 0.02 {
                sum += x1;
                n += 1;
            }
        }
        let emp = sum / n as f64;
        let exact = toy.posterior_x1(s, t, x_star).unwrap();
        assert!(n > 1000);
        assert!((emp - exact).abs() < 0.02, "{emp} vs {exact}");
    }

    #[test]
    fn gaussian_identity_between_posteriors() {
        let toy = GaussianToy { mu0: 0.5, var0: 2.0, mu1: 3.0, var1: 1.0 };
        for s in Scheduler::ALL_DEFAULT {
            for t in [0.0, 0.25, 0.8, 1.0] {
                let v = s.eval(t).unwrap();
                for x in [-1.0, 0.3, 4.0] {
                    let e1 = toy.posterior_x1(s, t, x).unwrap();
                    let e0 = toy.posterior_x0(s, t, x).unwrap();
                    assert!((v.alpha * e1 + v.beta * e0 - x).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn symmetric_toy_has_zero_velocity_at_origin() {
        let toy = DiscreteCouplingToy::new(
            vec![-1.0, 1.0],
            vec![0.5, 0.5],
            vec![-1.0, 1.0],
            vec![0.5, 0.5],
            0.3,
            Scheduler::CondOt,
        )
        .unwrap();
        for t in [0.0, 0.2, 0.5, 0.9, 0.999] {
            assert!(discrete_marginal_velocity(&toy, t, 0.0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn toy_validation() {
        let s = Scheduler::CondOt;
        assert!(DiscreteCouplingToy::new(vec![0.0], vec![0.9], vec![1.0], vec![1.0], 0.1, s).is_err());
        assert!(DiscreteCouplingToy::new(vec![0.0], vec![1.0], vec![1.0], vec![1.0], 0.0, s).is_err());
        assert!(DiscreteCouplingToy::new(vec![0.0, 1.0], vec![1.0], vec![1.0], vec![1.0], 0.1, s).is_err());
        let toy = transport_toy();
        assert!(toy.posterior(1.0, 0.0).is_err());
    }

    #[test]
    fn far_points_do_not_underflow() {
        let toy = transport_toy();
        let v = discrete_marginal_velocity(&toy, 0.99, 1e4).unwrap();
        assert!(v.is_finite());
        let err = toy.posterior(0.5, f64::NAN).unwrap_err();
        assert!(matches!(err, CgfmError::Underflow { .. }));
    }

    proptest! {
        #[test]
        fn single_pair_reduces_to_conditional_velocity(
            a in -3.0f64..3.0, c in -3.0f64..3.0, x in -5.0f64..5.0,
            t in 0.0f64..0.99, sigma in 0.05f64..2.0, which in 0usize..4,
        ) {
            let s = Scheduler::ALL_DEFAULT[which];
            let toy = DiscreteCouplingToy::new(vec![a], vec![1.0], vec![c], vec![1.0], sigma, s).unwrap();
            let v = s.eval(t).unwrap();
            let x0 = (x - v.alpha * c) / v.beta;
            let expected = conditional_velocity(
                s, t, &Array2::from_elem((1, 1), x0), &Array2::from_elem((1, 1), c),
            ).unwrap()[[0, 0]];
            let got = discrete_marginal_velocity(&toy, t, x).unwrap();
            prop_assert!((got - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
            // On the path through the source atom itself it is alpha' c + beta' a.
            let on_path = discrete_marginal_velocity(&toy, t, v.alpha * c + v.beta * a).unwrap();
            prop_assert!((on_path - (v.d_alpha * c + v.d_beta * a)).abs() <= 1e-9 * (1.0 + on_path.abs()));
        }
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let (z, w) = gauss_hermite(16);
        let moment = |k: i32| z.iter().zip(&w).map(|(z, w)| w * z.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-14);
        assert!(moment(1).abs() < 1e-14);
        assert!((moment(2) - 1.0).abs() < 1e-13);
        assert!((moment(4) - 3.0).abs() < 1e-12);
        assert!((moment(10) - 945.0).abs() < 1e-8);
        assert!((moment(30) - 6_190_283_353_629_375.0).abs() / 6.19e15 < 1e-10);
        let (z64, w64) = gauss_hermite(64);
        let m = z64.iter().zip(&w64).map(|(z, w)| w * z.powi(8)).sum::<f64>();
        assert!((m - 105.0).abs() < 1e-9);
    }

    fn tiny_net(seed: u64) -> VelocityNet {
        let mut rng = Rng::seed_from_u64(seed);
        let cfg = NetConfig::new(1, 1, 1).with_hidden(vec![4]).with_time_embed_k(1);
        VelocityNet::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn tiny_net_is_small() {
        assert!(tiny_net(0).num_params() <= 50);
    }

    #[test]
    fn gradients_coincide_for_every_target() {
        let toy = gradient_check_toy();
        for target in PredictionTarget::ALL {
            for seed in 0..3 {
                let r = enumerate_loss_grads(&tiny_net(seed), &toy, &GRADIENT_CHECK_T_GRID, target).unwrap();
                let d = max_abs_diff(&r.grad_gm, &r.grad_cgm);
                assert!(d < 1e-6, "{target} seed {seed}: {d}");
                assert!(r.loss_cgm > r.loss_gm + 1e-3, "{target}: {} vs {}", r.loss_cgm, r.loss_gm);
            }
        }
    }

    #[test]
    fn enumeration_matches_finer_quadrature() {
        let toy = gradient_check_toy();
        let net = tiny_net(7);
        let coarse = enumerate_loss_grads(&net, &toy, &GRADIENT_CHECK_T_GRID, PredictionTarget::Ut).unwrap();
        let fine = enumerate_loss_grads_with(&net, &toy, &GRADIENT_CHECK_T_GRID, PredictionTarget::Ut, 64, 100_000)
            .unwrap();
        assert!(max_abs_diff(&coarse.grad_cgm, &fine.grad_cgm) < 1e-9);
        assert!(max_abs_diff(&coarse.grad_gm, &fine.grad_gm) < 1e-7);
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let toy = gradient_check_toy();
        let grid: Vec<f64> = (1..200).map(|i| i as f64 / 200.0).collect();
        let err = enumerate_loss_grads(&tiny_net(1), &toy, &grid, PredictionTarget::Ut).unwrap_err();
        assert!(matches!(err, CgfmError::Budget { .. }));
    }

    #[test]
    fn enumeration_gradient_matches_finite_differences() {
        let toy = gradient_check_toy();
        let mut net = tiny_net(3);
        let theta = net.params_flat();
        let r = enumerate_loss_grads(&net, &toy, &GRADIENT_CHECK_T_GRID, PredictionTarget::X1Pred).unwrap();
        let fd = finite_diff_grad(
            |p| {
                net.set_params_flat(p).unwrap();
                enumerate_loss_grads(&net, &toy, &GRADIENT_CHECK_T_GRID, PredictionTarget::X1Pred)
                    .unwrap()
                    .loss_cgm
            },
            &theta,
            1e-5,
        );
        assert!(max_relative_error(&r.grad_cgm, &fd) < 1e-4);
    }
}
