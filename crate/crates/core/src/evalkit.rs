//! Metrics, multi-seed aggregation, synthetic data and the PCA diagnostic.

use std::f64::consts::TAU;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{AuxPredictions, AuxProvenance, RawSeries, WindowedDataset};
use crate::error::{CgfmError, Result};
use crate::rng::{stream, stream_rng};

/// Joint MSE and MAE over every window, channel and horizon step.
pub fn mse_mae(pred: &[Array2<f64>], truth: &[Array2<f64>]) -> Result<(f64, f64)> {
    let per = window_errors(pred, truth)?;
    let entries: usize = truth.iter().map(|t| t.len()).sum();
    if entries == 0 {
        return Err(CgfmError::Input("no entries to score".into()));
    }
    let n = entries as f64;
    let sq: f64 = per.iter().map(|w| w.sum_sq).sum();
    let ab: f64 = per.iter().map(|w| w.sum_abs).sum();
    Ok((sq / n, ab / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowError {
    pub sum_sq: f64,
    pub sum_abs: f64,
    pub entries: usize,
}

pub fn window_errors(pred: &[Array2<f64>], truth: &[Array2<f64>]) -> Result<Vec<WindowError>> {
    if pred.len() != truth.len() {
        return Err(CgfmError::Alignment {
            expected: truth.len(),
            found: pred.len(),
        });
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            if p.dim() != t.dim() {
                return Err(CgfmError::Shape {
                    context: "mse_mae",
                    expected: t.shape().to_vec(),
                    found: p.shape().to_vec(),
                });
            }
            let mut e = WindowError {
                sum_sq: 0.0,
                sum_abs: 0.0,
                entries: t.len(),
            };
            for (a, b) in p.iter().zip(t.iter()) {
                let d = a - b;
                e.sum_sq += d * d;
                e.sum_abs += d.abs();
            }
            Ok(e)
        })
        .collect()
}

/// Everything that identifies a forecasting configuration except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub scheduler: String,
    pub target: String,
    pub source: String,
    pub sigma: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub fingerprint: ConfigFingerprint,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub seed: u64,
    /// Omitted unless timing was requested, so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
    #[serde(skip)]
    pub per_window: Vec<WindowError>,
}

impl ForecastReport {
    pub fn from_predictions(
        fingerprint: ConfigFingerprint,
        seed: u64,
        pred: &[Array2<f64>],
        truth: &[Array2<f64>],
    ) -> Result<Self> {
        let (mse, mae) = mse_mae(pred, truth)?;
        Ok(Self {
            fingerprint,
            mse,
            mae,
            n_windows: truth.len(),
            seed,
            wall_ms: None,
            per_window: window_errors(pred, truth)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero when n = 1.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub fingerprint: ConfigFingerprint,
    pub n: usize,
    pub single_run: bool,
    pub seeds: Vec<u64>,
    pub mse: MetricSummary,
    pub mae: MetricSummary,
}

fn summarize(xs: &[f64]) -> MetricSummary {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MetricSummary { mean, std }
}

/// Mean and sample std across seeds; every report must share a fingerprint.
pub fn aggregate(reports: &[ForecastReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| CgfmError::Input("no reports to aggregate".into()))?;
    if let Some(other) = reports.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(CgfmError::Fingerprint(format!(
            "{:?} vs {:?}",
            first.fingerprint, other.fingerprint
        )));
    }
    let mse: Vec<f64> = reports.iter().map(|r| r.mse).collect();
    let mae: Vec<f64> = reports.iter().map(|r| r.mae).collect();
    Ok(AggregateReport {
        fingerprint: first.fingerprint.clone(),
        n: reports.len(),
        single_run: reports.len() == 1,
        seeds: reports.iter().map(|r| r.seed).collect(),
        mse: summarize(&mse),
        mae: summarize(&mae),
    })
}

/// Parameters of one synthetic channel:
/// `x(tau) = sum_k amp_k * sin(2 pi tau / period_k + phase_k) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinComponent {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

pub const SINMIX_NOISE_STD: f64 = 0.05;

/// Per-channel components drawn from `seed`. The first component dominates
/// and has an integer period; the other two have irrational period ratios
/// to it.
pub fn sinmix_components(channels: usize, seed: u64) -> Vec<[SinComponent; 3]> {
    let mut rng = stream_rng(seed, stream::DATA);
    (0..channels)
        .map(|_| {
            let p0 = f64::from(rng.random_range(20u32..=32));
            let mut phase = || rng.random_range(0.0..TAU);
            let (ph0, ph1, ph2) = (phase(), phase(), phase());
            [
                SinComponent {
                    amplitude: 1.0,
                    period: p0,
                    phase: ph0,
                },
                SinComponent {
                    amplitude: rng.random_range(0.08..0.15),
                    period: p0 * std::f64::consts::FRAC_1_SQRT_2 * rng.random_range(0.6..0.75),
                    phase: ph1,
                },
                SinComponent {
                    amplitude: rng.random_range(0.08..0.15),
                    period: p0 * std::f64::consts::E * rng.random_range(0.9..1.1),
                    phase: ph2,
                },
            ]
        })
        .collect()
}

/// Sum-of-sinusoids series with Gaussian noise of standard deviation 0.05.
pub fn synth_sinmix(len: usize, channels: usize, seed: u64) -> Result<RawSeries> {
    synth_sinmix_with_noise(len, channels, seed, SINMIX_NOISE_STD)
}

pub fn synth_sinmix_with_noise(
    len: usize,
    channels: usize,
    seed: u64,
    noise_std: f64,
) -> Result<RawSeries> {
    if len < 200 {
        return Err(CgfmError::Config(format!("sinmix needs at least 200 steps, got {len}")));
    }
    let comps = sinmix_components(channels, seed);
    let mut noise = stream_rng(seed, stream::DATA ^ 0xA5A5);
    let mut data = Array2::zeros((len, channels));
    for i in 0..len {
        for (c, cc) in comps.iter().enumerate() {
            let tau = i as f64;
            let clean: f64 = cc
                .iter()
                .map(|k| k.amplitude * (TAU * tau / k.period + k.phase).sin())
                .sum();
            let eps: f64 = noise.sample(StandardNormal);
            data[[i, c]] = clean + noise_std * eps;
        }
    }
    Ok(RawSeries {
        data,
        names: (0..channels).map(|c| format!("s{c}")).collect(),
    })
}

/// Number of trailing history steps that drive the synthetic auxiliary bias.
pub const BIAS_LOOKBACK: usize = 8;

/// `0.5 * tanh(mean of the last 8 history steps)` per channel.
pub fn history_bias(h: &Array2<f64>) -> Array1<f64> {
    let l = h.ncols();
    let k = BIAS_LOOKBACK.min(l);
    h.slice(ndarray::s![.., l - k..])
        .mean_axis(Axis(1))
        .unwrap()
        .mapv(|m| 0.5 * m.tanh())
}

/// Auxiliary predictions equal to the true future plus a history-dependent
/// bias broadcast over the horizon.
pub fn synth_biased_aux(dataset: &WindowedDataset) -> Result<AuxPredictions> {
    let preds = (0..dataset.len())
        .map(|i| {
            let h = dataset.history(i)?;
            let mut f = dataset.future(i)?;
            let b = history_bias(&h);
            for (mut row, bias) in f.outer_iter_mut().zip(b.iter()) {
                row += *bias;
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    AuxPredictions::from_windows(
        &preds,
        dataset.channels(),
        dataset.horizon(),
        AuxProvenance::Synthetic,
    )
}

/// Repeats each channel's last observed value over the horizon.
pub fn persistence_forecast(h: &Array2<f64>, horizon: usize) -> Array2<f64> {
    let last = h.column(h.ncols() - 1).to_owned();
    Array2::from_shape_fn((h.nrows(), horizon), |(c, _)| last[c])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `n x 2` projections onto the first two components.
    pub projection: Array2<f64>,
    /// `2 x d`, orthonormal rows.
    pub components: Array2<f64>,
    pub eigenvalues: [f64; 2],
    pub explained_variance_ratio: [f64; 2],
}

pub const PCA_MAX_ITERS: usize = 500;
pub const PCA_TOL: f64 = 1e-9;

/// Projects the rows of `pred` (`n x d`) onto the top two principal
/// components, found by power iteration with deflation on the covariance.
pub fn pca_trajectory(pred: &Array2<f64>) -> Result<PcaResult> {
    let (n, d) = pred.dim();
    if n < 3 {
        return Err(CgfmError::Input(format!("PCA needs at least 3 rows, got {n}")));
    }
    if d == 0 {
        return Err(CgfmError::Degenerate("PCA input has no columns".into()));
    }
    let mean = pred.mean_axis(Axis(0)).unwrap();
    let centered = pred - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let trace: f64 = cov.diag().sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(CgfmError::Degenerate("input has zero variance".into()));
    }

    let mut work = cov.clone();
    let mut comps: Vec<Array1<f64>> = Vec::with_capacity(2);
    let mut eig = [0.0; 2];
    for k in 0..2.min(d) {
        let (v, lambda) = power_iterate(&work, &cov, &comps, trace);
        work -= &(lambda * outer(&v, &v));
        eig[k] = lambda;
        comps.push(v);
    }
    if d == 1 {
        comps.push(Array1::zeros(1));
    }
    let mut components = Array2::zeros((2, d));
    for (k, c) in comps.iter().enumerate() {
        components.row_mut(k).assign(c);
    }
    let projection = centered.dot(&components.t());
    Ok(PcaResult {
        projection,
        components,
        eigenvalues: eig,
        explained_variance_ratio: [eig[0] / trace, eig[1] / trace],
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

fn orthogonalize(v: &mut Array1<f64>, against: &[Array1<f64>]) {
    for u in against {
        let p = v.dot(u);
        v.scaled_add(-p, u);
    }
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
    n
}

/// Largest eigenpair of `work` orthogonal to `prev`. Starts from the
/// normalized all-ones vector; if that start has no usable component, the
/// coordinate axes are tried in order.
fn power_iterate(
    work: &Array2<f64>,
    cov: &Array2<f64>,
    prev: &[Array1<f64>],
    trace: f64,
) -> (Array1<f64>, f64) {
    let d = work.nrows();
    let negligible = 1e-13 * trace;
    let starts = std::iter::once(Array1::from_elem(d, 1.0)).chain((0..d).map(|i| {
        let mut e = Array1::zeros(d);
        e[i] = 1.0;
        e
    }));
    let mut fallback: Option<Array1<f64>> = None;
    for mut v in starts {
        orthogonalize(&mut v, prev);
        if normalize(&mut v) < 1e-8 {
            continue;
        }
        if fallback.is_none() {
            fallback = Some(v.clone());
        }
        let mut w = work.dot(&v);
        orthogonalize(&mut w, prev);
        if w.dot(&w).sqrt() <= negligible {
            continue;
        }
        for _ in 0..PCA_MAX_ITERS {
            let mut next = work.dot(&v);
            orthogonalize(&mut next, prev);
            if normalize(&mut next) <= negligible {
                break;
            }
            let delta = (&next - &v).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            v = next;
            if delta < PCA_TOL {
                break;
            }
        }
        fix_sign(&mut v);
        let lambda = v.dot(&cov.dot(&v)).max(0.0);
        return (v, lambda);
    }
    // Remaining variance is numerically zero: any unit vector orthogonal
    // to the previous components is an eigenvector with eigenvalue 0.
    let mut v = fallback.unwrap_or_else(|| Array1::zeros(d));
    fix_sign(&mut v);
    (v, 0.0)
}

/// Makes the largest-magnitude entry positive.
fn fix_sign(v: &mut Array1<f64>) {
    let idx = v
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
        .0;
    if v.get(idx).is_some_and(|&x| x < 0.0) {
        v.mapv_inplace(|x| -x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{SplitRatios, Split};
    use crate::rng::Rng;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn fp(s: &str) -> ConfigFingerprint {
        ConfigFingerprint {
            scheduler: s.into(),
            target: "x1".into(),
            source: "noise".into(),
            sigma: None,
            steps: 20,
        }
    }

    fn report(s: &str, seed: u64, mse: f64, mae: f64) -> ForecastReport {
        ForecastReport {
            fingerprint: fp(s),
            mse,
            mae,
            n_windows: 10,
            seed,
            wall_ms: None,
            per_window: vec![],
        }
    }

    #[test]
    fn metric_examples() {
        let truth = vec![arr2(&[[1.0, 2.0], [3.0, 4.0]]), arr2(&[[0.0, -1.0], [5.0, 6.0]])];
        assert_eq!(mse_mae(&truth, &truth).unwrap(), (0.0, 0.0));
        let plus_one: Vec<_> = truth.iter().map(|t| t + 1.0).collect();
        assert_eq!(mse_mae(&plus_one, &truth).unwrap(), (1.0, 1.0));
        let mut half = truth.clone();
        half[0] += 2.0;
        assert_eq!(mse_mae(&half, &truth).unwrap(), (2.0, 1.0));
        assert!(mse_mae(&truth[..1], &truth).is_err());
        assert!(mse_mae(&[arr2(&[[1.0]]), arr2(&[[1.0]])], &truth).is_err());
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = Rng::seed_from_u64(3);
        let truth: Vec<_> = (0..7).map(|_| crate::pathkit::standard_normal((2, 3), &mut rng)).collect();
        let pred: Vec<_> = (0..7).map(|_| crate::pathkit::standard_normal((2, 3), &mut rng)).collect();
        let (a, b) = mse_mae(&pred, &truth).unwrap();
        let order = [3, 0, 6, 1, 5, 2, 4];
        let p2: Vec<_> = order.iter().map(|&i| pred[i].clone()).collect();
        let t2: Vec<_> = order.iter().map(|&i| truth[i].clone()).collect();
        let (c, d) = mse_mae(&p2, &t2).unwrap();
        assert!((a - c).abs() < 1e-15 && (b - d).abs() < 1e-15);
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[report("condot", 1, 0.3, 0.2)]).unwrap();
        assert!(one.single_run);
        assert_eq!(one.mse.std, 0.0);

        let two = aggregate(&[report("condot", 1, 0.3, 0.2), report("condot", 2, 0.5, 0.4)]).unwrap();
        assert!((two.mse.mean - 0.4).abs() < 1e-15);
        assert!((two.mse.std - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert_eq!(two.seeds, vec![1, 2]);

        let mixed = aggregate(&[report("condot", 1, 0.3, 0.2), report("poly:3", 2, 0.5, 0.4)]);
        assert!(matches!(mixed, Err(CgfmError::Fingerprint(_))));

        let same: Vec<_> = (0..5).map(|s| report("vp", s, 0.123, 0.456)).collect();
        let agg = aggregate(&same).unwrap();
        assert!((agg.mse.mean - 0.123).abs() < 1e-15);
        assert!((agg.mae.mean - 0.456).abs() < 1e-15);
        assert!(agg.mse.std < 1e-15);
    }

    #[test]
    fn report_json_has_no_timing_by_default() {
        let r = report("condot", 4, 0.1, 0.2);
        let json = r.to_json().unwrap();
        assert!(!json.contains("wall_ms"));
        let back: ForecastReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.mse, 0.1);
        let timed = ForecastReport { wall_ms: Some(12), ..r };
        assert!(timed.to_json().unwrap().contains("\"wall_ms\": 12"));
    }

    #[test]
    fn sinmix_is_seeded() {
        let a = synth_sinmix(300, 2, 5).unwrap();
        let b = synth_sinmix(300, 2, 5).unwrap();
        let c = synth_sinmix(300, 2, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, c.data);
        assert!(synth_sinmix(199, 1, 0).is_err());
    }

    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let m = x.iter().sum::<f64>() / n as f64;
        let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let cov: f64 = (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum();
        cov / var
    }

    #[test]
    fn noiseless_sinmix_autocorrelation_at_dominant_period() {
        for seed in 0..10 {
            let raw = synth_sinmix_with_noise(4000, 3, seed, 0.0).unwrap();
            let comps = sinmix_components(3, seed);
            for c in 0..3 {
                let col = raw.data.column(c).to_vec();
                let lag = comps[c][0].period as usize;
                let r = autocorr(&col, lag);
                assert!(r > 0.9, "seed {seed} channel {c}: {r}");
            }
        }
    }

    #[test]
    fn biased_aux_examples() {
        let raw = synth_sinmix(600, 2, 1).unwrap();
        let ds = WindowedDataset::new(&raw, 24, 6, SplitRatios::default()).unwrap();
        let aux = synth_biased_aux(&ds).unwrap();
        let mut sq = 0.0;
        let mut count = 0;
        for i in ds.indices(Split::Test) {
            let truth = ds.future(i).unwrap();
            let a = crate::pathkit::AuxLookup::aux_for(&aux, i).unwrap();
            let b = history_bias(&ds.history(i).unwrap());
            for c in 0..2 {
                for f in 0..6 {
                    let d = a[[c, f]] - truth[[c, f]];
                    assert!(d.abs() <= 0.5);
                    assert!((d - b[c]).abs() < 1e-12);
                    sq += d * d;
                    count += 1;
                }
            }
        }
        assert!(sq / count as f64 > 0.0);
        assert_eq!(history_bias(&Array2::zeros((3, 10))), Array1::<f64>::zeros(3));
    }

    #[test]
    fn pca_on_a_line() {
        let dir = [1.0, -1.0, 0.0, 2.0];
        let pts = Array2::from_shape_fn((50, 4), |(i, j)| (i as f64 * 0.3 - 4.0) * dir[j] + 7.0);
        let r = pca_trajectory(&pts).unwrap();
        assert!(r.explained_variance_ratio[0] > 0.999);
        assert!(r.explained_variance_ratio[1].abs() < 1e-9);
        check_orthonormal(&r.components);
    }

    #[test]
    fn pca_line_orthogonal_to_ones() {
        // The default start vector has no component along this direction.
        let pts = Array2::from_shape_fn((20, 3), |(i, j)| i as f64 * [1.0, -1.0, 0.0][j]);
        let r = pca_trajectory(&pts).unwrap();
        assert!(r.explained_variance_ratio[0] > 0.999);
        let c = r.components.row(0);
        assert!((c[0].abs() - 0.5f64.sqrt()).abs() < 1e-9);
    }

    fn check_orthonormal(c: &Array2<f64>) {
        let g = c.dot(&c.t());
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-8, "{g}");
            }
        }
    }

    #[test]
    fn pca_isotropic_cloud() {
        let mut rng = Rng::seed_from_u64(17);
        let pts = crate::pathkit::standard_normal((10_000, 3), &mut rng);
        let r = pca_trajectory(&pts).unwrap();
        for ratio in r.explained_variance_ratio {
            assert!((ratio - 1.0 / 3.0).abs() < 0.05, "{ratio}");
        }
        check_orthonormal(&r.components);
    }

    #[test]
    fn pca_invariant_under_mean_shift() {
        let mut rng = Rng::seed_from_u64(18);
        let base = crate::pathkit::standard_normal((40, 5), &mut rng)
            * Array1::from(vec![3.0, 1.0, 0.5, 0.2, 0.1]);
        let shifted = &base + &Array1::from(vec![10.0, -4.0, 2.0, 0.0, 100.0]);
        let a = pca_trajectory(&base).unwrap();
        let b = pca_trajectory(&shifted).unwrap();
        for k in 0..2 {
            let pa = a.projection.column(k);
            let pb = b.projection.column(k);
            let same = pa.iter().zip(pb.iter()).all(|(x, y)| (x - y).abs() < 1e-8);
            let flipped = pa.iter().zip(pb.iter()).all(|(x, y)| (x + y).abs() < 1e-8);
            assert!(same || flipped);
        }
    }

    #[test]
    fn pca_errors() {
        assert!(pca_trajectory(&Array2::zeros((2, 3))).is_err());
        assert!(matches!(
            pca_trajectory(&Array2::from_elem((5, 3), 1.5)),
            Err(CgfmError::Degenerate(_))
        ));
    }

    #[test]
    fn pca_sign_convention() {
        let mut rng = Rng::seed_from_u64(19);
        let pts = crate::pathkit::standard_normal((30, 4), &mut rng) * Array1::from(vec![5.0, 2.0, 1.0, 0.5]);
        let r = pca_trajectory(&pts).unwrap();
        for row in r.components.outer_iter() {
            let big = row.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
            assert!(big > 0.0);
        }
    }
}
