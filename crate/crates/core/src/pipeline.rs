//! End-to-end runs: dataset and auxiliary setup, training, forecasting over
//! a split, and scoring. Shared by the command-line driver and the
//! integration tests.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    fit_linear_aux, load_aux_csv, load_csv, AuxPredictions, RawSeries, Split, SplitRatios,
    WindowedDataset, DEFAULT_RIDGE_LAMBDA,
};
use crate::error::{CgfmError, Result};
use crate::evalkit::{
    mse_mae, persistence_forecast, synth_biased_aux, synth_sinmix_with_noise, ConfigFingerprint,
    ForecastReport, SINMIX_NOISE_STD,
};
use crate::netcore::{VelocityNet, DEFAULT_TIME_EMBED_K, DEFAULT_WIDTH};
use crate::pathkit::{AuxLookup, PredictionTarget, SourceMode, DEFAULT_SIGMA};
use crate::sampling::{forecast_windows, SampleConfig, DEFAULT_EPS_DEN, DEFAULT_STEPS};
use crate::scheduler::Scheduler;
use crate::training::{train, TrainConfig, TrainOutcome, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Noise,
    Aux,
}

/// Where auxiliary predictions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AuxSpec {
    /// The built-in instance-normalized ridge forecaster.
    BuiltinLinear,
    /// Truth plus a history-dependent bias (synthetic data only makes sense).
    SyntheticBiased,
    /// A per-window CSV covering every window.
    File(PathBuf),
}

impl FromStr for AuxSpec {
    type Err = CgfmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" => Err(CgfmError::Config("empty auxiliary spec".into())),
            "builtin-linear" => Ok(AuxSpec::BuiltinLinear),
            "synthetic-biased" => Ok(AuxSpec::SyntheticBiased),
            p => Ok(AuxSpec::File(PathBuf::from(p))),
        }
    }
}

impl fmt::Display for AuxSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuxSpec::BuiltinLinear => write!(f, "builtin-linear"),
            AuxSpec::SyntheticBiased => write!(f, "synthetic-biased"),
            AuxSpec::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl TryFrom<String> for AuxSpec {
    type Error = CgfmError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AuxSpec> for String {
    fn from(a: AuxSpec) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub len: usize,
    pub channels: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            len: 4000,
            channels: 3,
            seed: 0,
            noise_std: SINMIX_NOISE_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: Option<usize>,
    pub patience: usize,
    pub eval_every: usize,
    pub val_max_windows: usize,
    pub hidden: Vec<usize>,
    pub time_embed_k: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            max_steps: t.max_steps,
            patience: t.patience,
            eval_every: t.eval_every,
            val_max_windows: t.val_max_windows,
            hidden: vec![DEFAULT_WIDTH; 2],
            time_embed_k: DEFAULT_TIME_EMBED_K,
        }
    }
}

/// Everything a run needs. Serializes to the resolved config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub datetime_column: Option<String>,
    pub synthetic: Option<SynthSpec>,
    pub history: usize,
    pub horizon: usize,
    pub split: SplitRatios,
    pub scheduler: Scheduler,
    pub target: PredictionTarget,
    pub source: SourceKind,
    /// Smoothing applied to auxiliary outputs during training.
    pub sigma: f64,
    /// Smoothing at sampling time; defaults to `sigma`.
    pub sample_sigma: Option<f64>,
    pub aux: Option<AuxSpec>,
    pub ridge_lambda: f64,
    pub seed: u64,
    pub train: TrainParams,
    pub steps: usize,
    pub num_samples: usize,
    pub eps_den: f64,
    pub eval_split: Split,
    /// Record wall-clock time in reports (makes them non-reproducible).
    pub timing: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            datetime_column: None,
            synthetic: None,
            history: 96,
            horizon: 96,
            split: SplitRatios::default(),
            scheduler: Scheduler::Poly(3),
            target: PredictionTarget::X1Pred,
            source: SourceKind::Noise,
            sigma: DEFAULT_SIGMA,
            sample_sigma: None,
            aux: None,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            seed: 0,
            train: TrainParams::default(),
            steps: DEFAULT_STEPS,
            num_samples: 1,
            eps_den: DEFAULT_EPS_DEN,
            eval_split: Split::Test,
            timing: false,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (None, None) => {
                return Err(CgfmError::Config(
                    "no dataset: set a data path or a synthetic spec".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(CgfmError::Config(
                    "set either a data path or a synthetic spec, not both".into(),
                ))
            }
            _ => {}
        }
        if self.history == 0 || self.horizon == 0 {
            return Err(CgfmError::Config("history and horizon must be >= 1".into()));
        }
        self.split.validate()?;
        if self.source == SourceKind::Aux && self.aux.is_none() {
            return Err(CgfmError::Config(
                "auxiliary source mode needs an auxiliary spec".into(),
            ));
        }
        if !(self.ridge_lambda > 0.0) {
            return Err(CgfmError::Config("ridge_lambda must be > 0".into()));
        }
        self.train_config().validate()?;
        self.sample_config().validate()?;
        Ok(())
    }

    pub fn train_source(&self) -> SourceMode {
        match self.source {
            SourceKind::Noise => SourceMode::Noise,
            SourceKind::Aux => SourceMode::AuxOutput { sigma: self.sigma },
        }
    }

    pub fn sample_source(&self) -> SourceMode {
        match self.source {
            SourceKind::Noise => SourceMode::Noise,
            SourceKind::Aux => SourceMode::AuxOutput {
                sigma: self.sample_sigma.unwrap_or(self.sigma),
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let p = &self.train;
        TrainConfig {
            scheduler: self.scheduler,
            target: self.target,
            source: self.train_source(),
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            seed: self.seed,
            max_steps: p.max_steps,
            patience: p.patience,
            eval_every: p.eval_every,
            val_max_windows: p.val_max_windows,
            hidden: p.hidden.clone(),
            time_embed_k: p.time_embed_k,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.steps,
            target: self.target,
            source: self.sample_source(),
            eps_den: self.eps_den,
            num_samples: self.num_samples,
            seed: self.seed,
        }
    }

    pub fn fingerprint(&self) -> ConfigFingerprint {
        ConfigFingerprint {
            scheduler: self.scheduler.to_string(),
            target: self.target.to_string(),
            source: match self.source {
                SourceKind::Noise => "noise".into(),
                SourceKind::Aux => "aux".into(),
            },
            sigma: self.sample_source().sigma(),
            steps: self.steps,
        }
    }

    pub fn load_raw(&self) -> Result<RawSeries> {
        match (&self.data, &self.synthetic) {
            (Some(p), None) => load_csv(p, self.datetime_column.as_deref()),
            (None, Some(s)) => synth_sinmix_with_noise(s.len, s.channels, s.seed, s.noise_std),
            _ => {
                self.validate()?;
                unreachable!("validate rejects this")
            }
        }
    }

    pub fn build_dataset(&self) -> Result<WindowedDataset> {
        WindowedDataset::new(&self.load_raw()?, self.history, self.horizon, self.split)
    }

    /// Auxiliary predictions from `aux`, or `None` when it is unset.
    pub fn build_aux(&self, ds: &WindowedDataset) -> Result<Option<AuxPredictions>> {
        let Some(spec) = &self.aux else {
            return Ok(None);
        };
        Ok(Some(match spec {
            AuxSpec::BuiltinLinear => fit_linear_aux(ds, self.ridge_lambda)?,
            AuxSpec::SyntheticBiased => synth_biased_aux(ds)?,
            AuxSpec::File(p) => load_aux_csv(p, ds)?,
        }))
    }
}

/// Trains on the dataset's train split, validating on its val split.
pub fn train_model(
    cfg: &RunConfig,
    ds: &WindowedDataset,
    aux: Option<&AuxPredictions>,
) -> Result<TrainOutcome> {
    let tc = cfg.train_config();
    let set = TrainingSet::from_dataset(ds, tc.val_max_windows)?;
    let aux_for_training = match cfg.source {
        SourceKind::Aux => Some(aux.ok_or(CgfmError::MissingAux { window: 0 })? as &dyn AuxLookup),
        SourceKind::Noise => None,
    };
    train(&set, aux_for_training, &tc)
}

/// Forecasts every window of `split`; returns window indices and forecasts.
pub fn forecast_split(
    cfg: &RunConfig,
    net: &VelocityNet,
    ds: &WindowedDataset,
    aux: Option<&AuxPredictions>,
    split: Split,
    threads: Option<usize>,
) -> Result<(Vec<usize>, Vec<Array2<f64>>)> {
    let nc = net.config();
    if (nc.channels, nc.history, nc.horizon) != (ds.channels(), ds.history_len(), ds.horizon()) {
        return Err(CgfmError::Shape {
            context: "network vs dataset",
            expected: vec![ds.channels(), ds.history_len(), ds.horizon()],
            found: vec![nc.channels, nc.history, nc.horizon],
        });
    }
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(CgfmError::EmptySplit("forecast split"));
    }
    let windows = idx
        .iter()
        .map(|&w| Ok((w, ds.history(w)?)))
        .collect::<Result<Vec<_>>>()?;
    let aux = match cfg.source {
        SourceKind::Aux => Some(aux.ok_or(CgfmError::MissingAux { window: idx[0] })?),
        SourceKind::Noise => None,
    };
    let preds = forecast_windows(
        net,
        &windows,
        &cfg.sample_config(),
        cfg.scheduler,
        aux.map(|a| a as &(dyn AuxLookup + Sync)),
        threads,
    )?;
    Ok((idx, preds))
}

pub fn truths(ds: &WindowedDataset, indices: &[usize]) -> Result<Vec<Array2<f64>>> {
    indices.iter().map(|&w| ds.future(w)).collect()
}

/// Scores forecasts for the given windows against the dataset.
pub fn score(
    cfg: &RunConfig,
    ds: &WindowedDataset,
    indices: &[usize],
    preds: &[Array2<f64>],
) -> Result<ForecastReport> {
    ForecastReport::from_predictions(cfg.fingerprint(), cfg.seed, preds, &truths(ds, indices)?)
}

/// Scores of simple references on the same windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub aux_mse: Option<f64>,
    pub aux_mae: Option<f64>,
    pub persistence_mse: f64,
    pub persistence_mae: f64,
}

pub fn baselines(
    ds: &WindowedDataset,
    aux: Option<&AuxPredictions>,
    indices: &[usize],
) -> Result<Baselines> {
    let truth = truths(ds, indices)?;
    let persist = indices
        .iter()
        .map(|&w| Ok(persistence_forecast(&ds.history(w)?, ds.horizon())))
        .collect::<Result<Vec<_>>>()?;
    let (pm, pa) = mse_mae(&persist, &truth)?;
    let (am, aa) = match aux {
        Some(a) => {
            let preds = indices
                .iter()
                .map(|&w| a.aux_for(w))
                .collect::<Result<Vec<_>>>()?;
            let (m, e) = mse_mae(&preds, &truth)?;
            (Some(m), Some(e))
        }
        None => (None, None),
    };
    Ok(Baselines {
        aux_mse: am,
        aux_mae: aa,
        persistence_mse: pm,
        persistence_mae: pa,
    })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub outcome: TrainOutcome,
    pub indices: Vec<usize>,
    pub preds: Vec<Array2<f64>>,
    pub report: ForecastReport,
    pub baselines: Baselines,
}

/// Train, forecast the evaluation split and score, in one call.
pub fn run_experiment(cfg: &RunConfig, threads: Option<usize>) -> Result<Experiment> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let ds = cfg.build_dataset()?;
    let aux = cfg.build_aux(&ds)?;
    let outcome = train_model(cfg, &ds, aux.as_ref())?;
    let (indices, preds) = forecast_split(cfg, &outcome.net, &ds, aux.as_ref(), cfg.eval_split, threads)?;
    let mut report = score(cfg, &ds, &indices, &preds)?;
    if cfg.timing {
        report.wall_ms = Some(started.elapsed().as_millis() as u64);
    }
    let baselines = baselines(&ds, aux.as_ref(), &indices)?;
    Ok(Experiment {
        outcome,
        indices,
        preds,
        report,
        baselines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            synthetic: Some(SynthSpec {
                len: 600,
                channels: 2,
                ..SynthSpec::default()
            }),
            history: 24,
            horizon: 6,
            train: TrainParams {
                hidden: vec![32, 32],
                max_steps: Some(60),
                eval_every: 20,
                ..TrainParams::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn validation_catches_bad_combinations() {
        assert!(RunConfig::default().validate().is_err());
        let both = RunConfig {
            data: Some("x.csv".into()),
            ..small()
        };
        assert!(both.validate().is_err());
        let aux_missing = RunConfig {
            source: SourceKind::Aux,
            ..small()
        };
        assert!(aux_missing.validate().is_err());
        assert!(small().validate().is_ok());
        let bad_poly = RunConfig {
            scheduler: Scheduler::Poly(0),
            ..small()
        };
        let err = bad_poly.validate().unwrap_err().to_string();
        assert!(err.contains("n >= 2"), "{err}");
    }

    #[test]
    fn aux_spec_strings() {
        assert_eq!("builtin-linear".parse::<AuxSpec>().unwrap(), AuxSpec::BuiltinLinear);
        assert_eq!("synthetic-biased".parse::<AuxSpec>().unwrap(), AuxSpec::SyntheticBiased);
        assert_eq!(
            "preds/aux.csv".parse::<AuxSpec>().unwrap(),
            AuxSpec::File("preds/aux.csv".into())
        );
    }

    #[test]
    fn sample_sigma_defaults_to_training_sigma() {
        let cfg = RunConfig {
            source: SourceKind::Aux,
            aux: Some(AuxSpec::SyntheticBiased),
            sigma: 0.5,
            ..small()
        };
        assert_eq!(cfg.sample_source(), SourceMode::AuxOutput { sigma: 0.5 });
        let cfg = RunConfig {
            sample_sigma: Some(0.1),
            ..cfg
        };
        assert_eq!(cfg.sample_source(), SourceMode::AuxOutput { sigma: 0.1 });
        assert_eq!(cfg.train_source(), SourceMode::AuxOutput { sigma: 0.5 });
    }

    #[test]
    fn experiment_is_reproducible() {
        let cfg = RunConfig {
            source: SourceKind::Aux,
            aux: Some(AuxSpec::BuiltinLinear),
            ..small()
        };
        let a = run_experiment(&cfg, Some(1)).unwrap();
        let b = run_experiment(&cfg, Some(1)).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.indices.len(), a.report.n_windows);
        assert!(a.baselines.aux_mse.is_some());
    }
}
