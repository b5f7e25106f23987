use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cgfm::dataio::{Split, SplitRatios};
use cgfm::pathkit::PredictionTarget;
use cgfm::pipeline::{AuxSpec, RunConfig, SourceKind, SynthSpec};
use cgfm::scheduler::Scheduler;
use cgfm::{CgfmError, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Parser)]
#[command(name = "cgfm", version, about = "Corrective flow matching for time-series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a velocity network; writes params.bin, train_log.csv,
    /// norm_stats.json, aux.csv and config.resolved to the output directory.
    Train(RunArgs),
    /// Sample forecasts for a split; writes forecast.csv.
    Forecast {
        #[command(flatten)]
        run: RunArgs,
        /// Parameter file [default: <out>/params.bin]
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Score a forecast CSV, or aggregate report.json files of several runs.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Forecast CSV [default: <out>/forecast.csv]
        #[arg(long, conflicts_with = "runs")]
        forecast: Option<PathBuf>,
        /// Directory whose subdirectories each hold a report.json
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Run the numerical self-checks; exits with 3 if any fails.
    Verify(VerifyArgs),
    /// Project forecast rows onto their first two principal components.
    Pca {
        #[arg(long)]
        forecast: PathBuf,
        /// Output CSV [default: pca.csv next to the forecast]
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip checks that would start after this many seconds
    #[arg(long)]
    pub budget_secs: Option<f64>,
    /// Also write the JSON results here
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Deliberately break a component to exercise the checks
    #[arg(long, hide = true, value_parser = ["corrupt-backward"])]
    pub inject_fault: Option<String>,
}

/// Flags shared by the run subcommands. Each one overrides the config file.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// TOML config file, e.g. a previous run's config.resolved
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV with one numeric column per channel
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub datetime_column: Option<String>,
    /// Use the generated sine-mixture series instead of a CSV
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub synth_len: Option<usize>,
    #[arg(long)]
    pub synth_channels: Option<usize>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
    #[arg(long)]
    pub synth_noise: Option<f64>,
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Train, validation and test fractions, e.g. 0.6,0.2,0.2
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
    /// condot, poly:<n>, vp or cosine
    #[arg(long)]
    pub scheduler: Option<Scheduler>,
    /// u, x0 or x1
    #[arg(long)]
    pub target: Option<PredictionTarget>,
    #[arg(long, value_parser = parse_source)]
    pub source: Option<SourceKind>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub sample_sigma: Option<f64>,
    /// builtin-linear, synthetic-biased, or a CSV path
    #[arg(long)]
    pub aux: Option<AuxSpec>,
    #[arg(long)]
    pub ridge_lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub val_max_windows: Option<usize>,
    /// Hidden layer widths, e.g. 256,256
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub time_embed_k: Option<usize>,
    /// Sampler steps N
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub eps_den: Option<f64>,
    #[arg(long)]
    pub eval_split: Option<Split>,
    /// Record wall-clock times (outputs are then not byte-reproducible)
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_source(s: &str) -> std::result::Result<SourceKind, String> {
    match s {
        "noise" => Ok(SourceKind::Noise),
        "aux" => Ok(SourceKind::Aux),
        _ => Err(format!("unknown source {s:?} (expected noise or aux)")),
    }
}

pub fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CgfmError::Config(format!("{}: {e}", path.display())))
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| CgfmError::Config(format!("cannot serialize config: {e}")))
}

impl RunArgs {
    /// The config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => load_config_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            c.data = Some(d.clone());
            c.synthetic = None;
        }
        let synth_flags = self.synth_len.is_some()
            || self.synth_channels.is_some()
            || self.synth_seed.is_some()
            || self.synth_noise.is_some();
        if self.synthetic || synth_flags {
            if self.data.is_some() {
                return Err(CgfmError::Config("--data and --synthetic are exclusive".into()));
            }
            let s = c.synthetic.get_or_insert_with(SynthSpec::default);
            set(&mut s.len, self.synth_len);
            set(&mut s.channels, self.synth_channels);
            set(&mut s.seed, self.synth_seed);
            set(&mut s.noise_std, self.synth_noise);
            c.data = None;
        }
        if let Some(d) = &self.datetime_column {
            c.datetime_column = Some(d.clone());
        }
        set(&mut c.history, self.history);
        set(&mut c.horizon, self.horizon);
        if let Some(r) = &self.split {
            c.split = SplitRatios {
                train: r[0],
                val: r[1],
                test: r[2],
            };
        }
        set(&mut c.scheduler, self.scheduler);
        set(&mut c.target, self.target);
        set(&mut c.source, self.source);
        set(&mut c.sigma, self.sigma);
        if self.sample_sigma.is_some() {
            c.sample_sigma = self.sample_sigma;
        }
        if let Some(a) = &self.aux {
            c.aux = Some(a.clone());
        }
        set(&mut c.ridge_lambda, self.ridge_lambda);
        set(&mut c.seed, self.seed);
        let t = &mut c.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.lr, self.lr);
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
        set(&mut t.patience, self.patience);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.val_max_windows, self.val_max_windows);
        set(&mut t.hidden, self.hidden.clone());
        set(&mut t.time_embed_k, self.time_embed_k);
        set(&mut c.steps, self.steps);
        set(&mut c.num_samples, self.num_samples);
        set(&mut c.eps_den, self.eps_den);
        set(&mut c.eval_split, self.eval_split);
        c.timing |= self.timing;
        set(&mut c.out, self.out.clone());
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}
