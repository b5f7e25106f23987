//! Minibatch training of the velocity network on the conditional loss.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataio::{Split, WindowedDataset};
use crate::error::{CgfmError, Result};
use crate::netcore::{
    time_embed, AdamConfig, AdamState, Gradients, NetConfig, VelocityNet, DEFAULT_TIME_EMBED_K,
    DEFAULT_WIDTH,
};
use crate::pathkit::{draw_source, AuxLookup, PredictionTarget, SourceMode};
use crate::rng::{stream, stream_rng, Rng};
use crate::scheduler::Scheduler;

pub const VALIDATION_T_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheduler: Scheduler,
    pub target: PredictionTarget,
    pub source: SourceMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    /// Validation windows are thinned evenly to at most this many.
    pub val_max_windows: usize,
    pub hidden: Vec<usize>,
    pub time_embed_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheduler: Scheduler::Poly(3),
            target: PredictionTarget::X1Pred,
            source: SourceMode::Noise,
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            max_steps: None,
            patience: 10,
            eval_every: 200,
            val_max_windows: 256,
            hidden: vec![DEFAULT_WIDTH; 2],
            time_embed_k: DEFAULT_TIME_EMBED_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        self.source.validate()?;
        if self.epochs == 0 {
            return Err(CgfmError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CgfmError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CgfmError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(CgfmError::Config("eval_every must be >= 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(CgfmError::Config("max_steps must be >= 1".into()));
        }
        if self.val_max_windows == 0 {
            return Err(CgfmError::Config("val_max_windows must be >= 1".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, channels: usize, history: usize, horizon: usize) -> NetConfig {
        NetConfig::new(channels, history, horizon)
            .with_hidden(self.hidden.clone())
            .with_time_embed_k(self.time_embed_k)
    }
}

/// One conditioning window: its dataset index (for auxiliary lookup), the
/// history and the true future.
#[derive(Debug, Clone)]
pub struct Example {
    pub window: usize,
    pub h: Array2<f64>,
    pub x1: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub channels: usize,
    pub history: usize,
    pub horizon: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// `max` indices spread evenly over `0..n`, or all of them if `n <= max`.
pub fn even_subsample(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|k| k * n / max).collect()
}

impl TrainingSet {
    pub fn from_dataset(ds: &WindowedDataset, val_max_windows: usize) -> Result<Self> {
        let take = |idx: &[usize]| -> Result<Vec<Example>> {
            idx.iter()
                .map(|&w| {
                    Ok(Example {
                        window: w,
                        h: ds.history(w)?,
                        x1: ds.future(w)?,
                    })
                })
                .collect()
        };
        let train_idx = ds.indices(Split::Train);
        let val_all = ds.indices(Split::Val);
        let val_idx: Vec<usize> = even_subsample(val_all.len(), val_max_windows)
            .into_iter()
            .map(|k| val_all[k])
            .collect();
        Ok(Self {
            channels: ds.channels(),
            history: ds.history_len(),
            horizon: ds.horizon(),
            train: take(&train_idx)?,
            val: take(&val_idx)?,
        })
    }
}

/// A minibatch of path points with their regression targets.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Network input rows.
    pub input: Array2<f64>,
    /// Flattened regression targets, one row per sample.
    pub target: Array2<f64>,
    pub times: Vec<f64>,
}

/// Builds network inputs and targets for `(example, x0, t)` triples.
pub fn build_batch(
    net: &VelocityNet,
    scheduler: Scheduler,
    target: PredictionTarget,
    items: &[(&Example, Array2<f64>, f64)],
) -> Result<Batch> {
    let cfg = net.config();
    let (sd, hd) = (cfg.state_dim(), cfg.history_dim());
    let mut input = Array2::zeros((items.len(), cfg.input_dim()));
    let mut tgt = Array2::zeros((items.len(), sd));
    for (r, (ex, x0, t)) in items.iter().enumerate() {
        if x0.dim() != ex.x1.dim() {
            return Err(CgfmError::Shape {
                context: "training source draw",
                expected: ex.x1.shape().to_vec(),
                found: x0.shape().to_vec(),
            });
        }
        let v = scheduler.eval(*t)?;
        let mut row = input.row_mut(r);
        let row = row.as_slice_mut().expect("row-major");
        let mut g = tgt.row_mut(r);
        for (k, (&a, &b)) in x0.iter().zip(ex.x1.iter()).enumerate() {
            row[k] = if *t == 1.0 { b } else { v.alpha * b + v.beta * a };
            g[k] = match target {
                PredictionTarget::Ut => v.d_alpha * b + v.d_beta * a,
                PredictionTarget::X0Pred => a,
                PredictionTarget::X1Pred => b,
            };
        }
        if ex.h.len() != hd {
            return Err(CgfmError::Shape {
                context: "training history",
                expected: vec![cfg.channels, cfg.history],
                found: ex.h.shape().to_vec(),
            });
        }
        for (dst, &src) in row[sd..sd + hd].iter_mut().zip(ex.h.iter()) {
            *dst = src;
        }
        for (dst, e) in row[sd + hd..].iter_mut().zip(time_embed(*t, cfg.time_embed_k)) {
            *dst = e;
        }
    }
    Ok(Batch {
        input,
        target: tgt,
        times: items.iter().map(|i| i.2).collect(),
    })
}

/// Mean over the batch of the entrywise mean squared error, and its exact
/// gradient.
pub fn cgm_loss(net: &VelocityNet, batch: &Batch) -> Result<(f64, Gradients)> {
    let (out, cache) = net.forward_batch(&batch.input)?;
    let n = out.len() as f64;
    let resid = &out - &batch.target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let upstream = resid * (2.0 / n);
    Ok((loss, net.backward_batch(&cache, &upstream)))
}

/// Loss only, evaluated in chunks.
pub fn batch_loss(net: &VelocityNet, batch: &Batch) -> Result<f64> {
    const CHUNK: usize = 512;
    let rows = batch.input.nrows();
    let mut total = 0.0;
    let mut start = 0;
    while start < rows {
        let end = (start + CHUNK).min(rows);
        let out = net.predict_batch(&batch.input.slice(ndarray::s![start..end, ..]).to_owned())?;
        let tgt = batch.target.slice(ndarray::s![start..end, ..]);
        total += (&out - &tgt).iter().map(|r| r * r).sum::<f64>();
        start = end;
    }
    Ok(total / batch.target.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub net: VelocityNet,
    pub log: Vec<LogRow>,
    pub best_val: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
    /// Counts of sampled `t` over ten equal bins.
    pub t_histogram: [u64; 10],
}

impl TrainOutcome {
    pub fn initial_train_loss(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |r| r.train_loss)
    }

    /// Mean training loss over the last `k` steps.
    pub fn final_train_loss(&self, k: usize) -> f64 {
        let tail = &self.log[self.log.len().saturating_sub(k)..];
        tail.iter().map(|r| r.train_loss).sum::<f64>() / tail.len() as f64
    }
}

/// Fixed validation couplings: one source draw per (window, grid time).
pub fn validation_batch(
    net: &VelocityNet,
    set: &TrainingSet,
    cfg: &TrainConfig,
    aux: Option<&dyn AuxLookup>,
) -> Result<Batch> {
    let mut rng = stream_rng(cfg.seed, stream::VALIDATION);
    let mut items = Vec::with_capacity(set.val.len() * VALIDATION_T_GRID.len());
    for ex in &set.val {
        for &t in &VALIDATION_T_GRID {
            let x0 = draw_source(ex.window, ex.x1.dim(), cfg.source, aux, &mut rng)?;
            items.push((ex, x0, t));
        }
    }
    build_batch(net, cfg.scheduler, cfg.target, &items)
}

pub fn validation_loss(net: &VelocityNet, batch: &Batch) -> Result<f64> {
    batch_loss(net, batch)
}

/// Trains a fresh network. Randomness is split into independent streams for
/// initialization, shuffling and per-step draws, all derived from
/// `cfg.seed`.
pub fn train(
    set: &TrainingSet,
    aux: Option<&dyn AuxLookup>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.train.is_empty() {
        return Err(CgfmError::EmptySplit("train"));
    }
    if set.val.is_empty() {
        return Err(CgfmError::EmptySplit("val"));
    }
    if matches!(cfg.source, SourceMode::AuxOutput { .. }) && aux.is_none() {
        return Err(CgfmError::MissingAux {
            window: set.train[0].window,
        });
    }
    let started = Instant::now();
    let net_cfg = cfg.net_config(set.channels, set.history, set.horizon);
    let mut net = VelocityNet::new(net_cfg, &mut stream_rng(cfg.seed, stream::INIT))?;
    let mut adam = AdamState::new(
        &net,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let val_batch = validation_batch(&net, set, cfg, aux)?;
    let mut shuffle_rng = stream_rng(cfg.seed, stream::SHUFFLE);
    let mut draw_rng = stream_rng(cfg.seed, stream::TRAIN_DRAWS);

    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.clone());
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;
    let mut hist = [0u64; 10];

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            step += 1;
            let items = chunk
                .iter()
                .map(|&i| {
                    let ex = &set.train[i];
                    let x0 = draw_source(ex.window, ex.x1.dim(), cfg.source, aux, &mut draw_rng)?;
                    let t = sample_t(&mut draw_rng);
                    hist[((t * 10.0) as usize).min(9)] += 1;
                    Ok((ex, x0, t))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = build_batch(&net, cfg.scheduler, cfg.target, &items)?;
            let (loss, grads) = cgm_loss(&net, &batch)?;
            if !loss.is_finite() {
                return Err(CgfmError::NonFinite {
                    step,
                    what: "training loss".into(),
                });
            }
            adam.update(&mut net, &grads)?;
            let mut row = LogRow {
                step,
                train_loss: loss,
                val_loss: None,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if step.is_multiple_of(cfg.eval_every) {
                let v = evaluate(&net, &val_batch, step)?;
                row.val_loss = Some(v);
                if v < best.0 {
                    best = (v, step, net.clone());
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            log.push(row);
            if since_best >= cfg.patience {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    if step == 0 {
        return Err(CgfmError::Config("training ran zero steps".into()));
    }
    if log.last().is_some_and(|r| r.val_loss.is_none()) {
        let v = evaluate(&net, &val_batch, step)?;
        log.last_mut().unwrap().val_loss = Some(v);
        if v < best.0 {
            best = (v, step, net.clone());
        }
    }
    log::info!(
        "trained {step} steps, best validation loss {:.6} at step {}",
        best.0,
        best.1
    );
    Ok(TrainOutcome {
        net: best.2,
        log,
        best_val: best.0,
        best_step: best.1,
        steps: step,
        stopped_early,
        t_histogram: hist,
    })
}

fn evaluate(net: &VelocityNet, val: &Batch, step: usize) -> Result<f64> {
    let v = validation_loss(net, val)?;
    if !v.is_finite() {
        return Err(CgfmError::NonFinite {
            step,
            what: "validation loss".into(),
        });
    }
    Ok(v)
}

pub fn sample_t(rng: &mut Rng) -> f64 {
    rng.random_range(0.0..1.0)
}

pub fn write_log_csv(log: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,train_loss,val_loss,wall_ms")?;
    for r in log {
        let val = r.val_loss.map(|v| format!("{v:.10e}")).unwrap_or_default();
        writeln!(f, "{},{:.10e},{},{}", r.step, r.train_loss, val, r.wall_ms)?;
    }
    f.flush()?;
    Ok(())
}
