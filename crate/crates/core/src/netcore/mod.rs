//! History-conditioned target network.
//!
//! A fully connected SiLU network over
//! `[flatten(x_t), flatten(h), t, sin(2 pi k t), cos(2 pi k t) for k = 1..K]`
//! with a linear output of size `C * Fh`. Gradients are computed by an
//! explicit reverse pass over cached activations.

mod adam;
mod io;

pub use adam::{AdamConfig, AdamState};
pub use io::{load_params, save_params, PARAMS_MAGIC, PARAMS_VERSION};

use std::f64::consts::TAU;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CgfmError, Result};
use crate::rng::Rng;

pub const DEFAULT_WIDTH: usize = 256;
pub const DEFAULT_TIME_EMBED_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub channels: usize,
    pub history: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub time_embed_k: usize,
}

impl NetConfig {
    /// Two hidden layers of `DEFAULT_WIDTH` and `DEFAULT_TIME_EMBED_K` frequencies.
    pub fn new(channels: usize, history: usize, horizon: usize) -> Self {
        Self {
            channels,
            history,
            horizon,
            hidden: vec![DEFAULT_WIDTH; 2],
            time_embed_k: DEFAULT_TIME_EMBED_K,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_time_embed_k(mut self, k: usize) -> Self {
        self.time_embed_k = k;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.channels * self.horizon
    }

    pub fn history_dim(&self) -> usize {
        self.channels * self.history
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.time_embed_k + 1
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.history_dim() + self.embed_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.state_dim()
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim());
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim());
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.horizon == 0 || self.history == 0 {
            return Err(CgfmError::Config(
                "network channels, history and horizon must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(CgfmError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[t, sin(2 pi k t), cos(2 pi k t) for k = 1..K]`, sin/cos interleaved by k.
pub fn time_embed(t: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * k + 1);
    out.push(t);
    for i in 1..=k {
        let (s, c) = (TAU * i as f64 * t).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Parameter gradients, laid out exactly like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &VelocityNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter().copied());
        out.extend(l.bias.iter().copied());
    }
    out
}

/// Activations kept from a forward pass for the reverse pass.
pub struct ForwardCache {
    /// Input to each layer (`layers.len()` entries).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    layers: Vec<Layer>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl VelocityNet {
    /// Weights `~ U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases zero.
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .widths()
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self { config, layers })
    }

    pub(crate) fn from_parts(config: NetConfig, layers: Vec<Layer>) -> Self {
        Self { config, layers }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(CgfmError::Dimension {
                expected: self.num_params(),
                found: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    /// Name of the parameter tensor at a layer, as used in error reports.
    pub fn param_name(layer: usize, bias: bool) -> String {
        format!("layer{layer}.{}", if bias { "bias" } else { "weight" })
    }

    fn check_sample(&self, xt: &ArrayView2<f64>, h: &ArrayView2<f64>) -> Result<()> {
        let c = &self.config;
        if xt.dim() != (c.channels, c.horizon) {
            return Err(CgfmError::Shape {
                context: "network state input",
                expected: vec![c.channels, c.horizon],
                found: xt.shape().to_vec(),
            });
        }
        if h.dim() != (c.channels, c.history) {
            return Err(CgfmError::Shape {
                context: "network history input",
                expected: vec![c.channels, c.history],
                found: h.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Writes one input row `[flatten(xt), flatten(h), embed(t)]` into `row`.
    pub fn write_input_row(
        &self,
        row: &mut [f64],
        t: f64,
        xt: ArrayView2<f64>,
        h: ArrayView2<f64>,
    ) -> Result<()> {
        self.check_sample(&xt, &h)?;
        let sd = self.config.state_dim();
        let hd = self.config.history_dim();
        for (dst, src) in row[..sd].iter_mut().zip(xt.iter()) {
            *dst = *src;
        }
        for (dst, src) in row[sd..sd + hd].iter_mut().zip(h.iter()) {
            *dst = *src;
        }
        let emb = &mut row[sd + hd..];
        emb[0] = t;
        for i in 1..=self.config.time_embed_k {
            let (s, c) = (TAU * i as f64 * t).sin_cos();
            emb[2 * i - 1] = s;
            emb[2 * i] = c;
        }
        Ok(())
    }

    /// Batch input matrix with one row per `(t, x_t, h)` triple.
    pub fn assemble_inputs<'a, I>(&self, items: I) -> Result<Array2<f64>>
    where
        I: ExactSizeIterator<Item = (f64, ArrayView2<'a, f64>, ArrayView2<'a, f64>)>,
    {
        let mut input = Array2::zeros((items.len(), self.config.input_dim()));
        for (mut row, (t, xt, h)) in input.outer_iter_mut().zip(items) {
            self.write_input_row(row.as_slice_mut().unwrap(), t, xt, h)?;
        }
        Ok(input)
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.config.input_dim() {
            return Err(CgfmError::Shape {
                context: "network input",
                expected: vec![input.nrows(), self.config.input_dim()],
                found: input.shape().to_vec(),
            });
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(CgfmError::Input("non-finite network input".into()));
        }
        Ok(())
    }

    /// Batched forward pass without caching; rows of the result are
    /// flattened `C x Fh` outputs.
    pub fn predict_batch(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut a = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight);
            z += &l.bias;
            if i < last {
                z.mapv_inplace(silu);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weight);
            z += &l.bias;
            inputs.push(a);
            if i < last {
                a = z.mapv(silu);
                pre.push(z);
            } else {
                a = z;
            }
        }
        Ok((a, ForwardCache { inputs, pre }))
    }

    /// Gradients of `sum(output * upstream)` with respect to every parameter.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Gradients {
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let weight = cache.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weight.t());
                back.zip_mut_with(&cache.pre[i - 1], |d, &z| *d *= silu_grad(z));
                delta = back;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// `u_theta(x_t | h)` for one sample, shaped `C x Fh`.
    pub fn forward(&self, t: f64, xt: &Array2<f64>, h: &Array2<f64>) -> Result<Array2<f64>> {
        let input = self.assemble_inputs(std::iter::once((t, xt.view(), h.view())))?;
        let out = self.predict_batch(&input)?;
        Ok(self.unflatten(out.row(0).to_vec()))
    }

    /// Gradients of `<forward(t, xt, h), upstream>`.
    pub fn backward(
        &self,
        t: f64,
        xt: &Array2<f64>,
        h: &Array2<f64>,
        upstream: &Array2<f64>,
    ) -> Result<Gradients> {
        let c = &self.config;
        if upstream.dim() != (c.channels, c.horizon) {
            return Err(CgfmError::Shape {
                context: "upstream gradient",
                expected: vec![c.channels, c.horizon],
                found: upstream.shape().to_vec(),
            });
        }
        let input = self.assemble_inputs(std::iter::once((t, xt.view(), h.view())))?;
        let (_, cache) = self.forward_batch(&input)?;
        let up = upstream
            .to_owned()
            .into_shape_with_order((1, c.state_dim()))
            .expect("contiguous");
        Ok(self.backward_batch(&cache, &up))
    }

    pub(crate) fn unflatten(&self, flat: Vec<f64>) -> Array2<f64> {
        Array2::from_shape_vec((self.config.channels, self.config.horizon), flat)
            .expect("output width is C * Fh")
    }
}
