//! Fully connected flow network `f(x_t, t)` with sinusoidal time features.
//!
//! The input is `[x, embed(t / T)]`; hidden layers use SiLU and the output
//! layer is linear. Gradients are computed by an explicit reverse pass over
//! cached activations, batched with `ndarray` matrix products.

mod adamw;
mod checkpoint;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, MAGIC};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{FodError, Result};
use crate::noise::{keyed_rng, Domain};
use crate::samplers::FlowField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Data dimension `d`.
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 2, hidden: vec![128, 128, 128], embed_dim: 32 }
    }
}

/// One affine layer; `weight` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    /// Weights then bias, each as one contiguous slice.
    pub fn slices(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Parameter-shaped gradient buffers, one [`Layer`] per network layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weight *= factor;
            layer.bias *= factor;
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.slices()).flat_map(|s| s.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.iter_values().all(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    layers: Vec<Layer>,
    embed_dim: usize,
    activation: Activation,
}

/// Activations kept from a batched forward pass for the reverse pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Array2<f64>>,
}

/// Sinusoidal features of `t / T`: `embed_dim / 2` pairs `(sin, cos)` at
/// frequencies `10000^(2i / embed_dim)`.
pub fn time_embedding(t: usize, steps: usize, embed_dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; embed_dim];
    fill_time_embedding(t, steps, &mut out)?;
    Ok(out)
}

fn fill_time_embedding(t: usize, steps: usize, out: &mut [f64]) -> Result<()> {
    let embed_dim = out.len();
    if !embed_dim.is_multiple_of(2) {
        return Err(FodError::InvalidArgument(format!("embed_dim must be even, got {embed_dim}")));
    }
    if steps == 0 || t > steps {
        return Err(FodError::StepOutOfRange { index: t, steps });
    }
    let tau = t as f64 / steps as f64;
    for (i, pair) in out.chunks_exact_mut(2).enumerate() {
        let omega = 10000f64.powf(2.0 * i as f64 / embed_dim as f64);
        let (s, c) = (omega * tau).sin_cos();
        pair[0] = s;
        pair[1] = c;
    }
    Ok(())
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl FlowModel {
    /// Hidden layers uniform in `±1/sqrt(fan_in)` with zero bias; the output
    /// layer starts at zero so the initial flow prediction is zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = keyed_rng(seed, Domain::Init, 0, 0);
        let hidden_count = model.layers.len() - 1;
        for layer in model.layers.iter_mut().take(hidden_count) {
            let bound = 1.0 / (layer.inputs() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            layer.weight.mapv_inplace(|_| dist.sample(&mut rng));
        }
        Ok(model)
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(FodError::InvalidArgument("model dim must be at least 1".into()));
        }
        if !cfg.embed_dim.is_multiple_of(2) {
            return Err(FodError::InvalidArgument(format!("embed_dim must be even, got {}", cfg.embed_dim)));
        }
        if cfg.hidden.contains(&0) {
            return Err(FodError::InvalidArgument("hidden widths must be positive".into()));
        }
        let mut dims = vec![cfg.dim + cfg.embed_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.dim);
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { layers, embed_dim: cfg.embed_dim, activation: Activation::Silu })
    }

    /// Assembles a model from explicit layers, checking that they chain and
    /// that the first layer sees `d + embed_dim` inputs for output dim `d`.
    pub fn from_layers(layers: Vec<Layer>, embed_dim: usize) -> Result<Self> {
        let first = layers.first().ok_or_else(|| FodError::InvalidArgument("model needs a layer".into()))?;
        let dim = layers.last().map(Layer::outputs).unwrap_or(0);
        if !embed_dim.is_multiple_of(2) || first.inputs() != dim + embed_dim || dim == 0 {
            return Err(FodError::InvalidArgument(format!(
                "layer shapes do not match dim {dim} with embed_dim {embed_dim}"
            )));
        }
        for w in layers.windows(2) {
            check_len(w[0].outputs(), w[1].inputs())?;
        }
        for layer in &layers {
            check_len(layer.outputs(), layer.bias.len())?;
        }
        Ok(Self { layers, embed_dim, activation: Activation::Silu })
    }

    pub fn dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// `[d + embed_dim, hidden..., d]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs()];
        dims.extend(self.layers.iter().map(Layer::outputs));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { layers: self.layers.iter().map(Layer::zeros_like).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.slices())
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Stacks `[x_i, embed(t_i)]` rows.
    pub fn build_input(&self, xs: ArrayView2<f64>, ts: &[usize], steps: usize) -> Result<Array2<f64>> {
        check_len(self.dim(), xs.ncols())?;
        check_len(xs.nrows(), ts.len())?;
        let d = self.dim();
        let mut input = Array2::zeros((xs.nrows(), d + self.embed_dim));
        for ((mut row, x), &t) in input.rows_mut().into_iter().zip(xs.rows()).zip(ts) {
            let row = row.as_slice_mut().expect("standard layout");
            for (dst, src) in row[..d].iter_mut().zip(x.iter()) {
                *dst = *src;
            }
            fill_time_embedding(t, steps, &mut row[d..])?;
        }
        Ok(input)
    }

    /// Batched forward pass over prepared input rows.
    pub fn forward_batch(&self, input: Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        check_len(self.layers[0].inputs(), input.ncols())?;
        if !self.is_finite() {
            return Err(FodError::NonFinite("model parameters"));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(h);
            if l == last {
                h = z;
            } else {
                h = z.mapv(|v| v * sigmoid(v));
                pre.push(z);
            }
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Reverse pass: gradients of `sum(grad_out * output)` with respect to all
    /// parameters. Inputs are treated as leaves.
    pub fn backward_batch(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<Gradients> {
        let batch = cache.inputs[0].nrows();
        check_len(batch, grad_out.nrows())?;
        check_len(self.dim(), grad_out.ncols())?;
        let mut grads = self.zero_grads();
        let mut delta = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let g = &mut grads.layers[l];
            g.weight = delta.t().dot(&cache.inputs[l]);
            g.bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weight);
                ndarray::Zip::from(&mut back).and(&cache.pre[l - 1]).for_each(|b, &z| {
                    let s = sigmoid(z);
                    *b *= s * (1.0 + z * (1.0 - s));
                });
                delta = back;
            }
        }
        Ok(grads)
    }

    /// `f(x, t)` for a single state.
    pub fn forward(&self, x: &[f64], t: usize, steps: usize) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let input = self.build_input(xs, &[t], steps)?;
        let (out, _) = self.forward_batch(input)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Parameter gradients of `grad_out · f(x, t)`.
    pub fn backward(&self, x: &[f64], t: usize, steps: usize, grad_out: &[f64]) -> Result<Gradients> {
        check_len(self.dim(), grad_out.len())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let input = self.build_input(xs, &[t], steps)?;
        let (_, cache) = self.forward_batch(input)?;
        let g = ArrayView2::from_shape((1, grad_out.len()), grad_out).expect("row view");
        self.backward_batch(&cache, g)
    }
}

impl FlowField for FlowModel {
    fn dim(&self) -> usize {
        FlowModel::dim(self)
    }

    fn flow(&self, x: &[f64], t: usize, steps: usize) -> Result<Vec<f64>> {
        self.forward(x, t, steps)
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(FodError::DimensionMismatch { expected, got });
    }
    Ok(())
}
