//! Feedforward dense classifier with hand-written reverse mode.
//!
//! A [`Network`] is an ordered list of dense layers `y = act(x W + b)` with
//! `W` stored row-major as `in_dim x out_dim`. All layers but the last form
//! the feature extractor; the last layer (identity activation) is the
//! decision head producing logits. A one-layer network has an identity
//! feature extractor, so its embedding is the flattened input.

mod grad;
mod loss;

pub use grad::{backward, input_gradient, param_gradients, GradientBundle, GradientEntry, LayerGradient};
pub use loss::{mse_feature_loss, softmax_cross_entropy};

use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::tensor::{gemm, Op, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `in_dim x out_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArchitecture("layer extents must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::InvalidArchitecture(format!(
                "layer {in_dim}x{out_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Pre-activation `x W + b` for a `rows x in_dim` input.
    fn affine(&self, rows: usize, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.out_dim];
        gemm(
            rows,
            self.in_dim,
            self.out_dim,
            input,
            Op::N,
            &self.weights,
            Op::N,
            &mut out,
        );
        for row in out.chunks_exact_mut(self.out_dim) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }

    fn activate(&self, pre: &[f64]) -> Vec<f64> {
        match self.activation {
            Activation::Identity => pre.to_vec(),
            Activation::Relu => pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input_shape: Vec<usize>,
    input: Vec<f64>,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn layer_count(&self) -> usize {
        self.pre.len()
    }

    pub fn batch_size(&self) -> usize {
        self.input_shape[0]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn pre_activation(&self, layer: usize) -> &Tensor {
        &self.pre[layer]
    }

    pub fn post_activation(&self, layer: usize) -> &Tensor {
        &self.post[layer]
    }

    /// Output of the feature extractor for this batch.
    pub fn embedding(&self) -> Tensor {
        let n = self.post.len();
        if n >= 2 {
            self.post[n - 2].clone()
        } else {
            let b = self.batch_size();
            Tensor::new(vec![b, self.input.len() / b.max(1)], self.input.clone())
                .expect("trace input is consistent")
        }
    }

    pub(crate) fn layer_input(&self, layer: usize) -> &[f64] {
        if layer == 0 {
            &self.input
        } else {
            self.post[layer - 1].data()
        }
    }
}

impl Network {
    /// Glorot-uniform weights from a counter-based stream keyed by `seed`,
    /// zero biases, ReLU hidden layers and an identity head.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least 2 layer extents, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArchitecture("layer extents must be positive".into()));
        }
        let root = RngStream::new(seed).for_purpose(Purpose::Init);
        let n_layers = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = root.derive(k as u64);
                let weights = (0..fan_in * fan_out)
                    .map(|_| (2.0 * rng.next_f64() - 1.0) * limit)
                    .collect();
                let activation = if k + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::new(fan_in, fan_out, weights, vec![0.0; fan_out], activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidArchitecture("network has no layers".into()));
        };
        if last.activation != Activation::Identity {
            return Err(Error::InvalidArchitecture(
                "last layer must have identity activation".into(),
            ));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Width of the feature extractor output.
    pub fn feature_dim(&self) -> usize {
        let n = self.layers.len();
        if n >= 2 {
            self.layers[n - 2].out_dim
        } else {
            self.input_dim()
        }
    }

    /// Layer extents, e.g. `[784, 256, 128, 10]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_architecture(&self, other: &Network) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.activation == b.activation
            })
    }

    /// Bitwise parameter equality (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Network) -> bool {
        self.same_architecture(other)
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.bias.iter().zip(&b.bias).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Largest absolute parameter difference; infinite when the
    /// architectures differ.
    pub fn max_param_diff(&self, other: &Network) -> f64 {
        if !self.same_architecture(other) {
            return f64::INFINITY;
        }
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.weights.iter().zip(&b.weights).chain(a.bias.iter().zip(&b.bias)))
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    /// Hash of architecture and parameter bits, for logs and quick equality
    /// checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in &self.layers {
            (l.in_dim, l.out_dim, l.activation).hash(&mut h);
            for v in l.weights.iter().chain(&l.bias) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn flatten_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "batch must have a leading batch axis, got shape {:?}",
                batch.shape()
            )));
        }
        if batch.row_len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs per sample, batch has {}",
                self.input_dim(),
                batch.row_len()
            )));
        }
        Ok(batch.rows())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let rows = self.flatten_batch(batch)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 { batch.data() } else { post[k - 1].data() };
            let z = layer.affine(rows, input);
            let a = layer.activate(&z);
            pre.push(Tensor::new(vec![rows, layer.out_dim], z)?);
            post.push(Tensor::new(vec![rows, layer.out_dim], a)?);
        }
        let logits = post.last().expect("at least one layer").clone();
        let trace = ForwardTrace {
            input_shape: batch.shape().to_vec(),
            input: batch.data().to_vec(),
            pre,
            post,
        };
        Ok((logits, trace))
    }

    /// Logits only, without keeping a trace.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let rows = self.flatten_batch(batch)?;
        let mut x = batch.data().to_vec();
        for layer in &self.layers {
            x = layer.activate(&layer.affine(rows, &x));
        }
        Tensor::new(vec![rows, self.num_classes()], x)
    }

    /// Feature-extractor output `f_e(batch)`, shape `B x feature_dim`.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let rows = self.flatten_batch(batch)?;
        let mut x = batch.data().to_vec();
        for layer in &self.layers[..self.layers.len() - 1] {
            x = layer.activate(&layer.affine(rows, &x));
        }
        Tensor::new(vec![rows, self.feature_dim()], x)
    }

    /// One plain SGD step `theta - lr * g`, consuming the old parameters.
    /// `lr = 0` is a no-op; negative or non-finite rates are rejected.
    pub fn sgd_step(mut self, grads: &GradientBundle, lr: f64) -> Result<Network> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::config("lr", format!("learning rate must be >= 0, got {lr}")));
        }
        grads.check_matches(&self)?;
        for (layer, g) in self.layers.iter_mut().zip(grads.layers()) {
            for (w, d) in layer.weights.iter_mut().zip(g.weights.data()) {
                *w -= lr * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(g.bias.data()) {
                *b -= lr * d;
            }
        }
        Ok(self)
    }
}

pub fn init_network(layer_dims: &[usize], seed: u64) -> Result<Network> {
    Network::init(layer_dims, seed)
}
