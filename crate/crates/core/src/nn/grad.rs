use crate::error::{Error, Result};
use crate::nn::{Activation, ForwardTrace, Network};
use crate::tensor::{gemm, Op, Tensor};

/// Where the upstream gradient enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientEntry {
    /// Gradient w.r.t. the logits; flows through every layer.
    Logits,
    /// Gradient w.r.t. the feature-extractor output; the head receives
    /// zero gradient.
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Parameter gradients for every layer plus, when requested, the gradient
/// w.r.t. the input batch (same shape as the batch).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    layers: Vec<LayerGradient>,
    input: Option<Tensor>,
}

impl GradientBundle {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weights: Tensor::zeros(vec![l.in_dim(), l.out_dim()]),
                    bias: Tensor::zeros(vec![l.out_dim()]),
                })
                .collect(),
            input: None,
        }
    }

    pub fn layers(&self) -> &[LayerGradient] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerGradient] {
        &mut self.layers
    }

    pub fn input_gradient(&self) -> Option<&Tensor> {
        self.input.as_ref()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.data().iter().chain(g.bias.data()).all(|&v| v == 0.0))
            && self
                .input
                .as_ref()
                .is_none_or(|t| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.weights.scale_in_place(s);
            g.bias.scale_in_place(s);
        }
        if let Some(t) = &mut self.input {
            t.scale_in_place(s);
        }
    }

    /// Accumulates another bundle computed for the same network. Input
    /// gradients are summed only when both sides carry one; otherwise the
    /// result carries none.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("bundles cover different layer counts".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.check_same_shape(&b.weights, "weight gradient")?;
            a.bias.check_same_shape(&b.bias, "bias gradient")?;
            a.weights.axpy(1.0, &b.weights);
            a.bias.axpy(1.0, &b.bias);
        }
        self.input = match (self.input.take(), &other.input) {
            (Some(mut a), Some(b)) if a.shape() == b.shape() => {
                a.axpy(1.0, b);
                Some(a)
            }
            _ => None,
        };
        Ok(())
    }

    pub(crate) fn check_matches(&self, net: &Network) -> Result<()> {
        let ok = self.layers.len() == net.layers().len()
            && self.layers.iter().zip(net.layers()).all(|(g, l)| {
                g.weights.shape() == [l.in_dim(), l.out_dim()] && g.bias.shape() == [l.out_dim()]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("gradient bundle does not match network".into()))
        }
    }
}

/// Full reverse pass: parameter and input gradients.
pub fn backward(
    net: &Network,
    trace: &ForwardTrace,
    upstream: &Tensor,
    entry: GradientEntry,
) -> Result<GradientBundle> {
    let (layers, input) = backprop(net, trace, upstream, entry, true, true)?;
    Ok(GradientBundle { layers, input })
}

/// Parameter gradients only; skips the input-layer transpose product.
pub fn param_gradients(
    net: &Network,
    trace: &ForwardTrace,
    upstream: &Tensor,
    entry: GradientEntry,
) -> Result<GradientBundle> {
    let (layers, _) = backprop(net, trace, upstream, entry, true, false)?;
    Ok(GradientBundle { layers, input: None })
}

/// Gradient w.r.t. the input batch only, as used by the attacks.
pub fn input_gradient(
    net: &Network,
    trace: &ForwardTrace,
    upstream: &Tensor,
    entry: GradientEntry,
) -> Result<Tensor> {
    let (_, input) = backprop(net, trace, upstream, entry, false, true)?;
    Ok(input.expect("input gradient requested"))
}

fn validate(net: &Network, trace: &ForwardTrace, upstream: &Tensor, entry: GradientEntry) -> Result<()> {
    let layers = net.layers();
    if trace.layer_count() != layers.len() {
        return Err(Error::Trace(format!(
            "trace has {} layers, network has {}",
            trace.layer_count(),
            layers.len()
        )));
    }
    let rows = trace.batch_size();
    let input_len: usize = trace.input_shape().iter().skip(1).product();
    if input_len != net.input_dim() {
        return Err(Error::Trace(format!(
            "trace input width {input_len} != network input {}",
            net.input_dim()
        )));
    }
    for (k, l) in layers.iter().enumerate() {
        if trace.pre_activation(k).shape() != [rows, l.out_dim()] {
            return Err(Error::Trace(format!(
                "layer {k} activation shape {:?} does not match {}x{}",
                trace.pre_activation(k).shape(),
                rows,
                l.out_dim()
            )));
        }
    }
    let width = match entry {
        GradientEntry::Logits => net.num_classes(),
        GradientEntry::Embedding => net.feature_dim(),
    };
    if upstream.shape() != [rows, width] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?}, expected [{rows}, {width}]",
            upstream.shape()
        )));
    }
    Ok(())
}

fn backprop(
    net: &Network,
    trace: &ForwardTrace,
    upstream: &Tensor,
    entry: GradientEntry,
    want_params: bool,
    want_input: bool,
) -> Result<(Vec<LayerGradient>, Option<Tensor>)> {
    validate(net, trace, upstream, entry)?;
    let layers = net.layers();
    let rows = trace.batch_size();
    let top = match entry {
        GradientEntry::Logits => layers.len(),
        GradientEntry::Embedding => layers.len() - 1,
    };

    let mut grads = if want_params {
        GradientBundle::zeros_like(net).layers
    } else {
        Vec::new()
    };

    let mut delta = upstream.data().to_vec();
    for k in (0..top).rev() {
        let layer = &layers[k];
        let (fan_in, fan_out) = (layer.in_dim(), layer.out_dim());
        if layer.activation() == Activation::Relu {
            for (d, &z) in delta.iter_mut().zip(trace.pre_activation(k).data()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        if want_params {
            let g = &mut grads[k];
            gemm(
                fan_in,
                rows,
                fan_out,
                trace.layer_input(k),
                Op::T,
                &delta,
                Op::N,
                g.weights.data_mut(),
            );
            let bias = g.bias.data_mut();
            for row in delta.chunks_exact(fan_out) {
                for (b, d) in bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
        }
        if k > 0 || want_input {
            let mut next = vec![0.0; rows * fan_in];
            gemm(rows, fan_out, fan_in, &delta, Op::N, layer.weights(), Op::T, &mut next);
            delta = next;
        }
    }

    let input = if want_input {
        Some(Tensor::new(trace.input_shape().to_vec(), delta)?)
    } else {
        None
    };
    Ok((grads, input))
}
