//! Layers and the [`Block`] trait that module components implement.
//!
//! Blocks own their parameters as shared [`Tensor`] handles, so the
//! optimizer and checkpointing see the same storage the forward pass uses.
//! State is exposed as named arrays for serialization; BatchNorm running
//! statistics ride along with the trainable parameters.

use crate::error::{Error, Result};
use crate::tensor::{ops, Data, Tensor};
use ndarray::Array1;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::collections::HashMap;

/// A parameterized computational block: forward pass plus access to its
/// persistent state.
pub trait Block {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor>;

    /// Trainable parameters with hierarchical names.
    fn parameters(&self) -> Vec<(String, Tensor)>;

    /// Every persistent array (parameters and running statistics), by name.
    fn state(&self) -> Vec<(String, Data)>;

    /// Restores arrays produced by [`Block::state`]. Missing or extra names
    /// and shape mismatches are errors.
    fn load_state(&self, entries: &HashMap<String, Data>) -> Result<()>;

    /// Names of addressable sub-layers, for depth-wise capture.
    fn layer_names(&self) -> Vec<String> {
        Vec::new()
    }

    /// Forward pass that additionally returns the outputs of the named
    /// sub-layers. Blocks without addressable internals reject non-empty
    /// capture lists.
    fn forward_capturing(
        &self,
        x: &Tensor,
        train: bool,
        capture: &[String],
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        if capture.is_empty() {
            return Ok((self.forward(x, train)?, Vec::new()));
        }
        Err(Error::invalid(
            "forward_capturing",
            "block has no addressable sub-layers",
        ))
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Data {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid stddev");
    Data::from_shape_fn(ndarray::IxDyn(shape), |_| dist.sample(rng))
}

/// Fully connected layer, weight shaped `(out, in)`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        Linear {
            weight: Tensor::parameter(he_normal(&[out_dim, in_dim], in_dim, rng)),
            bias: Tensor::parameter(Data::zeros(ndarray::IxDyn(&[out_dim]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::add_bias(&ops::matmul_nt(x, &self.weight)?, &self.bias)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `(out, in)` of the weight matrix.
    pub fn weight_dim(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1])
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        vec![
            ("weight".to_string(), self.weight.clone()),
            ("bias".to_string(), self.bias.clone()),
        ]
    }
}

/// 2-d convolution, weight shaped `(out_channels, in_channels, k, k)`.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Tensor::parameter(he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: Tensor::parameter(Data::zeros(ndarray::IxDyn(&[out_ch]))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Batch normalization over feature columns of `(N, D)` input.
///
/// Training mode normalizes by batch statistics and folds them into running
/// estimates (factor 0.1, unbiased variance); eval mode uses the running
/// estimates.
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: RefCell<Array1<f64>>,
    running_var: RefCell<Array1<f64>>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::parameter(Data::ones(ndarray::IxDyn(&[dim]))),
            beta: Tensor::parameter(Data::zeros(ndarray::IxDyn(&[dim]))),
            running_mean: RefCell::new(Array1::zeros(dim)),
            running_var: RefCell::new(Array1::ones(dim)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            let n = x.shape()[0];
            let (y, mean, var) = ops::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            *rm = &*rm * (1.0 - self.momentum) + &(&mean * self.momentum);
            *rv = &*rv * (1.0 - self.momentum) + &(&var * (self.momentum * unbias));
            Ok(y)
        } else {
            let rm = self.running_mean.borrow();
            let rv = self.running_var.borrow();
            ops::batch_norm_eval(x, &self.gamma, &self.beta, &rm, &rv, self.eps)
        }
    }
}

/// A single addressable step of a [`Sequential`].
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    BatchNorm1d(BatchNorm1d),
    ReLU,
    AvgPool2d(usize),
    GlobalAvgPool,
    Flatten,
}

impl Layer {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(c) => c.forward(x),
            Layer::BatchNorm1d(bn) => bn.forward(x, train),
            Layer::ReLU => Ok(ops::relu(x)),
            Layer::AvgPool2d(k) => ops::avg_pool2d(x, *k),
            Layer::GlobalAvgPool => ops::global_avg_pool(x),
            Layer::Flatten => ops::flatten_rows(x),
        }
    }

    fn parameters(&self) -> Vec<(&'static str, Tensor)> {
        match self {
            Layer::Linear(l) => vec![("weight", l.weight.clone()), ("bias", l.bias.clone())],
            Layer::Conv2d(c) => vec![("weight", c.weight.clone()), ("bias", c.bias.clone())],
            Layer::BatchNorm1d(bn) => {
                vec![("gamma", bn.gamma.clone()), ("beta", bn.beta.clone())]
            }
            _ => Vec::new(),
        }
    }

    fn buffers(&self) -> Vec<(&'static str, Data)> {
        match self {
            Layer::BatchNorm1d(bn) => vec![
                (
                    "running_mean",
                    bn.running_mean.borrow().clone().into_dyn(),
                ),
                ("running_var", bn.running_var.borrow().clone().into_dyn()),
            ],
            _ => Vec::new(),
        }
    }

    fn load_buffer(&self, name: &str, value: &Data) -> Result<()> {
        let Layer::BatchNorm1d(bn) = self else {
            return Err(Error::invalid("load_state", format!("no buffer {name}")));
        };
        let arr = value
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::shape("load_state", format!("buffer {name} must be 1-d")))?;
        match name {
            "running_mean" => *bn.running_mean.borrow_mut() = arr,
            "running_var" => *bn.running_var.borrow_mut() = arr,
            _ => return Err(Error::invalid("load_state", format!("no buffer {name}"))),
        }
        Ok(())
    }
}

/// Named layers applied in order. The names make sub-layer outputs
/// addressable for depth-wise probing and give parameters stable
/// hierarchical names for checkpoints.
pub struct Sequential {
    layers: Vec<(String, Layer)>,
}

impl Sequential {
    pub fn new(layers: Vec<(&str, Layer)>) -> Self {
        Sequential {
            layers: layers
                .into_iter()
                .map(|(n, l)| (n.to_string(), l))
                .collect(),
        }
    }
}

impl Block for Sequential {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut cur = x.clone();
        for (_, layer) in &self.layers {
            cur = layer.forward(&cur, train)?;
        }
        Ok(cur)
    }

    fn forward_capturing(
        &self,
        x: &Tensor,
        train: bool,
        capture: &[String],
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        for want in capture {
            if !self.layers.iter().any(|(n, _)| n == want) {
                return Err(Error::invalid(
                    "forward_capturing",
                    format!(
                        "no layer named {want}; available: {}",
                        self.layer_names().join(", ")
                    ),
                ));
            }
        }
        let mut cur = x.clone();
        let mut captured = Vec::new();
        for (name, layer) in &self.layers {
            cur = layer.forward(&cur, train)?;
            if capture.contains(name) {
                captured.push((name.clone(), cur.clone()));
            }
        }
        Ok((cur, captured))
    }

    fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            for (pname, p) in layer.parameters() {
                out.push((format!("{name}.{pname}"), p));
            }
        }
        out
    }

    fn state(&self) -> Vec<(String, Data)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            for (pname, p) in layer.parameters() {
                out.push((format!("{name}.{pname}"), p.value()));
            }
            for (bname, b) in layer.buffers() {
                out.push((format!("{name}.{bname}"), b));
            }
        }
        out
    }

    fn load_state(&self, entries: &HashMap<String, Data>) -> Result<()> {
        let mut expected: Vec<String> = Vec::new();
        for (name, layer) in &self.layers {
            for (pname, p) in layer.parameters() {
                let full = format!("{name}.{pname}");
                let value = entries
                    .get(&full)
                    .ok_or_else(|| Error::invalid("load_state", format!("missing {full}")))?;
                p.set_value(value.clone())?;
                expected.push(full);
            }
            for (bname, _) in layer.buffers() {
                let full = format!("{name}.{bname}");
                let value = entries
                    .get(&full)
                    .ok_or_else(|| Error::invalid("load_state", format!("missing {full}")))?;
                layer.load_buffer(bname, value)?;
                expected.push(full);
            }
        }
        if entries.len() != expected.len() {
            let extra: Vec<&str> = entries
                .keys()
                .filter(|k| !expected.iter().any(|e| e == *k))
                .map(String::as_str)
                .collect();
            return Err(Error::invalid(
                "load_state",
                format!("unexpected entries: {}", extra.join(", ")),
            ));
        }
        Ok(())
    }

    fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|(n, _)| n.clone()).collect()
    }
}

/// Reduces an intermediate activation to `(N, D)` so a probe can consume it:
/// 4-d maps are globally average-pooled, everything else is flattened.
pub fn reduce_activation(t: &Tensor) -> Result<Tensor> {
    if t.ndim() == 4 {
        ops::global_avg_pool(t)
    } else {
        ops::flatten_rows(t)
    }
}
