use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::rng;

/// Which family a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Stack of dense layers with ReLU between them and a linear output layer.
    GeneralMlp,
    /// One hidden ReLU layer without bias whose activations are averaged into
    /// a scalar: `f(x) = (1/N) sum_j relu(W_j . x)`. Only `W` is trainable.
    FixedHead,
}

/// Layer sizes plus kind. For [`ModelKind::FixedHead`] the sizes are `[D, N]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub sizes: Vec<usize>,
}

impl Architecture {
    pub fn mlp(sizes: &[usize]) -> Self {
        Self { kind: ModelKind::GeneralMlp, sizes: sizes.to_vec() }
    }

    pub fn fixed_head(input: usize, hidden: usize) -> Self {
        Self { kind: ModelKind::FixedHead, sizes: vec![input, hidden] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return config("an architecture needs at least an input and an output size");
        }
        if let Some(i) = self.sizes.iter().position(|&s| s == 0) {
            return config(format!("layer size {i} is zero"));
        }
        if self.kind == ModelKind::FixedHead && self.sizes.len() != 2 {
            return config("fixed-head models take exactly [input, hidden] sizes");
        }
        Ok(())
    }
}

/// One dense layer, `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

/// Parameters of a dense ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    kind: ModelKind,
    layers: Vec<Dense>,
}

/// Intermediate values of a forward pass needed by backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Array2<f64>>,
    /// Post-ReLU activations of each hidden layer.
    pub post: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardTrace {
    /// Representation fed to the final layer: the last hidden activations,
    /// or `None` for a model without hidden layers.
    pub fn penultimate(&self) -> Option<&Array2<f64>> {
        self.post.last()
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

impl ModelParams {
    pub fn new(kind: ModelKind, layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return config("model has no layers");
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return shape(format!(
                    "layer {l} outputs {} units but layer {} takes {}",
                    pair[0].fan_out(),
                    l + 1,
                    pair[1].fan_in()
                ));
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if let Some(b) = &layer.bias {
                if b.len() != layer.fan_out() {
                    return shape(format!("bias of layer {l} has the wrong length"));
                }
            }
        }
        match kind {
            ModelKind::FixedHead if layers.len() != 1 || layers[0].bias.is_some() => {
                config("fixed-head models have exactly one weight matrix and no bias")
            }
            _ => Ok(Self {
                kind,
                layers: layers
                    .into_iter()
                    .map(|d| Dense {
                        weights: d.weights.as_standard_layout().into_owned(),
                        bias: d.bias,
                    })
                    .collect(),
            }),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// Width of the model output: classes for an MLP, 1 for a fixed head.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::GeneralMlp => self.layers.last().unwrap().fan_out(),
            ModelKind::FixedHead => 1,
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::fan_out));
        sizes
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { kind: self.kind, sizes: self.layer_sizes() }
    }

    /// Number of layers whose units pass through ReLU.
    pub fn num_hidden(&self) -> usize {
        match self.kind {
            ModelKind::GeneralMlp => self.layers.len() - 1,
            ModelKind::FixedHead => 1,
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.num_hidden()].iter().map(Dense::fan_out).collect()
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.kind == other.kind
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.dim() == b.weights.dim() && a.bias.is_some() == b.bias.is_some()
            })
    }

    pub(crate) fn require_same_architecture(&self, other: &ModelParams) -> Result<()> {
        if self.same_architecture(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "architectures differ: {:?} vs {:?}",
                self.layer_sizes(),
                other.layer_sizes()
            )))
        }
    }

    /// All parameters set to zero, same shapes.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            kind: self.kind,
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    weights: Array2::zeros(d.weights.dim()),
                    bias: d.bias.as_ref().map(|b| Array1::zeros(b.len())),
                })
                .collect(),
        }
    }

    /// Parameter tensors as flat slices, weights then bias for each layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for d in &self.layers {
            out.push(d.weights.as_slice().expect("standard layout"));
            if let Some(b) = &d.bias {
                out.push(b.as_slice().expect("contiguous"));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for d in &mut self.layers {
            out.push(d.weights.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut d.bias {
                out.push(b.as_slice_mut().expect("contiguous"));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameters concatenated in [`tensors`](Self::tensors) order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Inverse of [`to_flat`](Self::to_flat) for this architecture.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.num_params() {
            return shape(format!("expected {} values, got {}", self.num_params(), flat.len()));
        }
        let mut out = self.clone();
        let mut at = 0;
        for t in out.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        Ok(out)
    }

    /// Elementwise combination `f(self_i, other_i)`.
    pub fn zip_map(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64) -> Result<ModelParams> {
        self.require_same_architecture(other)?;
        let mut out = self.clone();
        for (o, b) in out.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in o.iter_mut().zip(b) {
                *x = f(*x, y);
            }
        }
        Ok(out)
    }

    /// `(1 - t) self + t other`.
    pub fn lerp(&self, other: &ModelParams, t: f64) -> Result<ModelParams> {
        self.zip_map(other, |a, b| (1.0 - t) * a + t * b)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.require_same_architecture(other)?;
        for (o, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in o.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return shape(format!(
                "batch has {} columns but the model takes {}",
                x.ncols(),
                self.input_dim()
            ));
        }
        Ok(())
    }

    /// Model outputs, one row per sample (a single column for fixed-head models).
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        match self.kind {
            ModelKind::FixedHead => {
                let mut h = x.dot(&self.layers[0].weights);
                relu_inplace(&mut h);
                let n = h.ncols() as f64;
                Ok(h.sum_axis(Axis(1)).mapv(|s| s / n).insert_axis(Axis(1)))
            }
            ModelKind::GeneralMlp => {
                let last = self.layers.len() - 1;
                let mut h = self.affine(0, x);
                for l in 1..=last {
                    relu_inplace(&mut h);
                    h = self.affine(l, h.view());
                }
                Ok(h)
            }
        }
    }

    fn affine(&self, l: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = &self.layers[l];
        let mut y = x.dot(&d.weights);
        if let Some(b) = &d.bias {
            y += b;
        }
        y
    }

    /// Forward pass keeping every hidden pre- and post-activation.
    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(&x)?;
        let hidden = self.num_hidden();
        let mut pre = Vec::with_capacity(hidden);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(hidden);
        for l in 0..hidden {
            let z = match l {
                0 => self.affine(0, x),
                _ => self.affine(l, post[l - 1].view()),
            };
            let mut h = z.clone();
            relu_inplace(&mut h);
            pre.push(z);
            post.push(h);
        }
        let output = match (self.kind, post.last()) {
            (ModelKind::FixedHead, Some(last)) => {
                let n = last.ncols() as f64;
                last.sum_axis(Axis(1)).mapv(|s| s / n).insert_axis(Axis(1))
            }
            (_, Some(last)) => self.affine(hidden, last.view()),
            (_, None) => self.affine(0, x),
        };
        Ok(ForwardTrace { pre, post, output })
    }

    /// Post-activation outputs of every hidden layer.
    pub fn hidden_activations(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward_trace(x)?.post)
    }

    /// Gradients of a scalar objective given its gradient `d_out` with
    /// respect to the model output. `d_pen`, when present, is an additional
    /// gradient with respect to the last hidden activations.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        trace: &ForwardTrace,
        d_out: &Array2<f64>,
        d_pen: Option<&Array2<f64>>,
    ) -> Result<ModelParams> {
        if d_out.dim() != trace.output.dim() {
            return shape("output gradient does not match the output shape");
        }
        let hidden = self.num_hidden();
        let mut grads = self.zeros_like();
        // Gradient with respect to the post-activations of the last hidden layer.
        let mut d_h = match self.kind {
            ModelKind::FixedHead => {
                let n = trace.post[0].ncols();
                let col = d_out.column(0).mapv(|g| g / n as f64);
                let mut d = Array2::zeros((col.len(), n));
                d.axis_iter_mut(Axis(0)).zip(col.iter()).for_each(|(mut row, &g)| row.fill(g));
                d
            }
            ModelKind::GeneralMlp => {
                let input = if hidden == 0 { x } else { trace.post[hidden - 1].view() };
                let out = &mut grads.layers[hidden];
                out.weights = input.t().dot(d_out);
                if let Some(b) = &mut out.bias {
                    *b = d_out.sum_axis(Axis(0));
                }
                if hidden == 0 {
                    if d_pen.is_some() {
                        return shape("a model without hidden layers has no penultimate layer");
                    }
                    out.weights = out.weights.as_standard_layout().into_owned();
                    return Ok(grads);
                }
                d_out.dot(&self.layers[hidden].weights.t())
            }
        };
        if let Some(extra) = d_pen {
            if extra.dim() != d_h.dim() {
                return shape("penultimate gradient does not match the representation shape");
            }
            d_h += extra;
        }
        for l in (0..hidden).rev() {
            Zip::from(&mut d_h).and(&trace.pre[l]).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let input = if l == 0 { x } else { trace.post[l - 1].view() };
            let layer = &mut grads.layers[l];
            layer.weights = input.t().dot(&d_h);
            if let Some(b) = &mut layer.bias {
                *b = d_h.sum_axis(Axis(0));
            }
            if l > 0 {
                d_h = d_h.dot(&self.layers[l].weights.t());
            }
        }
        for layer in &mut grads.layers {
            layer.weights = layer.weights.as_standard_layout().into_owned();
        }
        Ok(grads)
    }
}

/// Fresh parameters: weights uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`,
/// biases zero. Fixed-head models get no bias.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut layers = Vec::with_capacity(arch.sizes.len() - 1);
    for (l, pair) in arch.sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = rng::stream(seed, &[rng::tag::INIT, l as u64]);
        let weights =
            Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        let bias = match arch.kind {
            ModelKind::GeneralMlp => Some(Array1::zeros(fan_out)),
            ModelKind::FixedHead => None,
        };
        layers.push(Dense { weights, bias });
    }
    ModelParams::new(arch.kind, layers)
}
