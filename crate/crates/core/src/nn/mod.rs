//! A fixed menu of differentiable layers (dense, valid 2-D convolution,
//! ReLU, flatten, max pooling) with explicit forward/backward passes.
//!
//! The last layer's outputs are logits (normally from a dense head); scores
//! are their sigmoids. Backward passes take the gradient with respect to those
//! logits.

pub mod gradcheck;
mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernels::ConvGeom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Relu,
    Flatten,
    MaxPool2d {
        window_h: usize,
        window_w: usize,
    },
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> Self {
        LayerSpec::Dense { input, output }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Dense stack `input → hidden… → n_classes` with ReLU after every hidden layer.
    pub fn mlp(input: usize, hidden: &[usize], n_classes: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(hidden.len() * 2 + 1);
        let mut prev = input;
        for &h in hidden {
            specs.push(LayerSpec::dense(prev, h));
            specs.push(LayerSpec::Relu);
            prev = h;
        }
        specs.push(LayerSpec::dense(prev, n_classes));
        specs
    }

    fn describe(&self) -> String {
        match *self {
            LayerSpec::Dense { input, output } => format!("dense {input}→{output}"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => format!("conv2d {in_channels}→{out_channels} {kernel_h}×{kernel_w}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::MaxPool2d { window_h, window_w } => format!("maxpool {window_h}×{window_w}"),
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let incompatible = |detail: String| Error::IncompatibleDims { index, detail };
        let shape = match *self {
            LayerSpec::Dense { input: n_in, output } => {
                if n_in == 0 || output == 0 {
                    return Err(incompatible(format!("{} has a zero dimension", self.describe())));
                }
                if input != [n_in] {
                    return Err(incompatible(format!(
                        "previous output is {input:?} but {} expects [{n_in}]",
                        self.describe()
                    )));
                }
                vec![output]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                if [in_channels, out_channels, kernel_h, kernel_w].contains(&0) {
                    return Err(incompatible(format!("{} has a zero dimension", self.describe())));
                }
                match *input {
                    [c, h, w] if c == in_channels && h >= kernel_h && w >= kernel_w => {
                        vec![out_channels, h - kernel_h + 1, w - kernel_w + 1]
                    }
                    _ => {
                        return Err(incompatible(format!(
                            "previous output is {input:?}, incompatible with {}",
                            self.describe()
                        )))
                    }
                }
            }
            LayerSpec::Relu => input.to_vec(),
            LayerSpec::Flatten => vec![input.iter().product()],
            LayerSpec::MaxPool2d { window_h, window_w } => match *input {
                [c, h, w] if window_h >= 1 && window_w >= 1 && h >= window_h && w >= window_w => {
                    vec![c, h / window_h, w / window_w]
                }
                _ => {
                    return Err(incompatible(format!(
                        "previous output is {input:?}, incompatible with {}",
                        self.describe()
                    )))
                }
            },
        };
        Ok(shape)
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            _ => 0,
        }
    }

    fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { input, output } => (input * output, output),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => (out_channels * in_channels * kernel_h * kernel_w, out_channels),
            _ => (0, 0),
        }
    }
}

/// Per-feature input standardization, `(x - mean) * scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    const VAR_EPS: f64 = 1e-6;

    /// Mean and inverse standard deviation of every feature over `rows`.
    pub fn fit<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for row in rows {
            if n == 0 {
                mean = vec![0.0; row.len()];
                m2 = vec![0.0; row.len()];
            } else if row.len() != mean.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} features", mean.len()),
                    got: format!("{} features", row.len()),
                });
            }
            n += 1;
            // Welford
            for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
                let d = x - *m;
                *m += d / n as f64;
                *s += d * (x - *m);
            }
        }
        if n == 0 {
            return Err(Error::EmptyDataset("no rows to standardize".into()));
        }
        let scale = m2
            .iter()
            .map(|s| 1.0 / (s / n as f64 + Self::VAR_EPS).sqrt())
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn conv_geom(&self) -> ConvGeom {
        match self.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => ConvGeom {
                in_c: in_channels,
                in_h: self.in_shape[1],
                in_w: self.in_shape[2],
                out_c: out_channels,
                k_h: kernel_h,
                k_w: kernel_w,
            },
            _ => unreachable!("not a conv layer"),
        }
    }

    fn shape3(&self) -> [usize; 3] {
        [self.in_shape[0], self.in_shape[1], self.in_shape[2]]
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let out_len: usize = self.out_shape.iter().product();
        match self.spec {
            LayerSpec::Dense { .. } => {
                let mut out = vec![0.0; out_len];
                kernels::dense_forward(&self.weights, &self.bias, x, &mut out);
                out
            }
            LayerSpec::Conv2d { .. } => {
                let mut out = vec![0.0; out_len];
                kernels::conv_forward(self.conv_geom(), &self.weights, &self.bias, x, &mut out);
                out
            }
            LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::Flatten => x.to_vec(),
            LayerSpec::MaxPool2d { window_h, window_w } => {
                kernels::maxpool_argmax(self.shape3(), (window_h, window_w), x)
                    .into_iter()
                    .map(|i| x[i])
                    .collect()
            }
        }
    }

    fn forward_many(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        match self.spec {
            LayerSpec::Dense { output, .. } => {
                let mut outs = vec![vec![0.0; output]; xs.len()];
                kernels::dense_forward_many(&self.weights, &self.bias, xs, &mut outs);
                outs
            }
            _ => xs.iter().map(|x| self.forward(x)).collect(),
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `want_input` is set.
    fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grads: &mut LayerGrads,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        match self.spec {
            LayerSpec::Dense { .. } => {
                let mut gx = want_input.then(|| vec![0.0; x.len()]);
                kernels::dense_backward(
                    &self.weights,
                    x,
                    grad_out,
                    &mut grads.weights,
                    &mut grads.bias,
                    gx.as_deref_mut(),
                );
                gx
            }
            LayerSpec::Conv2d { .. } => {
                let mut gx = want_input.then(|| vec![0.0; x.len()]);
                kernels::conv_backward(
                    self.conv_geom(),
                    &self.weights,
                    x,
                    grad_out,
                    &mut grads.weights,
                    &mut grads.bias,
                    gx.as_deref_mut(),
                );
                gx
            }
            LayerSpec::Relu => want_input.then(|| {
                x.iter()
                    .zip(grad_out)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect()
            }),
            LayerSpec::Flatten => want_input.then(|| grad_out.to_vec()),
            LayerSpec::MaxPool2d { window_h, window_w } => want_input.then(|| {
                let mut gx = vec![0.0; x.len()];
                let idx = kernels::maxpool_argmax(self.shape3(), (window_h, window_w), x);
                for (i, g) in idx.into_iter().zip(grad_out) {
                    gx[i] += g;
                }
                gx
            }),
        }
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// An ordered layer stack whose final output is the flat logit vector,
/// normally produced by a dense classification head.
///
/// Every change to the parameters gets a new revision stamp; forward caches
/// and bag predictions remember the stamp they were computed under.
#[derive(Debug, Clone)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    standardizer: Option<Standardizer>,
    n_classes: usize,
    seed: u64,
    inference_only: bool,
    stamp: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.n_classes == other.n_classes
            && self.seed == other.seed
            && self.inference_only == other.inference_only
            && self.standardizer == other.standardizer
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.spec == b.spec && a.weights == b.weights && a.bias == b.bias
            })
    }
}

/// Parameter gradients for one layer; empty for non-parametric layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients mirroring [`Model::params`] plus the gradient with respect to
/// the raw (unstandardized) input. `input` is empty when it was not requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: Vec::new(),
        }
    }

    /// Parameter gradient tensors in the same order as [`Model::params`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|g| *g *= factor);
        }
        self.input.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        if self.input.is_empty() {
            self.input = other.input.clone();
        } else {
            self.input.iter_mut().zip(&other.input).for_each(|(x, y)| *x += y);
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        self.input.clear();
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0))
    }
}

/// Inputs to every layer, captured by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    raw_input_len: usize,
    layer_inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Input of layer `index` (after standardization for index 0).
    pub fn layer_input(&self, index: usize) -> &[f64] {
        &self.layer_inputs[index]
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    pub cache: ForwardCache,
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Model {
    /// Builds a model with He-uniform weights (bound `sqrt(6 / fan_in)`) and
    /// zero biases, drawn from a ChaCha8 stream seeded with `seed`.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::IncompatibleDims {
                index: 0,
                detail: format!("input shape {input_shape:?} has a zero dimension"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (index, spec) in specs.iter().enumerate() {
            let out_shape = spec.output_shape(index, &shape)?;
            let (n_w, n_b) = spec.param_counts();
            let bound = if n_w > 0 {
                (6.0 / spec.fan_in() as f64).sqrt()
            } else {
                0.0
            };
            let weights = (0..n_w).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(Layer {
                spec: *spec,
                in_shape: std::mem::replace(&mut shape, out_shape.clone()),
                out_shape,
                weights,
                bias: vec![0.0; n_b],
            });
        }
        let n_classes = match shape.as_slice() {
            [n] if !layers.is_empty() => *n,
            _ => {
                return Err(Error::IncompatibleDims {
                    index: specs.len().saturating_sub(1),
                    detail: format!("model output must be a flat class vector, got {shape:?}"),
                })
            }
        };
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            standardizer: None,
            n_classes,
            seed,
            inference_only: false,
            stamp: fresh_stamp(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn standardizer(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }

    pub fn set_standardizer(&mut self, standardizer: Option<Standardizer>) -> Result<()> {
        if let Some(s) = &standardizer {
            let n = self.input_len();
            if s.mean.len() != n || s.scale.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} standardization entries"),
                    got: format!("{}/{}", s.mean.len(), s.scale.len()),
                });
            }
        }
        self.standardizer = standardizer;
        self.stamp = fresh_stamp();
        Ok(())
    }

    pub fn inference_only(&self) -> bool {
        self.inference_only
    }

    pub fn set_inference_only(&mut self, flag: bool) {
        self.inference_only = flag;
    }

    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Exact number of weights and biases.
    pub fn count_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors: weights then bias for every layer, in layer order.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    /// Mutable parameter tensors. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.stamp = fresh_stamp();
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Replaces every parameter tensor; lengths must match.
    pub fn set_params(&mut self, tensors: Vec<Vec<f64>>) -> Result<()> {
        let current = self.params();
        if tensors.len() != current.len()
            || tensors.iter().zip(&current).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", current.iter().map(|t| t.len()).collect::<Vec<_>>()),
                got: format!("{:?}", tensors.iter().map(Vec::len).collect::<Vec<_>>()),
            });
        }
        if tensors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter value".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("input {:?} ({} values)", self.input_shape, self.input_len()),
                got: format!("{} values", x.len()),
            });
        }
        Ok(())
    }

    fn prepare(&self, x: &[f64]) -> Vec<f64> {
        match &self.standardizer {
            Some(s) => s.apply(x),
            None => x.to_vec(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut h = self.prepare(x);
        for layer in &self.layers {
            let next = layer.forward(&h);
            layer_inputs.push(std::mem::replace(&mut h, next));
        }
        let scores = h.iter().map(|&z| sigmoid(z)).collect();
        Ok(Forward {
            scores,
            cache: ForwardCache {
                stamp: self.stamp,
                raw_input_len: x.len(),
                layer_inputs,
                logits: h.clone(),
            },
            logits: h,
        })
    }

    /// [`Model::forward`] over several inputs at once, with identical
    /// results. Dense layers read each weight row once for the whole set.
    pub fn forward_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Forward>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut hs: Vec<Vec<f64>> = xs.iter().map(|x| self.prepare(x)).collect();
        let mut inputs: Vec<Vec<Vec<f64>>> = (0..xs.len())
            .map(|_| Vec::with_capacity(self.layers.len()))
            .collect();
        for layer in &self.layers {
            let next = layer.forward_many(&hs);
            for (inp, h) in inputs.iter_mut().zip(std::mem::replace(&mut hs, next)) {
                inp.push(h);
            }
        }
        Ok(hs
            .into_iter()
            .zip(inputs)
            .zip(xs)
            .map(|((h, layer_inputs), x)| Forward {
                scores: h.iter().map(|&z| sigmoid(z)).collect(),
                cache: ForwardCache {
                    stamp: self.stamp,
                    raw_input_len: x.len(),
                    layer_inputs,
                    logits: h.clone(),
                },
                logits: h,
            })
            .collect())
    }

    /// [`Model::logits`] over several inputs at once, with identical results.
    pub fn logits_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut hs: Vec<Vec<f64>> = xs.iter().map(|x| self.prepare(x)).collect();
        for layer in &self.layers {
            hs = layer.forward_many(&hs);
        }
        Ok(hs)
    }

    /// Logits without retaining a cache.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = self.prepare(x);
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Per-class scores in (0, 1).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.into_iter().map(sigmoid).collect())
    }

    /// Activation feeding the final dense layer.
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let head_is_dense = matches!(self.layers.last().map(|l| l.spec), Some(LayerSpec::Dense { .. }));
        if !head_is_dense || self.layers.iter().filter(|l| l.spec.is_parametric()).count() < 2 {
            return Err(Error::TooShallow);
        }
        self.check_input(x)?;
        let mut h = self.prepare(x);
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Width of [`Model::penultimate`]'s output.
    pub fn penultimate_dim(&self) -> usize {
        self.layers.last().map(|l| l.in_shape[0]).unwrap_or(0)
    }

    /// Gradients of `Σ_n logit_grad[n] · z_n` with respect to every
    /// parameter and the input.
    pub fn backward(&self, cache: &ForwardCache, logit_grad: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        grads.input = self.backward_into(cache, logit_grad, &mut grads, true)?;
        Ok(grads)
    }

    /// Like [`Model::backward`], with the incoming gradient taken with
    /// respect to the sigmoid scores.
    pub fn backward_scores(&self, cache: &ForwardCache, score_grad: &[f64]) -> Result<Gradients> {
        let logit_grad: Vec<f64> = cache
            .logits
            .iter()
            .zip(score_grad)
            .map(|(&z, &g)| {
                let s = sigmoid(z);
                g * s * (1.0 - s)
            })
            .collect();
        self.backward(cache, &logit_grad)
    }

    /// Parameter gradients of several `(cache, logit_grad)` pairs summed
    /// into `acc`, equal to calling [`Model::backward_into`] on each pair in
    /// order.
    pub(crate) fn backward_many(&self, items: &[(&ForwardCache, &[f64])], acc: &mut Gradients) -> Result<()> {
        for (cache, g) in items {
            if cache.stamp != self.stamp || cache.layer_inputs.len() != self.layers.len() {
                return Err(Error::StaleCache);
            }
            if g.len() != self.n_classes {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} logit gradients", self.n_classes),
                    got: format!("{}", g.len()),
                });
            }
        }
        if items.is_empty() {
            return Ok(());
        }
        let mut gs: Vec<Vec<f64>> = items.iter().map(|(_, g)| g.to_vec()).collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let xs: Vec<&[f64]> = items.iter().map(|(c, _)| c.layer_inputs[i].as_slice()).collect();
            let grads = &mut acc.layers[i];
            match layer.spec {
                LayerSpec::Dense { .. } => {
                    let refs: Vec<&[f64]> = gs.iter().map(Vec::as_slice).collect();
                    let mut gx: Option<Vec<Vec<f64>>> = (i > 0).then(|| xs.iter().map(|x| vec![0.0; x.len()]).collect());
                    kernels::dense_backward_many(
                        &layer.weights,
                        &xs,
                        &refs,
                        &mut grads.weights,
                        &mut grads.bias,
                        gx.as_deref_mut(),
                    );
                    match gx {
                        Some(next) => gs = next,
                        None => return Ok(()),
                    }
                }
                _ => {
                    let mut next = Vec::with_capacity(gs.len());
                    for (x, g) in xs.iter().zip(&gs) {
                        next.push(layer.backward(x, g, grads, i > 0));
                    }
                    if i == 0 {
                        return Ok(());
                    }
                    gs = next.into_iter().map(|g| g.expect("input gradient requested")).collect();
                }
            }
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `acc`. Returns the input
    /// gradient when `want_input` is set, otherwise an empty vector.
    pub(crate) fn backward_into(
        &self,
        cache: &ForwardCache,
        logit_grad: &[f64],
        acc: &mut Gradients,
        want_input: bool,
    ) -> Result<Vec<f64>> {
        if cache.stamp != self.stamp || cache.layer_inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if logit_grad.len() != self.n_classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{} logit gradients", self.n_classes),
                got: format!("{}", logit_grad.len()),
            });
        }
        let mut g = logit_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need = want_input || i > 0;
            match layer.backward(&cache.layer_inputs[i], &g, &mut acc.layers[i], need) {
                Some(next) => g = next,
                None => return Ok(Vec::new()),
            }
        }
        if let Some(s) = &self.standardizer {
            g.iter_mut().zip(&s.scale).for_each(|(v, k)| *v *= k);
        }
        debug_assert_eq!(g.len(), cache.raw_input_len);
        Ok(g)
    }
}

/// Output shape of `specs` applied to `input_shape`, without building.
pub fn output_shape(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<usize>> {
    specs
        .iter()
        .enumerate()
        .try_fold(input_shape.to_vec(), |shape, (i, spec)| spec.output_shape(i, &shape))
}

/// Builds a model whose input shape is implied by a leading dense layer.
pub fn build_model(specs: &[LayerSpec], seed: u64) -> Result<Model> {
    match specs.first() {
        Some(LayerSpec::Dense { input, .. }) => Model::build(&[*input], specs, seed),
        _ => Err(Error::IncompatibleDims {
            index: 0,
            detail: "cannot infer the input shape; use Model::build with an explicit shape".into(),
        }),
    }
}

/// The four-hidden-layer instance classifier over embedding vectors.
pub const MIL_DNN_HIDDEN: [usize; 4] = [512, 512, 256, 128];

pub fn mil_dnn_specs(input_dim: usize, n_classes: usize) -> Vec<LayerSpec> {
    LayerSpec::mlp(input_dim, &MIL_DNN_HIDDEN, n_classes)
}
