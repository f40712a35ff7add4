//! Dense feed-forward networks with exact backpropagation and Adam.
//!
//! Everything is `f64`. Weights are stored row-major with shape
//! `(out_dim, in_dim)`; batched inputs are matrices with one sample per row.
//!
//! Checkpoint text layout (see also `docs/formats.md`):
//!
//! ```text
//! prefcritic-mlp v1
//! layers 11 256 256 1
//! hidden relu
//! output tanh
//! layer 0
//! <out_dim lines, each in_dim weights>
//! <one line with out_dim biases>
//! layer 1
//! ...
//! ```
//!
//! Numbers are written in shortest round-trip exponent form, so a save/load
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const CHECKPOINT_MAGIC: &str = "prefcritic-mlp v1";

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("update rejected: non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("invalid network definition: {0}")]
    Definition(String),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn shape_err(expected: impl ToString, got: impl ToString) -> NnError {
    NnError::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out_dim, in_dim)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Multi-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    layers: Vec<Dense>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Per-layer parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|&g| g == 0.0))
    }

    /// `self += other * scale`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

/// Intermediate values kept by a batched forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("cache holds at least one layer")
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, deterministic in `seed`.
    pub fn new(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(layer_sizes, hidden_activation, output_activation, |fan_in, fan_out| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.random_range(-limit..=limit)
        })
    }

    pub fn zeros(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self, NnError> {
        Self::build(layer_sizes, hidden_activation, output_activation, |_, _| 0.0)
    }

    fn build(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        mut init: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::Definition(
                "need at least input and output sizes".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(NnError::Definition("layer sizes must be positive".into()));
        }
        if hidden_activation == Activation::Identity && layer_sizes.len() > 2 {
            return Err(NnError::Definition(
                "hidden activation must be relu or tanh".into(),
            ));
        }
        if output_activation == Activation::Relu {
            return Err(NnError::Definition(
                "output activation must be identity or tanh".into(),
            ));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                Dense {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                        init(fan_in, fan_out)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden_activation,
            output_activation,
        })
    }

    /// Builds a network from explicit layers. Shapes must chain.
    pub fn from_layers(
        layers: Vec<Dense>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self, NnError> {
        let first = layers
            .first()
            .ok_or_else(|| NnError::Definition("no layers".into()))?;
        let mut sizes = vec![first.weights.ncols()];
        for (i, layer) in layers.iter().enumerate() {
            let (out_dim, in_dim) = layer.weights.dim();
            if in_dim != *sizes.last().unwrap() || layer.bias.len() != out_dim {
                return Err(shape_err(
                    format!("layer {i} chained to input {}", sizes.last().unwrap()),
                    format!("weights {out_dim}x{in_dim}, bias {}", layer.bias.len()),
                ));
            }
            sizes.push(out_dim);
        }
        let mut net = Self::zeros(&sizes, hidden_activation, output_activation)?;
        net.layers = layers;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(shape_err(self.input_dim(), input.len()));
        }
        let mut x = Array1::from(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_for(i);
            x = (layer.weights.dot(&x) + &layer.bias).mapv_into(|z| act.apply(z));
        }
        Ok(x.to_vec())
    }

    /// Forward pass over a batch (one sample per row).
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>, NnError> {
        self.check_batch(inputs)?;
        let mut x = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_for(i);
            x = (x.dot(&layer.weights.t()) + &layer.bias).mapv_into(|z| act.apply(z));
        }
        Ok(x)
    }

    pub fn forward_cached(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardCache, NnError> {
        self.check_batch(inputs)?;
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        let mut x = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_for(i);
            let z = x.dot(&layer.weights.t()) + &layer.bias;
            let a = z.mapv(|v| act.apply(v));
            cache.inputs.push(x);
            cache.pre.push(z);
            x = a.clone();
            cache.post.push(a);
        }
        Ok(cache)
    }

    /// Backpropagates `output_grad` (dL/d output, one row per sample) through
    /// the cached pass. Parameter gradients are summed over the batch.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        let out = cache.output();
        if output_grad.dim() != out.dim() {
            return Err(shape_err(
                format!("{:?}", out.dim()),
                format!("{:?}", output_grad.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.to_owned();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_for(i);
            let mut dz = upstream;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut dz)
                    .and(&cache.pre[i])
                    .and(&cache.post[i])
                    .for_each(|g, &z, &a| *g *= act.derivative(z, a));
            }
            let dw = dz.t().dot(&cache.inputs[i]);
            let db = dz.sum_axis(Axis(0));
            upstream = dz.dot(&self.layers[i].weights);
            grads.push(Dense {
                weights: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    /// Single-sample backward pass: returns parameter gradients and dL/d input.
    pub fn backward(
        &self,
        input: &[f64],
        output_grad: &[f64],
    ) -> Result<(Gradients, Vec<f64>), NnError> {
        if input.len() != self.input_dim() {
            return Err(shape_err(self.input_dim(), input.len()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(shape_err(self.output_dim(), output_grad.len()));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        let g = Array2::from_shape_vec((1, output_grad.len()), output_grad.to_vec()).unwrap();
        let cache = self.forward_cached(x.view())?;
        let (grads, dx) = self.backward_cached(&cache, g.view())?;
        Ok((grads, dx.into_raw_vec_and_offset().0))
    }

    fn check_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<(), NnError> {
        if inputs.ncols() != self.input_dim() {
            return Err(shape_err(
                format!("{} columns", self.input_dim()),
                format!("{} columns", inputs.ncols()),
            ));
        }
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Parameters in canonical order: per layer, weights row-major then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(shape_err(self.num_params(), params.len()));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .for_each(|p| *p = it.next().unwrap());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|p| p.is_finite()))
    }

    /// One Adam update of every parameter. Rejected without modification if
    /// any gradient is non-finite.
    pub fn apply_adam(&mut self, grads: &Gradients, state: &mut AdamState) -> Result<(), NnError> {
        if grads.layers.len() != self.layers.len() {
            return Err(shape_err(self.layers.len(), grads.layers.len()));
        }
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            if l.weights.dim() != g.weights.dim() || l.bias.len() != g.bias.len() {
                return Err(shape_err(
                    format!("{:?}", l.weights.dim()),
                    format!("{:?}", g.weights.dim()),
                ));
            }
        }
        let mut params = self.params_flat();
        adam_step(&mut params, &grads.flatten(), state)?;
        self.set_params_flat(&params)
    }

    /// Polyak averaging: `self = tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        assert_eq!(self.layer_sizes, source.layer_sizes, "soft update shape");
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.weights.zip_mut_with(&s.weights, |t, &s| *t = tau * s + (1.0 - tau) * *t);
            t.bias.zip_mut_with(&s.bias, |t, &s| *t = tau * s + (1.0 - tau) * *t);
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "layers {}", sizes.join(" "));
        let _ = writeln!(out, "hidden {}", self.hidden_activation.name());
        let _ = writeln!(out, "output {}", self.output_activation.name());
        for (i, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {i}");
            for row in layer.weights.rows() {
                write_row(&mut out, row.iter());
            }
            write_row(&mut out, layer.bias.iter());
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| NnError::Checkpoint {
                line: 0,
                message: format!("unexpected end of file, expected {what}"),
            })
        };
        let (ln, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(ckpt_err(ln, "bad magic"));
        }
        let (ln, sizes_line) = next("layers")?;
        let sizes = sizes_line
            .strip_prefix("layers ")
            .ok_or_else(|| ckpt_err(ln, "expected `layers`"))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| ckpt_err(ln, e)))
            .collect::<Result<Vec<_>, _>>()?;
        let hidden = parse_activation(next("hidden")?, "hidden ")?;
        let output = parse_activation(next("output")?, "output ")?;
        let mut net = Self::zeros(&sizes, hidden, output)?;
        for i in 0..net.layers.len() {
            let (ln, tag) = next("layer tag")?;
            if tag.trim() != format!("layer {i}") {
                return Err(ckpt_err(ln, format!("expected `layer {i}`")));
            }
            let (out_dim, in_dim) = net.layers[i].weights.dim();
            for r in 0..out_dim {
                let (ln, row) = next("weight row")?;
                let vals = parse_row(ln, row, in_dim)?;
                for (c, v) in vals.into_iter().enumerate() {
                    net.layers[i].weights[[r, c]] = v;
                }
            }
            let (ln, row) = next("bias row")?;
            net.layers[i].bias = Array1::from(parse_row(ln, row, out_dim)?);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        crate::io::write_atomic(path, self.to_checkpoint_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

fn write_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

fn ckpt_err(line: usize, message: impl ToString) -> NnError {
    NnError::Checkpoint {
        line,
        message: message.to_string(),
    }
}

fn parse_activation((ln, line): (usize, &str), prefix: &str) -> Result<Activation, NnError> {
    line.strip_prefix(prefix)
        .and_then(|s| Activation::parse(s.trim()))
        .ok_or_else(|| ckpt_err(ln, format!("expected `{}<activation>`", prefix)))
}

fn parse_row(ln: usize, row: &str, expected: usize) -> Result<Vec<f64>, NnError> {
    let vals = row
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| ckpt_err(ln, e)))
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(ckpt_err(
            ln,
            format!("expected {expected} values, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            config,
        }
    }

    pub fn for_net(net: &Mlp, config: AdamConfig) -> Self {
        Self::new(net.num_params(), config)
    }
}

/// Bias-corrected Adam update over flat parameter and gradient slices.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err(
            state.first_moment.len(),
            format!("params {} / grads {}", params.len(), grads.len()),
        ));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient { index });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + epsilon);
    }
    Ok(())
}
