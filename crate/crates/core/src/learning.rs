//! Feed-forward classifier used as the model carried by transactions.
//!
//! Parameters live in one flat vector. For each layer the weight matrix
//! (row-major, `out x in`) comes first, followed by the `out` biases.
//! Hidden layers use ReLU; the output layer is a softmax over classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::Sample;
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "architecture needs >= 2 positive layer sizes, got {layer_sizes:?}"
            )));
        }
        Ok(Architecture { layer_sizes })
    }

    /// `[input, 32, classes]`, the default desk-scale network.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(vec![input_dim, 32, num_classes])
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// (weight offset, bias offset, fan_in, fan_out) for every layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let wo = offset;
                let bo = wo + n_in * n_out;
                offset = bo + n_out;
                (wo, bo, n_in, n_out)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f64>,
    arch: Architecture,
}

impl ModelParams {
    pub fn new(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        Ok(ModelParams { values, arch })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        ModelParams {
            values: vec![0.0; arch.param_count()],
            arch: arch.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same_arch(&self, other: &ModelParams) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchitectureMismatch(
                self.arch.layer_sizes.clone(),
                other.arch.layer_sizes.clone(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub local_batches: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    /// Local schedule of the clustered image experiments: 1 epoch of
    /// 10 batches of 10 samples, SGD at 0.05.
    fn default() -> Self {
        TrainConfig {
            local_epochs: 1,
            local_batches: 10,
            batch_size: 10,
            learning_rate: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.local_batches == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "local_epochs, local_batches and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub sample_count: usize,
}

/// Weights ~ N(0, 2 / fan_in), biases 0.
pub fn init_params<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> ModelParams {
    let mut params = ModelParams::zeros(arch);
    for (wo, _, n_in, n_out) in arch.layers() {
        let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).unwrap();
        for v in &mut params.values[wo..wo + n_in * n_out] {
            *v = normal.sample(rng);
        }
    }
    params
}

/// Element-wise mean of two models.
pub fn average(p: &ModelParams, q: &ModelParams) -> Result<ModelParams> {
    p.check_same_arch(q)?;
    Ok(ModelParams {
        values: p
            .values
            .iter()
            .zip(&q.values)
            .map(|(a, b)| (a + b) / 2.0)
            .collect(),
        arch: p.arch.clone(),
    })
}

fn check_dims(params: &ModelParams, data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let arch = params.arch();
    for s in data {
        if s.features.len() != arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: arch.input_dim(),
                actual: s.features.len(),
            });
        }
        if s.label >= arch.num_classes() {
            return Err(Error::InvalidClass {
                class: s.label,
                num_classes: arch.num_classes(),
            });
        }
    }
    Ok(())
}

/// Runs the network on one input. `acts[l]` receives the post-activation
/// output of layer `l` (the last entry holds softmax probabilities).
fn forward(params: &ModelParams, x: &[f64], acts: &mut Vec<Vec<f64>>) {
    let layers = params.arch.layers();
    let n_layers = layers.len();
    acts.resize(n_layers, Vec::new());
    for (l, &(wo, bo, n_in, n_out)) in layers.iter().enumerate() {
        let (done, rest) = acts.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
        let out = &mut rest[0];
        out.clear();
        let w = &params.values[wo..bo];
        let b = &params.values[bo..bo + n_out];
        for j in 0..n_out {
            let row = &w[j * n_in..(j + 1) * n_in];
            let z = b[j] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
            out.push(z);
        }
        if l + 1 < n_layers {
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        } else {
            softmax_in_place(out);
        }
    }
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Class prediction for a single feature vector.
pub fn predict(params: &ModelParams, x: &[f64]) -> usize {
    let mut acts = Vec::new();
    forward(params, x, &mut acts);
    argmax(acts.last().unwrap())
}

pub fn evaluate(params: &ModelParams, data: &[Sample]) -> Result<Evaluation> {
    check_dims(params, data)?;
    let mut acts = Vec::new();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in data {
        forward(params, &s.features, &mut acts);
        let probs = acts.last().unwrap();
        if argmax(probs) == s.label {
            correct += 1;
        }
        loss -= probs[s.label].clamp(PROB_FLOOR, 1.0).ln();
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        sample_count: data.len(),
    })
}

/// Mean cross-entropy over `batch` (no clamping, used for gradient checks).
pub fn loss(params: &ModelParams, batch: &[Sample]) -> Result<f64> {
    check_dims(params, batch)?;
    let mut acts = Vec::new();
    let mut total = 0.0;
    for s in batch {
        forward(params, &s.features, &mut acts);
        total -= acts.last().unwrap()[s.label].ln();
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of the mean cross-entropy over `batch`.
pub fn gradient(params: &ModelParams, batch: &[Sample]) -> Result<Vec<f64>> {
    check_dims(params, batch)?;
    let mut grad = vec![0.0; params.values.len()];
    let mut acts = Vec::new();
    accumulate_gradient(params, batch.iter(), &mut acts, &mut grad);
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok(grad)
}

/// Adds the per-sample cross-entropy gradients (unscaled) into `grad`.
fn accumulate_gradient<'a>(
    params: &ModelParams,
    batch: impl Iterator<Item = &'a Sample>,
    acts: &mut Vec<Vec<f64>>,
    grad: &mut [f64],
) {
    let layers = params.arch.layers();
    let mut delta: Vec<f64> = Vec::new();
    let mut prev_delta: Vec<f64> = Vec::new();
    for s in batch {
        forward(params, &s.features, acts);
        delta.clear();
        delta.extend_from_slice(acts.last().unwrap());
        delta[s.label] -= 1.0;
        for l in (0..layers.len()).rev() {
            let (wo, bo, n_in, n_out) = layers[l];
            let input: &[f64] = if l == 0 { &s.features } else { &acts[l - 1] };
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                grad[bo + j] += d;
                let row = &mut grad[wo + j * n_in..wo + (j + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                prev_delta.clear();
                prev_delta.resize(n_in, 0.0);
                let w = &params.values[wo..bo];
                for j in 0..n_out {
                    let d = delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    for (pd, wij) in prev_delta.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                        *pd += d * wij;
                    }
                }
                // ReLU derivative, taken as 0 at the kink
                for (pd, a) in prev_delta.iter_mut().zip(&acts[l - 1]) {
                    if *a <= 0.0 {
                        *pd = 0.0;
                    }
                }
                std::mem::swap(&mut delta, &mut prev_delta);
            }
        }
    }
}

/// Proximal anchor for FedProx-style local objectives:
/// `loss + mu/2 * ||w - anchor||^2`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a ModelParams,
    pub mu: f64,
}

/// One SGD step on a batch, optionally with a proximal term.
pub fn sgd_step(
    params: &mut ModelParams,
    batch: &[&Sample],
    learning_rate: f64,
    proximal: Option<Proximal<'_>>,
    acts: &mut Vec<Vec<f64>>,
    grad: &mut Vec<f64>,
) {
    grad.clear();
    grad.resize(params.values.len(), 0.0);
    accumulate_gradient(params, batch.iter().copied(), acts, grad);
    let scale = 1.0 / batch.len() as f64;
    match proximal {
        Some(Proximal { anchor, mu }) if mu != 0.0 => {
            for ((w, g), a) in params.values.iter_mut().zip(grad.iter()).zip(&anchor.values) {
                *w -= learning_rate * (g * scale + mu * (*w - a));
            }
        }
        _ => {
            for (w, g) in params.values.iter_mut().zip(grad.iter()) {
                *w -= learning_rate * (g * scale);
            }
        }
    }
}

/// Local SGD. Each epoch shuffles the data and takes `local_batches`
/// batches of `batch_size`, wrapping around when the data is short.
pub fn train<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &[Sample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    train_with(params, data, cfg, None, rng)
}

pub fn train_with<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &[Sample],
    cfg: &TrainConfig,
    proximal: Option<Proximal<'_>>,
    rng: &mut R,
) -> Result<ModelParams> {
    check_dims(params, data)?;
    if let Some(p) = proximal {
        params.check_same_arch(p.anchor)?;
    }
    let mut out = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acts = Vec::new();
    let mut grad = Vec::new();
    let mut batch: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        let mut cursor = 0;
        for _ in 0..cfg.local_batches {
            batch.clear();
            for _ in 0..cfg.batch_size {
                batch.push(&data[order[cursor % order.len()]]);
                cursor += 1;
            }
            sgd_step(&mut out, &batch, cfg.learning_rate, proximal, &mut acts, &mut grad);
        }
    }
    Ok(out)
}
