//! A small fully connected network with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Layer `l` maps `n_l -> n_{l+1}` and
//! stores its weights row-major (`[n_{l+1} x n_l]`) followed by its bias.
//! Hidden layers apply the configured activation; the last layer feeds the
//! output head (identity or softmax).

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{TensorData, TensorFile};
use crate::error::{invalid, Error, Result};
use crate::mechanisms::{clip_l2, l2_norm};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean over output coordinates of the squared error; linear head only.
    Mse,
    /// Negative log-likelihood of the target class; softmax head only.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, output_head: OutputHead) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            activation,
            output_head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return invalid("an MLP needs at least an input and an output layer");
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return invalid("layer sizes must be >= 1");
        }
        let mut total: usize = 0;
        for w in self.layer_sizes.windows(2) {
            total = w[0]
                .checked_mul(w[1])
                .and_then(|p| p.checked_add(w[1]))
                .and_then(|p| p.checked_add(total))
                .ok_or_else(|| Error::Validation("parameter count overflows".into()))?;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut at = 0;
        for w in self.layer_sizes.windows(2) {
            offsets.push(at);
            at += w[0] * w[1] + w[1];
        }
        offsets
    }

    pub fn check_loss(&self, loss: Loss) -> Result<()> {
        match (loss, self.output_head) {
            (Loss::Mse, OutputHead::Linear) | (Loss::CrossEntropy, OutputHead::Softmax) => Ok(()),
            _ => invalid(format!("{loss:?} loss cannot be used with a {:?} head", self.output_head)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    #[serde(skip)]
    pub params: Vec<f64>,
    pub spec: MlpSpec,
    pub step: u64,
    /// Word position of the training generator when the checkpoint was taken.
    pub rng_state: u128,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl ModelCheckpoint {
    pub fn new(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return invalid(format!(
                "{} parameters given, spec needs {}",
                params.len(),
                spec.param_count()
            ));
        }
        Ok(Self {
            params,
            spec,
            step: 0,
            rng_state: 0,
            meta: BTreeMap::new(),
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let n = spec.param_count();
        Self::new(spec, vec![0.0; n])
    }

    /// He (relu) or Xavier (tanh) scaled normal weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        for w in spec.layer_sizes.windows(2) {
            let gain = match spec.activation {
                Activation::Relu => 2.0,
                Activation::Tanh => 1.0,
            };
            let std = (gain / w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| std * rng.normal()));
            params.extend(std::iter::repeat(0.0).take(w[1]));
        }
        Self::new(spec, params)
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    /// Writes `<stem>.dpsl` (parameters) and `<stem>.json` (sidecar).
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let values = self.params.iter().map(|&p| p as f32).collect();
        TensorFile::from_f32(&[self.params.len()], values)?.write(dir.join(format!("{stem}.dpsl")))?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let tensor = TensorFile::read(dir.join(format!("{stem}.dpsl")))?;
        Self::from_parts(&sidecar, tensor)
    }

    /// Rebuilds a checkpoint from its sidecar JSON and parameter tensor.
    pub fn from_parts(sidecar: &str, tensor: TensorFile) -> Result<Self> {
        let mut ckpt: ModelCheckpoint = serde_json::from_str(sidecar)?;
        ckpt.spec.validate()?;
        if tensor.dims().len() != 1 {
            return Err(Error::Format("parameter tensor must be rank 1".into()));
        }
        let TensorData::F32(values) = tensor.into_data() else {
            return Err(Error::Format("parameter tensor must be f32".into()));
        };
        if values.len() != ckpt.spec.param_count() {
            return Err(Error::Format(format!(
                "{} parameters stored, spec needs {}",
                values.len(),
                ckpt.spec.param_count()
            )));
        }
        ckpt.params = values.into_iter().map(f64::from).collect();
        Ok(ckpt)
    }
}

/// Per-layer values kept for the backward pass.
struct Trace {
    /// Input to each layer (index 0 is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer; the last one holds the logits.
    preacts: Vec<Vec<f64>>,
}

fn activate(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
    }
}

fn activate_grad(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => {
            let t = z.tanh();
            1.0 - t * t
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn run(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Result<Trace> {
    if x.len() != spec.input_dim() {
        return invalid(format!("input has {} dims, network expects {}", x.len(), spec.input_dim()));
    }
    let offsets = spec.layer_offsets();
    let mut inputs = Vec::with_capacity(spec.num_layers());
    let mut preacts = Vec::with_capacity(spec.num_layers());
    let mut current = x.to_vec();
    for (l, w) in spec.layer_sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &params[offsets[l]..offsets[l] + n_in * n_out];
        let bias = &params[offsets[l] + n_in * n_out..offsets[l] + n_in * n_out + n_out];
        let z: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &weights[o * n_in..(o + 1) * n_in];
                bias[o] + row.iter().zip(&current).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let last = l + 1 == spec.num_layers();
        let next = if last {
            z.clone()
        } else {
            z.iter().map(|&v| activate(spec.activation, v)).collect()
        };
        inputs.push(std::mem::replace(&mut current, next));
        preacts.push(z);
    }
    Ok(Trace { inputs, preacts })
}

/// Accumulates `scale * dLoss/dparams` into `grad`, given `dLoss/dlogits`.
/// Returns `dLoss/dinput`.
fn backprop(spec: &MlpSpec, params: &[f64], trace: &Trace, grad_logits: &[f64], scale: f64, grad: &mut [f64]) -> Vec<f64> {
    let offsets = spec.layer_offsets();
    let mut delta = grad_logits.to_vec();
    for l in (0..spec.num_layers()).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let off = offsets[l];
        let input = &trace.inputs[l];
        for o in 0..n_out {
            let d = scale * delta[o];
            if d != 0.0 {
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            grad[off + n_in * n_out + o] += d;
        }
        let weights = &params[off..off + n_in * n_out];
        let mut back = vec![0.0; n_in];
        for o in 0..n_out {
            let d = delta[o];
            if d != 0.0 {
                for (b, w) in back.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *b += d * w;
                }
            }
        }
        if l > 0 {
            let z = &trace.preacts[l - 1];
            for (b, &zv) in back.iter_mut().zip(z) {
                *b *= activate_grad(spec.activation, zv);
            }
        }
        delta = back;
    }
    delta
}

pub fn forward(ckpt: &ModelCheckpoint, x: &[f64]) -> Result<Vec<f64>> {
    let trace = run(&ckpt.spec, &ckpt.params, x)?;
    let logits = trace.preacts.last().expect("at least one layer");
    Ok(match ckpt.spec.output_head {
        OutputHead::Linear => logits.clone(),
        OutputHead::Softmax => softmax(logits),
    })
}

/// Activations of the last hidden layer (the input itself for a single-layer net).
pub fn penultimate(ckpt: &ModelCheckpoint, x: &[f64]) -> Result<Vec<f64>> {
    let trace = run(&ckpt.spec, &ckpt.params, x)?;
    Ok(trace.inputs.last().expect("at least one layer").clone())
}

pub fn predict_class(ckpt: &ModelCheckpoint, x: &[f64]) -> Result<usize> {
    let trace = run(&ckpt.spec, &ckpt.params, x)?;
    let logits = trace.preacts.last().expect("at least one layer");
    Ok(crate::mechanisms::argmax(logits).expect("nonempty output"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Vector(Vec<f64>),
    Class(usize),
}

pub type Example = (Vec<f64>, Target);

fn loss_and_grad(spec: &MlpSpec, logits: &[f64], target: &Target, loss: Loss) -> Result<(f64, Vec<f64>)> {
    spec.check_loss(loss)?;
    match (loss, target) {
        (Loss::Mse, Target::Vector(t)) => {
            if t.len() != logits.len() {
                return invalid(format!("target has {} dims, output has {}", t.len(), logits.len()));
            }
            let d = logits.len() as f64;
            let value = logits.iter().zip(t).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / d;
            let grad = logits.iter().zip(t).map(|(y, t)| 2.0 * (y - t) / d).collect();
            Ok((value, grad))
        }
        (Loss::CrossEntropy, Target::Class(c)) => {
            if *c >= logits.len() {
                return invalid(format!("class {c} not below {}", logits.len()));
            }
            let p = softmax(logits);
            let value = -p[*c].max(1e-300).ln();
            let mut grad = p;
            grad[*c] -= 1.0;
            Ok((value, grad))
        }
        _ => invalid(format!("{loss:?} loss needs a matching target kind")),
    }
}

pub fn loss_value(ckpt: &ModelCheckpoint, x: &[f64], target: &Target, loss: Loss) -> Result<f64> {
    let trace = run(&ckpt.spec, &ckpt.params, x)?;
    Ok(loss_and_grad(&ckpt.spec, trace.preacts.last().expect("layer"), target, loss)?.0)
}

/// Gradient of one example's loss with respect to the parameters.
pub fn example_grad(ckpt: &ModelCheckpoint, x: &[f64], target: &Target, loss: Loss) -> Result<(f64, Vec<f64>)> {
    let trace = run(&ckpt.spec, &ckpt.params, x)?;
    let (value, g_logits) = loss_and_grad(&ckpt.spec, trace.preacts.last().expect("layer"), target, loss)?;
    let mut grad = vec![0.0; ckpt.params.len()];
    backprop(&ckpt.spec, &ckpt.params, &trace, &g_logits, 1.0, &mut grad);
    Ok((value, grad))
}

/// Vector-Jacobian product for a linear-head network: given `dL/doutput`,
/// accumulates `scale * dL/dparams` into `grad` and returns the output.
pub fn accumulate_vjp(
    ckpt: &ModelCheckpoint,
    x: &[f64],
    grad_output: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
    scale: f64,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let trace = run(&ckpt.spec, &ckpt.params, x)?;
    let out = trace.preacts.last().expect("layer").clone();
    let g = grad_output(&out)?;
    backprop(&ckpt.spec, &ckpt.params, &trace, &g, scale, grad);
    Ok(out)
}

/// One gradient per example, in batch order.
pub fn per_example_grads(ckpt: &ModelCheckpoint, batch: &[Example], loss: Loss) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return invalid("per-example gradients of an empty batch");
    }
    ckpt.spec.check_loss(loss)?;
    batch
        .par_iter()
        .map(|(x, t)| example_grad(ckpt, x, t, loss).map(|(_, g)| g))
        .collect()
}

/// Gradient of the mean batch loss, accumulated in one sequential pass.
pub fn batch_grad(ckpt: &ModelCheckpoint, batch: &[Example], loss: Loss) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return invalid("gradient of an empty batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; ckpt.params.len()];
    let mut total = 0.0;
    for (x, t) in batch {
        let trace = run(&ckpt.spec, &ckpt.params, x)?;
        let (value, g_logits) = loss_and_grad(&ckpt.spec, trace.preacts.last().expect("layer"), t, loss)?;
        total += value;
        backprop(&ckpt.spec, &ckpt.params, &trace, &g_logits, scale, &mut grad);
    }
    Ok((total * scale, grad))
}

/// Each index joins independently with probability `q`.
pub fn poisson_batch(n: usize, q: f64, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return invalid(format!("sampling rate {q} outside (0,1]"));
    }
    if q == 1.0 {
        return Ok((0..n).collect());
    }
    Ok((0..n).filter(|_| rng.bernoulli(q)).collect())
}

/// How the privatized gradient is applied. Both see only the clipped, noised
/// mean, so the choice does not change the privacy cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpOptimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip: f64,
    pub sigma: f64,
    pub q: f64,
    pub lr: f64,
    pub steps: u64,
    #[serde(default)]
    pub optimizer: DpOptimizer,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) {
            return invalid(format!("clip bound {} must be > 0", self.clip));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return invalid(format!("noise multiplier {} must be >= 0", self.sigma));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return invalid(format!("sampling rate {} outside (0,1]", self.q));
        }
        if !(self.lr > 0.0) {
            return invalid(format!("learning rate {} must be > 0", self.lr));
        }
        Ok(())
    }
}

/// Clips each per-example gradient and returns their mean.
pub fn clipped_mean(grads: &[Vec<f64>], clip: f64) -> Result<Vec<f64>> {
    let dim = grads.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; dim];
    for g in grads {
        if g.len() != dim {
            return invalid("per-example gradients differ in length");
        }
        let c = clip_l2(g, clip)?;
        debug_assert!(l2_norm(&c) <= clip, "clipped gradient exceeds bound");
        for (s, v) in sum.iter_mut().zip(&c) {
            *s += v;
        }
    }
    let n = grads.len().max(1) as f64;
    Ok(sum.iter().map(|s| s / n).collect())
}

/// `mean_i clip(g_i, C) + (Cσ / |B|) z`, normalized by the realized batch
/// size. `None` for an empty batch.
pub fn privatize_gradient(
    grads: &[Vec<f64>],
    n_params: usize,
    cfg: &DpSgdConfig,
    rng: &mut SeededRng,
) -> Result<Option<Vec<f64>>> {
    cfg.validate()?;
    if grads.is_empty() {
        return Ok(None);
    }
    if grads.iter().any(|g| g.len() != n_params) {
        return invalid("gradient length does not match parameter count");
    }
    let mut noisy = clipped_mean(grads, cfg.clip)?;
    let noise_std = cfg.clip * cfg.sigma / grads.len() as f64;
    if noise_std > 0.0 {
        for g in noisy.iter_mut() {
            *g += noise_std * rng.normal();
        }
    }
    Ok(Some(noisy))
}

/// `θ ← θ − η (mean_i clip(g_i, C) + (Cσ / |B|) z)`. Always plain SGD,
/// whatever `cfg.optimizer` says; see [`DpTrainer`] for the dispatching form.
/// An empty batch advances the step counter without an update.
pub fn dpsgd_step(ckpt: &ModelCheckpoint, grads: &[Vec<f64>], cfg: &DpSgdConfig, rng: &mut SeededRng) -> Result<ModelCheckpoint> {
    let mut next = ckpt.clone();
    next.step += 1;
    if let Some(g) = privatize_gradient(grads, ckpt.params.len(), cfg, rng)? {
        for (p, g) in next.params.iter_mut().zip(&g) {
            *p -= cfg.lr * g;
        }
    }
    next.rng_state = rng.word_pos();
    Ok(next)
}

/// DP-SGD loop state: applies each privatized gradient with the configured optimizer.
#[derive(Debug, Clone)]
pub struct DpTrainer {
    cfg: DpSgdConfig,
    adam: Option<Adam>,
}

impl DpTrainer {
    pub fn new(cfg: DpSgdConfig, n_params: usize) -> Result<Self> {
        cfg.validate()?;
        let adam = (cfg.optimizer == DpOptimizer::Adam).then(|| Adam::new(cfg.lr, n_params));
        Ok(Self { cfg, adam })
    }

    pub fn step(&mut self, ckpt: &ModelCheckpoint, grads: &[Vec<f64>], rng: &mut SeededRng) -> Result<ModelCheckpoint> {
        let Some(adam) = self.adam.as_mut() else {
            return dpsgd_step(ckpt, grads, &self.cfg, rng);
        };
        let mut next = ckpt.clone();
        next.step += 1;
        if let Some(g) = privatize_gradient(grads, ckpt.params.len(), &self.cfg, rng)? {
            adam.step(&mut next.params, &g);
        }
        next.rng_state = rng.word_pos();
        Ok(next)
    }
}

/// Adam, for the non-private parts of training (post-processing and public data).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
