//! Desk-scale denoising diffusion: noise schedule, forward process, an MLP
//! noise predictor conditioned on sinusoidal time features and a one-hot
//! label, DP-SGD training with noise multiplicity, and ancestral sampling.
//!
//! Pixels in `[0,1]` are mapped to `[-1,1]` before diffusing and back after
//! sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sensitive;
use crate::accountant::{AccountantLedger, LedgerEvent};
use crate::dataio::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::SeededRng;
use crate::tinynn::{
    accumulate_vjp, poisson_batch, DpTrainer, Activation, Adam, DpSgdConfig, MlpSpec, ModelCheckpoint, OutputHead,
};

/// Noise multiplicity used for full-scale runs.
pub const DEFAULT_K_MULT: usize = 32;

pub(crate) const STREAM_INIT: u64 = 0x1417;
pub(crate) const STREAM_BATCH: u64 = 0xba7c;
pub(crate) const STREAM_DPSGD: u64 = 0xd95d;
pub(crate) const STREAM_DRAWS: u64 = 0xd4a3;
pub(crate) const STREAM_PRETRAIN: u64 = 0x94e7;
pub(crate) const STREAM_SAMPLE: u64 = 0x5a3f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphabars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return invalid(format!("betas must satisfy 0 < {beta_start} <= {beta_end} < 1"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// The usual 1e-4..0.02 over 1000 steps, rescaled to `steps` so the
    /// final `ᾱ` stays near zero.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, (1e-4 * scale).min(0.5), (0.02 * scale).min(0.999))
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return invalid("schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return invalid(format!("beta {b} outside (0,1)"));
        }
        let mut alphabars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphabars.push(acc);
        }
        Ok(Self { betas, alphabars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("step {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alphabar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphabars[t - 1])
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabars
    }
}

pub fn diffuse_with_alphabar(x0: &[f64], e: &[f64], alphabar: f64) -> Result<Vec<f64>> {
    if x0.len() != e.len() {
        return invalid(format!("x0 has {} entries, noise has {}", x0.len(), e.len()));
    }
    if !(0.0..=1.0).contains(&alphabar) {
        return invalid(format!("alphabar {alphabar} outside [0,1]"));
    }
    let keep = alphabar.sqrt();
    let add = (1.0 - alphabar).sqrt();
    Ok(x0.iter().zip(e).map(|(x, n)| keep * x + add * n).collect())
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 − ᾱ_t) e`.
pub fn diffuse_forward(x0: &[f64], t: usize, e: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    diffuse_with_alphabar(x0, e, sched.alphabar(t)?)
}

/// How the noise predictor's input vector is laid out: `[x_t, time features, one-hot label]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserLayout {
    pub data_dim: usize,
    pub num_classes: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl DenoiserLayout {
    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        if self.time_dim % 2 != 0 {
            return invalid("time feature dimension must be even");
        }
        let mut sizes = vec![self.data_dim + self.time_dim + self.num_classes];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        MlpSpec::new(sizes, self.activation, OutputHead::Linear)
    }

    pub fn input(&self, x_t: &[f64], t: usize, label: Option<usize>) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.data_dim + self.time_dim + self.num_classes);
        v.extend_from_slice(x_t);
        let half = self.time_dim / 2;
        for i in 0..half {
            let freq = (-(i as f64) / half.max(1) as f64 * 1000f64.ln()).exp();
            v.push((t as f64 * freq).sin());
            v.push((t as f64 * freq).cos());
        }
        let start = v.len();
        v.resize(start + self.num_classes, 0.0);
        if let Some(y) = label {
            if y < self.num_classes {
                v[start + y] = 1.0;
            }
        }
        v
    }
}

/// A noise predictor together with everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub ckpt: ModelCheckpoint,
    pub layout: DenoiserLayout,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn init(layout: DenoiserLayout, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let ckpt = ModelCheckpoint::init(layout.mlp_spec()?, &mut SeededRng::new(seed, STREAM_INIT))?;
        Ok(Self { ckpt, layout, schedule })
    }

    pub fn predict_noise(&self, x_t: &[f64], t: usize, label: Option<usize>) -> Result<Vec<f64>> {
        crate::tinynn::forward(&self.ckpt, &self.layout.input(x_t, t, label))
    }

    /// Stores layout and schedule in the checkpoint's metadata.
    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(self
            .ckpt
            .clone()
            .with_meta("denoiser_layout", serde_json::to_string(&self.layout)?)
            .with_meta("noise_schedule", serde_json::to_string(&self.schedule.betas)?))
    }

    pub fn from_checkpoint(ckpt: ModelCheckpoint) -> Result<Self> {
        let layout: DenoiserLayout = serde_json::from_str(
            ckpt.meta
                .get("denoiser_layout")
                .ok_or_else(|| Error::Format("checkpoint has no denoiser layout".into()))?,
        )?;
        let betas: Vec<f64> = serde_json::from_str(
            ckpt.meta
                .get("noise_schedule")
                .ok_or_else(|| Error::Format("checkpoint has no noise schedule".into()))?,
        )?;
        if layout.mlp_spec()? != ckpt.spec {
            return Err(Error::Format("layout does not match checkpoint architecture".into()));
        }
        Ok(Self {
            ckpt,
            layout,
            schedule: NoiseSchedule::from_betas(betas)?,
        })
    }
}

pub(crate) fn to_model_space(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 2.0 * v - 1.0).collect()
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise-prediction loss of one example averaged over `k` draws of `(t, e)`,
/// with the timesteps stratified over `1..=T`. Accumulates `scale * grad`.
fn multiplicity_loss(
    model: &DiffusionModel,
    x0: &[f64],
    label: Option<usize>,
    k: usize,
    rng: &mut SeededRng,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let steps = model.schedule.steps();
    let mut total = 0.0;
    for j in 0..k {
        let t = (((j as f64 + rng.uniform()) / k as f64 * steps as f64).floor() as usize + 1).min(steps);
        let e = rng.normal_vec(x0.len());
        let x_t = diffuse_forward(x0, t, &e, &model.schedule)?;
        let input = model.layout.input(&x_t, t, label);
        let d = x0.len() as f64;
        let mut value = 0.0;
        accumulate_vjp(
            &model.ckpt,
            &input,
            |out| {
                value = out.iter().zip(&e).map(|(o, n)| (o - n) * (o - n)).sum::<f64>() / d;
                Ok(out.iter().zip(&e).map(|(o, n)| 2.0 * (o - n) / d).collect())
            },
            scale / k as f64,
            grad,
        )?;
        total += value;
    }
    Ok(total / k as f64)
}

/// Label conditioning for training and pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Use the dataset's labels.
    Conditional,
    /// Feed the all-zero label vector.
    Unconditional,
    /// Draw a uniform label over the model's classes for every example.
    RandomLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpdmReport {
    /// Mean multiplicity loss over each step's batch (NaN for empty batches).
    pub losses: Vec<f64>,
    pub sigma: f64,
    pub k_mult: usize,
}

/// DP-SGD training of the noise predictor with noise multiplicity. Each
/// sampled example's loss is averaged over `k_mult` `(t, e)` draws before its
/// single gradient is clipped, so the multiplicity costs nothing extra. Appends
/// one subsampled-Gaussian event covering `cfg.steps` steps.
pub fn dpdmlite_train(
    sensitive: &Sensitive,
    init: DiffusionModel,
    cfg: &DpSgdConfig,
    k_mult: usize,
    ledger: &mut AccountantLedger,
    seed: u64,
) -> Result<(DiffusionModel, DpdmReport)> {
    cfg.validate()?;
    if k_mult == 0 {
        return invalid("noise multiplicity must be >= 1");
    }
    if init.layout.data_dim != sensitive.feature_dim() {
        return invalid("denoiser data dimension does not match the dataset");
    }
    ledger.push(LedgerEvent::SubsampledGaussian {
        q: cfg.q,
        sigma: cfg.sigma,
        steps: cfg.steps,
    })?;
    let mut batch_rng = SeededRng::new(seed, STREAM_BATCH);
    let mut noise_rng = SeededRng::new(seed, STREAM_DPSGD);
    let mut model = init;
    let mut trainer = DpTrainer::new(*cfg, model.ckpt.params.len())?;
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let data = sensitive.release();
        let batch = poisson_batch(data.len(), cfg.q, &mut batch_rng)?;
        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = SeededRng::new(seed, mix(STREAM_DRAWS ^ step, i as u64));
                let mut g = vec![0.0; model.ckpt.params.len()];
                let x0 = to_model_space(&data.image_f64(i));
                let loss = multiplicity_loss(&model, &x0, Some(data.label(i)), k_mult, &mut rng, 1.0, &mut g)?;
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mean_loss = if results.is_empty() {
            f64::NAN
        } else {
            results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64
        };
        losses.push(mean_loss);
        let grads: Vec<Vec<f64>> = results.into_iter().map(|r| r.1).collect();
        model.ckpt = trainer.step(&model.ckpt, &grads, &mut noise_rng)?;
    }
    Ok((
        model,
        DpdmReport {
            losses,
            sigma: cfg.sigma,
            k_mult,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: LabelMode,
}

/// Non-private Adam training of the noise predictor on public (or already
/// released) data. Returns the per-step losses; records the mode in the
/// checkpoint metadata.
pub fn pretrain(
    model: DiffusionModel,
    public: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(DiffusionModel, Vec<f64>)> {
    if public.is_empty() {
        return invalid("pretraining set is empty");
    }
    if public.feature_dim() != model.layout.data_dim {
        return invalid("pretraining data dimension does not match the denoiser");
    }
    if cfg.mode == LabelMode::Conditional && public.num_classes() > model.layout.num_classes {
        return invalid(format!(
            "conditional pretraining needs labels below {}, public set has {} classes",
            model.layout.num_classes,
            public.num_classes()
        ));
    }
    let mut rng = SeededRng::new(seed, STREAM_PRETRAIN);
    let mut model = model;
    let mut opt = Adam::new(cfg.lr, model.ckpt.params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.max(1);
    for step in 0..cfg.steps {
        let picks: Vec<(usize, Option<usize>)> = (0..batch)
            .map(|_| {
                let i = rng.below(public.len() as u64) as usize;
                let label = match cfg.mode {
                    LabelMode::Conditional => Some(public.label(i)),
                    LabelMode::Unconditional => None,
                    LabelMode::RandomLabel => Some(rng.below(model.layout.num_classes.max(1) as u64) as usize),
                };
                (i, label)
            })
            .collect();
        let results: Vec<(f64, Vec<f64>)> = picks
            .par_iter()
            .enumerate()
            .map(|(j, &(i, label))| {
                let mut r = SeededRng::new(seed, mix(STREAM_PRETRAIN ^ step as u64, j as u64));
                let mut g = vec![0.0; model.ckpt.params.len()];
                let x0 = to_model_space(&public.image_f64(i));
                let loss = multiplicity_loss(&model, &x0, label, 1, &mut r, 1.0 / batch as f64, &mut g)?;
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut grad = vec![0.0; model.ckpt.params.len()];
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l / batch as f64;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        opt.step(&mut model.ckpt.params, &grad);
        model.ckpt.step += 1;
        losses.push(loss);
    }
    let mode = match cfg.mode {
        LabelMode::Conditional => "conditional",
        LabelMode::Unconditional => "unconditional",
        LabelMode::RandomLabel => "random_label",
    };
    model.ckpt = model.ckpt.with_meta("pretrain_mode", mode);
    Ok((model, losses))
}

/// Noise-prediction loss over a dataset with `draws` seeded `(t, e)` pairs per
/// example. The same seed gives the same draws, so two models can be compared.
pub fn diffusion_loss(model: &DiffusionModel, data: &Dataset, draws: usize, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return invalid("loss over an empty dataset");
    }
    let mut scratch = vec![0.0; model.ckpt.params.len()];
    let mut total = 0.0;
    for i in 0..data.len() {
        let mut rng = SeededRng::new(seed, mix(0x7a11, i as u64));
        let x0 = to_model_space(&data.image_f64(i));
        total += multiplicity_loss(model, &x0, Some(data.label(i)), draws, &mut rng, 0.0, &mut scratch)?;
    }
    Ok(total / data.len() as f64)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, one generator stream
/// per sample. Output is mapped back to `[0,1]` and clamped.
pub fn generate_diffusion(model: &DiffusionModel, labels: &[Option<usize>], seed: u64) -> Result<Vec<Vec<f64>>> {
    let sched = &model.schedule;
    let steps = sched.steps();
    let d = model.layout.data_dim;
    labels
        .par_iter()
        .enumerate()
        .map(|(n, &label)| {
            let mut rng = SeededRng::new(seed, mix(STREAM_SAMPLE, n as u64));
            let mut x = rng.normal_vec(d);
            for t in (1..=steps).rev() {
                let beta = sched.beta(t)?;
                let abar = sched.alphabar(t)?;
                let eps = model.predict_noise(&x, t, label)?;
                let coef = beta / (1.0 - abar).sqrt();
                let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
                for (xi, ei) in x.iter_mut().zip(&eps) {
                    *xi = inv_sqrt_alpha * (*xi - coef * ei);
                }
                if t > 1 {
                    let abar_prev = sched.alphabar(t - 1)?;
                    let var = beta * (1.0 - abar_prev) / (1.0 - abar);
                    let std = var.sqrt();
                    for xi in x.iter_mut() {
                        *xi += std * rng.normal();
                    }
                }
            }
            Ok(x.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
        })
        .collect()
}
