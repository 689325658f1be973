//! Kernel mean-embedding matching with a single private release.
//!
//! The sensitive data is read exactly once, to compute the (class-conditional)
//! mean RFF embedding, which is released through the Gaussian mechanism. The
//! generator is then fitted to the released embedding by ordinary gradient
//! descent; that fit is post-processing and never appends to the ledger.

use serde::{Deserialize, Serialize};

use super::Sensitive;
use crate::accountant::{AccountantLedger, LedgerEvent};
use crate::embeddings::{mean_embedding, noisy_mean_embedding, rff_features, MeanEmbedding, NeighborNotion, RffMap};
use crate::error::{invalid, Result};
use crate::rng::SeededRng;
use crate::tinynn::{accumulate_vjp, forward, Activation, Adam, MlpSpec, ModelCheckpoint, OutputHead};

const STREAM_RELEASE: u64 = 0x3e4f;
const STREAM_GEN_INIT: u64 = 0x6e17;
const STREAM_LATENT: u64 = 0x1a7e;
const STREAM_EVAL: u64 = 0xe7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLayout {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl GeneratorLayout {
    pub fn mlp_spec(&self) -> Result<MlpSpec> {
        let mut sizes = vec![self.latent_dim + self.num_classes];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        MlpSpec::new(sizes, self.activation, OutputHead::Linear)
    }

    fn input(&self, z: &[f64], label: usize) -> Vec<f64> {
        let mut v = z.to_vec();
        v.resize(self.latent_dim + self.num_classes, 0.0);
        if label < self.num_classes {
            v[self.latent_dim + label] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerfConfig {
    pub iters: usize,
    /// Generated samples per class in each iteration.
    pub batch_per_class: usize,
    pub lr: f64,
    pub notion: NeighborNotion,
    /// Samples per class in the fixed evaluation batch used to track the objective.
    pub eval_per_class: usize,
    /// Record the objective every this many iterations.
    pub eval_every: usize,
}

impl Default for MerfConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            batch_per_class: 100,
            lr: 1e-2,
            notion: NeighborNotion::ReplaceOne,
            eval_per_class: 500,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MerfGenerator {
    pub ckpt: ModelCheckpoint,
    pub layout: GeneratorLayout,
}

impl MerfGenerator {
    /// Draws `n` samples with labels cycling through the classes, clamped to `[0,1]`.
    pub fn sample(&self, labels: &[usize], seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = SeededRng::new(seed, STREAM_LATENT ^ 0xffff);
        labels
            .iter()
            .map(|&y| {
                let z = rng.normal_vec(self.layout.latent_dim);
                let out = forward(&self.ckpt, &self.layout.input(&z, y))?;
                Ok(out.iter().map(|v| v.clamp(0.0, 1.0)).collect())
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(self
            .ckpt
            .clone()
            .with_meta("generator_layout", serde_json::to_string(&self.layout)?))
    }

    pub fn from_checkpoint(ckpt: ModelCheckpoint) -> Result<Self> {
        let text = ckpt
            .meta
            .get("generator_layout")
            .ok_or_else(|| crate::error::Error::Format("checkpoint has no generator layout".into()))?;
        let layout: GeneratorLayout = serde_json::from_str(text)?;
        if layout.mlp_spec()? != ckpt.spec {
            return Err(crate::error::Error::Format("layout does not match checkpoint".into()));
        }
        Ok(Self { ckpt, layout })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MerfOutcome {
    pub generator: MerfGenerator,
    pub released: MeanEmbedding,
    /// `(iteration, objective on the fixed evaluation batch)`.
    pub objective: Vec<(usize, f64)>,
}

/// Per-class embedding targets; classes with no records are skipped.
fn targets(emb: &MeanEmbedding, num_classes: usize) -> Vec<(usize, Vec<f64>)> {
    match &emb.per_class {
        Some(classes) => classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.count > 0)
            .map(|(k, c)| (k, c.mu.clone()))
            .collect(),
        None => (0..num_classes.max(1)).map(|k| (k, emb.mu.clone())).collect(),
    }
}

/// `(1/|targets|) Σ_k ||μ̃_k − mean_i φ(G(z_i, k))||²`, and optionally its
/// gradient with respect to the generator parameters.
fn objective(
    gen: &MerfGenerator,
    map: &RffMap,
    targets: &[(usize, Vec<f64>)],
    latents: &[Vec<Vec<f64>>],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let weight = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for ((k, mu), zs) in targets.iter().zip(latents) {
        let b = zs.len() as f64;
        let outs: Vec<Vec<f64>> = zs
            .iter()
            .map(|z| forward(&gen.ckpt, &gen.layout.input(z, *k)))
            .collect::<Result<_>>()?;
        let mut mean = vec![0.0; map.feature_dim()];
        for o in &outs {
            for (m, f) in mean.iter_mut().zip(rff_features(o, map)?) {
                *m += f / b;
            }
        }
        let resid: Vec<f64> = mean.iter().zip(mu).map(|(a, t)| a - t).collect();
        total += weight * resid.iter().map(|r| r * r).sum::<f64>();
        if let Some(g) = grad.as_deref_mut() {
            let dphi: Vec<f64> = resid.iter().map(|r| 2.0 * weight * r / b).collect();
            for z in zs {
                let input = gen.layout.input(z, *k);
                accumulate_vjp(&gen.ckpt, &input, |out| map.pullback(out, &dphi), 1.0, g)?;
            }
        }
    }
    Ok(total)
}

/// Fits a generator to an already released embedding. Touches no private data.
pub fn fit_generator(
    released: &MeanEmbedding,
    map: &RffMap,
    layout: &GeneratorLayout,
    cfg: &MerfConfig,
    seed: u64,
) -> Result<(MerfGenerator, Vec<(usize, f64)>)> {
    if released.dim() != map.feature_dim() {
        return invalid("released embedding does not match the feature map");
    }
    if layout.data_dim != map.input_dim() {
        return invalid("generator output does not match the feature map input");
    }
    let spec = layout.mlp_spec()?;
    let mut gen = MerfGenerator {
        ckpt: ModelCheckpoint::init(spec, &mut SeededRng::new(seed, STREAM_GEN_INIT))?,
        layout: layout.clone(),
    };
    let targets = targets(released, layout.num_classes);
    let mut eval_rng = SeededRng::new(seed, STREAM_EVAL);
    let eval_latents: Vec<Vec<Vec<f64>>> = targets
        .iter()
        .map(|_| (0..cfg.eval_per_class).map(|_| eval_rng.normal_vec(layout.latent_dim)).collect())
        .collect();
    let mut history = vec![(0, objective(&gen, map, &targets, &eval_latents, None)?)];
    let mut opt = Adam::new(cfg.lr, gen.ckpt.params.len());
    let mut rng = SeededRng::new(seed, STREAM_LATENT);
    for it in 1..=cfg.iters {
        let latents: Vec<Vec<Vec<f64>>> = targets
            .iter()
            .map(|_| (0..cfg.batch_per_class).map(|_| rng.normal_vec(layout.latent_dim)).collect())
            .collect();
        let mut grad = vec![0.0; gen.ckpt.params.len()];
        objective(&gen, map, &targets, &latents, Some(&mut grad))?;
        opt.step(&mut gen.ckpt.params, &grad);
        gen.ckpt.step += 1;
        if cfg.eval_every > 0 && (it % cfg.eval_every == 0 || it == cfg.iters) {
            history.push((it, objective(&gen, map, &targets, &eval_latents, None)?));
        }
    }
    Ok((gen, history))
}

/// Releases the class-conditional mean embedding once with noise multiplier
/// `sigma` and fits a generator to it.
pub fn dpmerf_train(
    sensitive: &Sensitive,
    map: &RffMap,
    sigma: f64,
    layout: &GeneratorLayout,
    cfg: &MerfConfig,
    ledger: &mut AccountantLedger,
    seed: u64,
) -> Result<MerfOutcome> {
    if layout.num_classes != sensitive.num_classes() {
        return invalid("generator classes do not match the dataset");
    }
    ledger.push(LedgerEvent::Gaussian { sigma, releases: 1 })?;
    let released = {
        let data = sensitive.release();
        let exact = mean_embedding(&data.rows(), Some((data.labels(), data.num_classes())), map)?;
        noisy_mean_embedding(&exact, sigma, cfg.notion, &mut SeededRng::new(seed, STREAM_RELEASE))?
    };
    let (generator, objective) = fit_generator(&released, map, layout, cfg, seed)?;
    Ok(MerfOutcome {
        generator,
        released,
        objective,
    })
}
