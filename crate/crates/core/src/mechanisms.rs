//! Randomized release primitives.
//!
//! All noise is drawn from a caller-supplied [`SeededRng`]; none of these
//! functions keeps state. Tie-breaking in [`report_noisy_max`] goes to the
//! lowest index, which only matters for the noiseless limit since ties have
//! probability zero under continuous noise.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::SeededRng;
use crate::synthesizers::diffusion::NoiseSchedule;

/// Gaussian release parameters: L2 sensitivity and noise multiplier. The
/// per-coordinate standard deviation is `sensitivity * sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoiseSpec {
    pub sensitivity: f64,
    pub sigma: f64,
}

impl GaussianNoiseSpec {
    pub fn new(sensitivity: f64, sigma: f64) -> Result<Self> {
        let spec = Self { sensitivity, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sensitivity >= 0.0 && self.sensitivity.is_finite()) {
            return invalid(format!("sensitivity {} must be finite and >= 0", self.sensitivity));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return invalid(format!("noise multiplier {} must be finite and >= 0", self.sigma));
        }
        Ok(())
    }

    pub fn std(&self) -> f64 {
        self.sensitivity * self.sigma
    }
}

pub fn gaussian_mechanism(v: &[f64], spec: GaussianNoiseSpec, rng: &mut SeededRng) -> Result<Vec<f64>> {
    spec.validate()?;
    let std = spec.std();
    if std == 0.0 {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|&x| x + std * rng.normal()).collect())
}

/// Adds Laplace(1/epsilon) noise to each count (sensitivity-1 counts).
pub fn laplace_counts(counts: &[u64], epsilon: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon {epsilon} must be > 0"));
    }
    let scale = 1.0 / epsilon;
    Ok(counts.iter().map(|&c| c as f64 + rng.laplace(scale)).collect())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Argmax of `counts + Lap(1/epsilon)`. `epsilon = f64::INFINITY` selects the
/// noiseless argmax without touching the generator.
pub fn report_noisy_max(counts: &[u64], epsilon: f64, rng: &mut SeededRng) -> Result<usize> {
    if counts.is_empty() {
        return invalid("report_noisy_max needs at least one candidate");
    }
    let scores = if epsilon == f64::INFINITY {
        counts.iter().map(|&c| c as f64).collect()
    } else {
        laplace_counts(counts, epsilon, rng)?
    };
    Ok(argmax(&scores).expect("nonempty"))
}

const CLIP_MARGIN: f64 = 1e-12;

/// Euclidean norm, rescaled by the largest entry so it neither overflows nor underflows.
pub fn l2_norm(v: &[f64]) -> f64 {
    let big = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if big == 0.0 || !big.is_finite() {
        return big;
    }
    big * v.iter().map(|x| (x / big) * (x / big)).sum::<f64>().sqrt()
}

/// Scales `g` by `min(1, bound / ||g||)`. When clipping is active the scale
/// is shaved by a relative 1e-12, so the result stays within `bound` however
/// its norm is summed.
pub fn clip_l2(g: &[f64], bound: f64) -> Result<Vec<f64>> {
    if !(bound > 0.0 && bound.is_finite()) {
        return invalid(format!("clip bound {bound} must be finite and > 0"));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return invalid("cannot clip a non-finite gradient");
    }
    let norm = l2_norm(g);
    if norm <= bound {
        return Ok(g.to_vec());
    }
    let mut scale = bound / norm * (1.0 - CLIP_MARGIN);
    loop {
        let out: Vec<f64> = g.iter().map(|x| x * scale).collect();
        if l2_norm(&out) <= bound {
            return Ok(out);
        }
        scale *= 1.0 - f64::EPSILON;
    }
}

/// Inverts `x_t = sqrt(abar) x0 + sqrt(1 - abar) e` given the noise `e`.
pub fn reconstruct_with_alphabar(x_t: &[f64], e: &[f64], alphabar: f64) -> Result<Vec<f64>> {
    if x_t.len() != e.len() {
        return invalid(format!("x_t has {} entries, noise has {}", x_t.len(), e.len()));
    }
    if !(0.0..=1.0).contains(&alphabar) {
        return invalid(format!("alphabar {alphabar} outside [0,1]"));
    }
    if alphabar == 0.0 {
        return Err(Error::Singularity("alphabar is 0: x_t carries no signal".into()));
    }
    let keep = alphabar.sqrt();
    let drop = (1.0 - alphabar).sqrt();
    Ok(x_t.iter().zip(e).map(|(x, n)| (x - n * drop) / keep).collect())
}

/// Recovers `x0` from a released `(x_t, e, t)` triple. Anyone holding the
/// forward-process noise can undo the diffusion exactly, so such a release
/// protects nothing.
pub fn dppromise_reconstruct(x_t: &[f64], e: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    reconstruct_with_alphabar(x_t, e, sched.alphabar(t)?)
}
