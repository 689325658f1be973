//! Random Fourier features, kernel mean embeddings and their sensitivity.
//!
//! Features pair cosine and sine of each frequency, so every feature vector
//! has unit L2 norm exactly and the mean-embedding sensitivity bounds hold
//! without any clipping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mechanisms::{gaussian_mechanism, GaussianNoiseSpec};
use crate::rng::SeededRng;

/// Maximum number of neighbouring pairs the brute-force verifier will visit.
pub const MAX_ENUMERATED_PAIRS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    /// `[D/2 x d]`, row-major.
    frequencies: Vec<f64>,
    input_dim: usize,
    feature_dim: usize,
    bandwidth: f64,
}

impl RffMap {
    /// Draws `feature_dim / 2` frequencies from `N(0, I / bandwidth²)`.
    pub fn new(input_dim: usize, feature_dim: usize, bandwidth: f64, rng: &mut SeededRng) -> Result<Self> {
        if feature_dim == 0 || feature_dim % 2 != 0 {
            return invalid(format!("feature dimension {feature_dim} must be even and positive"));
        }
        if input_dim == 0 {
            return invalid("input dimension must be positive");
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return invalid(format!("bandwidth {bandwidth} must be > 0"));
        }
        let frequencies = (0..feature_dim / 2 * input_dim)
            .map(|_| rng.normal() / bandwidth)
            .collect();
        Ok(Self {
            frequencies,
            input_dim,
            feature_dim,
            bandwidth,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn frequency(&self, j: usize) -> &[f64] {
        &self.frequencies[j * self.input_dim..(j + 1) * self.input_dim]
    }

    /// Projections `w_j · x` for every frequency.
    pub fn projections(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return invalid(format!("input has {} dims, map expects {}", x.len(), self.input_dim));
        }
        Ok((0..self.feature_dim / 2)
            .map(|j| self.frequency(j).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect())
    }

    /// Jacobian-vector-transpose: given `dL/dφ`, returns `dL/dx`.
    pub fn pullback(&self, x: &[f64], grad_features: &[f64]) -> Result<Vec<f64>> {
        let proj = self.projections(x)?;
        let half = self.feature_dim / 2;
        let scale = (1.0 / half as f64).sqrt();
        let mut grad_x = vec![0.0; self.input_dim];
        for (j, p) in proj.iter().enumerate() {
            // d cos = -sin, d sin = cos
            let coeff = scale * (-p.sin() * grad_features[j] + p.cos() * grad_features[half + j]);
            for (g, w) in grad_x.iter_mut().zip(self.frequency(j)) {
                *g += coeff * w;
            }
        }
        Ok(grad_x)
    }
}

/// `φ(x) = sqrt(2/D) (cos(w_j·x) ..., sin(w_j·x) ...)`.
pub fn rff_features(x: &[f64], map: &RffMap) -> Result<Vec<f64>> {
    let proj = map.projections(x)?;
    let scale = (1.0 / proj.len() as f64).sqrt();
    let mut out = Vec::with_capacity(map.feature_dim);
    out.extend(proj.iter().map(|p| scale * p.cos()));
    out.extend(proj.iter().map(|p| scale * p.sin()));
    Ok(out)
}

/// Median pairwise Euclidean distance over (at most) the first `limit` rows.
pub fn median_heuristic(rows: &[Vec<f64>], limit: usize) -> Result<f64> {
    let rows = &rows[..rows.len().min(limit)];
    if rows.len() < 2 {
        return invalid("median heuristic needs at least two points");
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(squared_distance(&rows[i], &rows[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists[dists.len() / 2];
    if m > 0.0 {
        Ok(m)
    } else {
        invalid("median pairwise distance is zero")
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub mu: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEmbedding {
    pub mu: Vec<f64>,
    pub m: usize,
    /// Class-conditional means, indexed by label; `None` when unlabeled.
    pub per_class: Option<Vec<ClassEmbedding>>,
}

impl MeanEmbedding {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Fixed-order mean of feature vectors.
fn mean_of(features: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for f in features {
        for (a, v) in acc.iter_mut().zip(f) {
            *a += v;
        }
    }
    let m = features.len() as f64;
    acc.iter().map(|a| a / m).collect()
}

/// Feature vectors of every row, computed in parallel, order preserved.
pub fn feature_rows(rows: &[Vec<f64>], map: &RffMap) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    rows.par_iter().map(|x| rff_features(x, map)).collect()
}

/// Mean RFF embedding of `rows`, plus per-class means when labels are given.
pub fn mean_embedding(
    rows: &[Vec<f64>],
    labels: Option<(&[u32], usize)>,
    map: &RffMap,
) -> Result<MeanEmbedding> {
    if rows.is_empty() {
        return invalid("mean embedding of an empty set");
    }
    let feats = feature_rows(rows, map)?;
    mean_embedding_of_features(&feats, labels)
}

pub fn mean_embedding_of_features(
    feats: &[Vec<f64>],
    labels: Option<(&[u32], usize)>,
) -> Result<MeanEmbedding> {
    if feats.is_empty() {
        return invalid("mean embedding of an empty set");
    }
    let dim = feats[0].len();
    if feats.iter().any(|f| f.len() != dim) {
        return invalid("feature vectors differ in length");
    }
    let per_class = match labels {
        None => None,
        Some((labels, k)) => {
            if labels.len() != feats.len() {
                return invalid("labels and features differ in length");
            }
            let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
            for (f, &l) in feats.iter().zip(labels) {
                let l = l as usize;
                if l >= k {
                    return invalid(format!("label {l} not below K={k}"));
                }
                groups[l].push(f.clone());
            }
            Some(
                groups
                    .iter()
                    .map(|g| ClassEmbedding {
                        mu: if g.is_empty() { vec![0.0; dim] } else { mean_of(g, dim) },
                        count: g.len(),
                    })
                    .collect(),
            )
        }
    };
    Ok(MeanEmbedding {
        mu: mean_of(feats, dim),
        m: feats.len(),
        per_class,
    })
}

/// Which datasets count as neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborNotion {
    /// Same size, one record replaced.
    ReplaceOne,
    /// One record added or removed; the size itself is private.
    AddRemoveUnknownM,
    /// One record added or removed, normalizing by a public size `m`.
    AddRemoveKnownM,
}

impl NeighborNotion {
    pub const ALL: [NeighborNotion; 3] = [
        NeighborNotion::ReplaceOne,
        NeighborNotion::AddRemoveUnknownM,
        NeighborNotion::AddRemoveKnownM,
    ];
}

/// L2 sensitivity of the mean of `m` unit-norm feature vectors.
pub fn sensitivity_mean_embedding(m: usize, notion: NeighborNotion) -> Result<f64> {
    if m == 0 {
        return invalid("sensitivity needs m >= 1");
    }
    Ok(match notion {
        NeighborNotion::ReplaceOne | NeighborNotion::AddRemoveUnknownM => 2.0 / m as f64,
        NeighborNotion::AddRemoveKnownM => 1.0 / m as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityWitness {
    pub max_diff: f64,
    /// Alphabet indices of the two neighbouring datasets.
    pub dataset: Vec<usize>,
    pub neighbor: Vec<usize>,
}

fn mean_of_symbols(alphabet: &[Vec<f64>], symbols: &[usize], denom: usize, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for &s in symbols {
        for (a, v) in acc.iter_mut().zip(&alphabet[s]) {
            *a += v;
        }
    }
    if denom == 0 {
        return acc;
    }
    acc.iter().map(|a| a / denom as f64).collect()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Exhaustively enumerates neighbouring datasets over `alphabet` and returns
/// the largest distance between their mean embeddings, with a witness pair.
///
/// Datasets are sequences over the alphabet. `m` is the size of the larger
/// dataset: replace-one compares two size-`m` sets; add/remove drops one
/// record from a size-`m` set, normalizing the smaller set by `m − 1`
/// (unknown size) or by `m` (known size). An empty set has the zero mean.
pub fn brute_force_sensitivity(
    alphabet: &[Vec<f64>],
    m: usize,
    notion: NeighborNotion,
) -> Result<SensitivityWitness> {
    if alphabet.is_empty() {
        return invalid("alphabet is empty");
    }
    if m == 0 {
        return invalid("m must be >= 1");
    }
    let dim = alphabet[0].len();
    if alphabet.iter().any(|v| v.len() != dim) {
        return invalid("alphabet vectors differ in length");
    }
    if let Some(v) = alphabet.iter().find(|v| v.iter().map(|x| x * x).sum::<f64>() > 1.0 + 1e-12) {
        return invalid(format!("alphabet vector {v:?} has norm above 1"));
    }
    let a = alphabet.len() as u64;
    let datasets = a
        .checked_pow(m as u32)
        .ok_or_else(|| Error::Size(format!("{a}^{m} datasets")))?;
    let per_dataset = match notion {
        NeighborNotion::ReplaceOne => m as u64 * (a - 1),
        _ => m as u64,
    };
    let pairs = datasets.saturating_mul(per_dataset.max(1));
    if pairs > MAX_ENUMERATED_PAIRS {
        return Err(Error::Size(format!(
            "{pairs} neighbouring pairs exceeds the {MAX_ENUMERATED_PAIRS} limit"
        )));
    }

    let mut best = SensitivityWitness {
        max_diff: 0.0,
        dataset: vec![0; m],
        neighbor: vec![0; m],
    };
    let mut symbols = vec![0usize; m];
    loop {
        let base = mean_of_symbols(alphabet, &symbols, m, dim);
        match notion {
            NeighborNotion::ReplaceOne => {
                for pos in 0..m {
                    for s in 0..alphabet.len() {
                        if s == symbols[pos] {
                            continue;
                        }
                        let mut other = symbols.clone();
                        other[pos] = s;
                        let d = diff_norm(&base, &mean_of_symbols(alphabet, &other, m, dim));
                        if d > best.max_diff {
                            best = SensitivityWitness {
                                max_diff: d,
                                dataset: symbols.clone(),
                                neighbor: other,
                            };
                        }
                    }
                }
            }
            NeighborNotion::AddRemoveUnknownM | NeighborNotion::AddRemoveKnownM => {
                let denom = if notion == NeighborNotion::AddRemoveKnownM { m } else { m - 1 };
                for pos in 0..m {
                    let mut smaller = symbols.clone();
                    smaller.remove(pos);
                    let d = diff_norm(&base, &mean_of_symbols(alphabet, &smaller, denom, dim));
                    if d > best.max_diff {
                        best = SensitivityWitness {
                            max_diff: d,
                            dataset: symbols.clone(),
                            neighbor: smaller,
                        };
                    }
                }
            }
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == m {
                return Ok(best);
            }
            symbols[i] += 1;
            if symbols[i] < alphabet.len() {
                break;
            }
            symbols[i] = 0;
            i += 1;
        }
    }
}

/// Gaussian release of the mean embedding. The overall mean uses `m`; each
/// class mean is perturbed with the sensitivity of its own count `m_k`.
pub fn noisy_mean_embedding(
    emb: &MeanEmbedding,
    sigma: f64,
    notion: NeighborNotion,
    rng: &mut SeededRng,
) -> Result<MeanEmbedding> {
    let spec = GaussianNoiseSpec::new(sensitivity_mean_embedding(emb.m, notion)?, sigma)?;
    let mu = gaussian_mechanism(&emb.mu, spec, rng)?;
    let per_class = match &emb.per_class {
        None => None,
        Some(classes) => Some(
            classes
                .iter()
                .map(|c| {
                    if c.count == 0 {
                        return Ok(c.clone());
                    }
                    let spec = GaussianNoiseSpec::new(sensitivity_mean_embedding(c.count, notion)?, sigma)?;
                    Ok(ClassEmbedding {
                        mu: gaussian_mechanism(&c.mu, spec, rng)?,
                        count: c.count,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(MeanEmbedding {
        mu,
        m: emb.m,
        per_class,
    })
}

/// Plug-in RFF estimate of MMD²: `||mu_a − mu_b||²`.
pub fn mmd2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("embedding dims differ: {} vs {}", a.len(), b.len()));
    }
    Ok(squared_distance(a, b))
}
