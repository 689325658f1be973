//! Fidelity metrics over feature vectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{feature_rows, squared_distance, RffMap};
use crate::error::{invalid, Result};
use crate::tinynn::{penultimate, ModelCheckpoint};

/// Ridge added to the covariance when there are fewer samples than dimensions.
pub const COV_RIDGE: f64 = 1e-6;
pub const DEFAULT_PR_K: usize = 3;
const EIGEN_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// True when the ridge was added.
    pub regularized: bool,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return invalid("ragged feature rows");
    }
    Ok(d)
}

pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianFit> {
    let n = features.len();
    if n < 2 {
        return invalid(format!("need at least 2 feature rows, got {n}"));
    }
    let d = check_rows(features)?;
    let mut mu = DVector::zeros(d);
    for r in features {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for r in features {
        let c = DVector::from_column_slice(r) - &mu;
        sigma.ger(1.0, &c, &c, 1.0);
    }
    sigma /= (n - 1) as f64;
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let regularized = d > n;
    if regularized {
        for i in 0..d {
            sigma[(i, i)] += COV_RIDGE;
        }
    }
    Ok(GaussianFit { mu, sigma, regularized })
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| if v < EIGEN_CLAMP { v.max(0.0).sqrt() } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared mean distance plus the trace term, with the cross term computed
/// as `Tr((A^{1/2} B A^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return invalid(format!("dimension mismatch {} vs {}", a.dim(), b.dim()));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let root_a = sqrt_psd(&a.sigma);
    let inner = &root_a * &b.sigma * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .sum();
    Ok((mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross).max(0.0))
}

/// `exp(mean KL(p(y|x) || p(y)))` over rows of class probabilities.
pub fn inception_score_proxy(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return invalid("no probability rows");
    }
    let k = check_rows(probs)?;
    for (i, row) in probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
            return invalid(format!("row {i} is not a probability vector"));
        }
    }
    let mut marginal = vec![0.0; k];
    for row in probs {
        for (m, p) in marginal.iter_mut().zip(row) {
            *m += p / probs.len() as f64;
        }
    }
    let kl_mean = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                // p ln p -> 0 as p -> 0; p > 0 implies m > 0.
                .map(|(&p, &m)| if p > 0.0 { p * (p.ln() - m.ln()) } else { 0.0 })
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.len() as f64;
    Ok(kl_mean.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrThreshold {
    /// Radius of each reference point to its k-th nearest neighbour in its own set.
    KnnRadius { k: usize },
    /// One radius for every point.
    Fixed { radius: f64 },
}

impl Default for PrThreshold {
    fn default() -> Self {
        PrThreshold::KnnRadius { k: DEFAULT_PR_K }
    }
}

/// Squared distance from each point to its k-th nearest other point.
fn knn_radii_sq(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    set.par_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = set
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| squared_distance(a, b))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn nearest(point: &[f64], set: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, b) in set.iter().enumerate() {
        let d = squared_distance(point, b);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn coverage(queries: &[Vec<f64>], reference: &[Vec<f64>], radii_sq: &[f64]) -> f64 {
    let hits = queries
        .par_iter()
        .filter(|q| {
            let (j, d) = nearest(q, reference);
            d <= radii_sq[j]
        })
        .count();
    hits as f64 / queries.len() as f64
}

/// Precision: share of synthetic points whose nearest real point has them
/// inside its radius. Recall: the same with the roles swapped.
pub fn precision_recall(real: &[Vec<f64>], syn: &[Vec<f64>], threshold: PrThreshold) -> Result<(f64, f64)> {
    let dr = check_rows(real)?;
    let ds = check_rows(syn)?;
    if real.is_empty() || syn.is_empty() {
        return invalid("empty feature set");
    }
    if dr != ds {
        return invalid(format!("dimension mismatch {dr} vs {ds}"));
    }
    let (real_r, syn_r) = match threshold {
        PrThreshold::KnnRadius { k } => {
            if k == 0 || k >= real.len() || k >= syn.len() {
                return invalid(format!("k = {k} needs more than k points in each set"));
            }
            (knn_radii_sq(real, k), knn_radii_sq(syn, k))
        }
        PrThreshold::Fixed { radius } => {
            if !(radius >= 0.0) {
                return invalid("radius must be >= 0");
            }
            (vec![radius * radius; real.len()], vec![radius * radius; syn.len()])
        }
    };
    Ok((coverage(syn, real, &real_r), coverage(real, syn, &syn_r)))
}

/// Desk-scale stand-in for a pretrained image feature network.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    RawPixels,
    Rff(RffMap),
    ClassifierPenultimate(ModelCheckpoint),
}

impl FeatureExtractor {
    pub fn extract(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            FeatureExtractor::RawPixels => Ok(rows.to_vec()),
            FeatureExtractor::Rff(map) => feature_rows(rows, map),
            FeatureExtractor::ClassifierPenultimate(ckpt) => rows.par_iter().map(|r| penultimate(ckpt, r)).collect(),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            FeatureExtractor::RawPixels => "raw_pixels".into(),
            FeatureExtractor::Rff(map) => format!("rff(D={},bw={})", map.feature_dim(), map.bandwidth()),
            FeatureExtractor::ClassifierPenultimate(ckpt) => {
                format!("classifier_penultimate({:?})", ckpt.spec.layer_sizes)
            }
        }
    }
}
