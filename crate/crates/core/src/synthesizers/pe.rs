//! Training-free synthesis by private voting.
//!
//! Each round, every private point votes for its nearest candidate. The vote
//! histogram (sensitivity 1 under add/remove) is released with Gaussian noise,
//! thresholded, and used to resample the candidates, which are then perturbed
//! by a variation API. Only the noisy histograms depend on private data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{AccountantLedger, LedgerEvent};
use crate::embeddings::squared_distance;
use crate::error::{invalid, Result};
use crate::rng::SeededRng;

const STREAM_INIT: u64 = 0x9e01;
const STREAM_HIST: u64 = 0x9e02;
const STREAM_RESAMPLE: u64 = 0x9e03;
const STREAM_VARIATION: u64 = 0x9e04;

/// Default number of voting rounds.
pub const DEFAULT_PE_ITERATIONS: usize = 8;

/// Stand-in for a foundation-model API: unconditional random samples, and
/// variations of a given sample whose strength may depend on the round.
pub trait VariationApi: Sync {
    fn random(&self, n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>>;
    fn variation(&self, x: &[f64], round: usize, rng: &mut SeededRng) -> Vec<f64>;
}

/// Uniform initial samples in a box; variations add Gaussian jitter with
/// scale `scale * decay^round`, clamped to the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianJitterApi {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub scale: f64,
    pub decay: f64,
}

impl GaussianJitterApi {
    pub fn unit_box(dim: usize, scale: f64, decay: f64) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
            scale,
            decay,
        }
    }
}

impl VariationApi for GaussianJitterApi {
    fn random(&self, n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                self.lower
                    .iter()
                    .zip(&self.upper)
                    .map(|(lo, hi)| lo + (hi - lo) * rng.uniform())
                    .collect()
            })
            .collect()
    }

    fn variation(&self, x: &[f64], round: usize, rng: &mut SeededRng) -> Vec<f64> {
        let s = self.scale * self.decay.powi(round as i32);
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (v + s * rng.normal()).clamp(*lo, *hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    pub n_candidates: usize,
    pub iterations: usize,
    pub sigma_hist: f64,
    /// Noisy votes below this are dropped; `None` means `2 * sigma_hist`.
    pub threshold: Option<f64>,
}

impl PeConfig {
    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(2.0 * self.sigma_hist)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeRound {
    pub round: usize,
    pub surviving: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeOutcome {
    pub samples: Vec<Vec<f64>>,
    pub rounds: Vec<PeRound>,
    pub fallback_used: bool,
}

fn nearest(point: &[f64], candidates: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Votes per candidate; sums to `private.len()`.
pub fn vote_histogram(private: &[Vec<f64>], candidates: &[Vec<f64>]) -> Vec<u64> {
    let picks: Vec<usize> = private.par_iter().map(|p| nearest(p, candidates)).collect();
    let mut h = vec![0u64; candidates.len()];
    for i in picks {
        h[i] += 1;
    }
    h
}

/// Mean distance from each candidate to its nearest private point. Reads
/// private data directly, so it is a diagnostic for tests, not a release.
pub fn mean_nearest_distance(candidates: &[Vec<f64>], private: &[Vec<f64>]) -> f64 {
    let total: f64 = candidates
        .par_iter()
        .map(|c| {
            private
                .iter()
                .map(|p| squared_distance(c, p))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / candidates.len() as f64
}

/// One voting round over `groups` of private points sharing the candidate
/// sets in `candidates` (one set per group). Returns the resampled sets.
fn vote_round(
    groups: &[Vec<Vec<f64>>],
    candidates: &[Vec<Vec<f64>>],
    cfg: &PeConfig,
    hist_rng: &mut SeededRng,
    resample_rng: &mut SeededRng,
) -> (Vec<Vec<Vec<f64>>>, usize, bool) {
    let mut fallback = false;
    let mut surviving = 0;
    let mut next = Vec::with_capacity(groups.len());
    for (private, cands) in groups.iter().zip(candidates) {
        let h = vote_histogram(private, cands);
        debug_assert_eq!(h.iter().sum::<u64>(), private.len() as u64);
        let noisy: Vec<f64> = h
            .iter()
            .map(|&v| v as f64 + if cfg.sigma_hist > 0.0 { cfg.sigma_hist * hist_rng.normal() } else { 0.0 })
            .collect();
        let threshold = cfg.threshold();
        let kept: Vec<f64> = noisy.iter().map(|&v| if v < threshold { 0.0 } else { v.max(0.0) }).collect();
        let alive = kept.iter().filter(|&&v| v > 0.0).count();
        surviving += alive;
        let weights = if alive > 0 {
            kept
        } else {
            fallback = true;
            noisy.iter().map(|v| v.max(0.0)).collect()
        };
        let resampled: Vec<Vec<f64>> = (0..cands.len())
            .map(|_| {
                let i = resample_rng
                    .categorical(&weights)
                    .unwrap_or_else(|| resample_rng.below(cands.len() as u64) as usize);
                cands[i].clone()
            })
            .collect();
        next.push(resampled);
    }
    (next, surviving, fallback)
}

/// Runs the voting loop for `n_groups` disjoint groups of private points (e.g.
/// one group per class). `fetch` is called once per round to read the private
/// groups; since they are disjoint, each round is a single Gaussian release and
/// the ledger receives one event with `iterations` releases. `observer` sees
/// the candidate sets before round 1 and after every round.
pub fn pe_synthesize_groups(
    n_groups: usize,
    mut fetch: impl FnMut() -> Vec<Vec<Vec<f64>>>,
    api: &dyn VariationApi,
    cfg: &PeConfig,
    ledger: &mut AccountantLedger,
    seed: u64,
    mut observer: impl FnMut(usize, &[Vec<Vec<f64>>]),
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<PeRound>)> {
    if cfg.iterations == 0 {
        return invalid("PE needs at least one iteration");
    }
    if cfg.n_candidates == 0 {
        return invalid("PE needs at least one candidate");
    }
    if !(cfg.sigma_hist >= 0.0) {
        return invalid("histogram noise must be >= 0");
    }
    ledger.push(LedgerEvent::Gaussian {
        sigma: cfg.sigma_hist,
        releases: cfg.iterations as u64,
    })?;
    let mut init_rng = SeededRng::new(seed, STREAM_INIT);
    let mut hist_rng = SeededRng::new(seed, STREAM_HIST);
    let mut resample_rng = SeededRng::new(seed, STREAM_RESAMPLE);
    let mut var_rng = SeededRng::new(seed, STREAM_VARIATION);
    let mut candidates: Vec<Vec<Vec<f64>>> = (0..n_groups).map(|_| api.random(cfg.n_candidates, &mut init_rng)).collect();
    observer(0, &candidates);
    let mut rounds = Vec::with_capacity(cfg.iterations);
    for round in 1..=cfg.iterations {
        let groups = fetch();
        if groups.len() != n_groups {
            return invalid(format!("expected {n_groups} private groups, got {}", groups.len()));
        }
        let (resampled, surviving, fallback) = vote_round(&groups, &candidates, cfg, &mut hist_rng, &mut resample_rng);
        candidates = resampled
            .iter()
            .map(|set| set.iter().map(|x| api.variation(x, round, &mut var_rng)).collect())
            .collect();
        rounds.push(PeRound {
            round,
            surviving,
            fallback,
        });
        observer(round, &candidates);
    }
    Ok((candidates, rounds))
}

/// Single-group voting loop over a private feature set.
pub fn pe_synthesize(
    private: &[Vec<f64>],
    api: &dyn VariationApi,
    cfg: &PeConfig,
    ledger: &mut AccountantLedger,
    seed: u64,
) -> Result<PeOutcome> {
    if private.is_empty() {
        return invalid("PE needs private points to vote");
    }
    let (mut sets, rounds) = pe_synthesize_groups(1, || vec![private.to_vec()], api, cfg, ledger, seed, |_, _| {})?;
    Ok(PeOutcome {
        samples: sets.pop().expect("one group"),
        fallback_used: rounds.iter().any(|r| r.fallback),
        rounds,
    })
}
