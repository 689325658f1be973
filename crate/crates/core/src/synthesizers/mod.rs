//! One synthesizer per level at which privacy noise enters: the input
//! statistic (kernel mean embedding), the model update (DP-SGD diffusion),
//! the output selection (private voting), and a mix (noisy central images
//! before DP-SGD). Also public pretraining and public-subset selection.

pub mod diffusion;
pub mod dpfeta;
pub mod dpmerf;
pub mod pe;
pub mod privimage;
mod sensitive;

pub use sensitive::Sensitive;

use crate::accountant::{calibrate_sigma_with, AccountantLedger, LedgerEvent, PrivacySpec};
use crate::error::Result;

/// Noise multiplier for one Gaussian release spending `target` (0 when unbounded).
pub fn single_release_sigma(target: Option<PrivacySpec>) -> Result<f64> {
    match target {
        None => Ok(0.0),
        Some(t) if t.is_unbounded() => Ok(0.0),
        Some(t) => calibrate_sigma_with(&AccountantLedger::new(), t, |sigma| LedgerEvent::Gaussian { sigma, releases: 1 }),
    }
}

/// Noise multiplier for `steps` subsampled steps so that, on top of the
/// events already in `prefix`, the whole ledger spends at most `target`.
pub fn dpsgd_sigma(prefix: &AccountantLedger, target: Option<PrivacySpec>, q: f64, steps: u64) -> Result<f64> {
    match target {
        None => Ok(0.0),
        Some(t) if t.is_unbounded() => Ok(0.0),
        Some(t) => calibrate_sigma_with(prefix, t, |sigma| LedgerEvent::SubsampledGaussian { q, sigma, steps }),
    }
}
