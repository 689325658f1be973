//! Public-data selection driven by a noisy class histogram of the sensitive set.

use serde::{Deserialize, Serialize};

use super::Sensitive;
use crate::accountant::{AccountantLedger, LedgerEvent};
use crate::dataio::Dataset;
use crate::error::{invalid, Result};
use crate::rng::SeededRng;
use crate::tinynn::{predict_class, ModelCheckpoint};

/// Fraction of public classes kept by default.
pub const DEFAULT_K_FRAC: f64 = 0.05;

const STREAM_SELECT: u64 = 0x5e1e;

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub subset: Dataset,
    /// Selected public classes, best first.
    pub classes: Vec<usize>,
    pub noisy_histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub classes: Vec<usize>,
    pub subset_size: usize,
}

/// Classifies every sensitive image with `query_clf` (trained on public
/// labels only), releases the public-class histogram with Gaussian noise
/// (sensitivity 1, multiplier `sigma_sel`) and keeps the public images of
/// the top `ceil(k_frac * K_pub)` noisy classes.
pub fn privimage_select(
    public: &Dataset,
    sensitive: &Sensitive,
    query_clf: &ModelCheckpoint,
    k_frac: f64,
    sigma_sel: f64,
    ledger: &mut AccountantLedger,
    seed: u64,
) -> Result<Selection> {
    if !(k_frac > 0.0 && k_frac <= 1.0) {
        return invalid(format!("k_frac {k_frac} outside (0,1]"));
    }
    let k_pub = public.num_classes();
    if query_clf.spec.output_dim() != k_pub {
        return invalid("query classifier does not predict the public classes");
    }
    if query_clf.spec.input_dim() != sensitive.feature_dim() {
        return invalid("query classifier input does not match the sensitive images");
    }
    ledger.push(LedgerEvent::Gaussian { sigma: sigma_sel, releases: 1 })?;
    let data = sensitive.release();
    let mut hist = vec![0.0; k_pub];
    for i in 0..data.len() {
        hist[predict_class(query_clf, &data.image_f64(i))?] += 1.0;
    }
    let mut rng = SeededRng::new(seed, STREAM_SELECT);
    let noisy: Vec<f64> = hist
        .iter()
        .map(|h| h + if sigma_sel > 0.0 { sigma_sel * rng.normal() } else { 0.0 })
        .collect();
    let keep = ((k_frac * k_pub as f64).ceil() as usize).clamp(1, k_pub);
    let mut order: Vec<usize> = (0..k_pub).collect();
    order.sort_by(|&a, &b| noisy[b].total_cmp(&noisy[a]).then(a.cmp(&b)));
    order.truncate(keep);
    let chosen: Vec<usize> = (0..public.len())
        .filter(|&i| order.contains(&public.label(i)))
        .collect();
    Ok(Selection {
        subset: public.select(&chosen),
        classes: order,
        noisy_histogram: noisy,
    })
}
