//! Two-phase training: noisy per-class central images first, then DP-SGD.

use serde::{Deserialize, Serialize};

use super::diffusion::{dpdmlite_train, pretrain, DiffusionModel, DpdmReport, LabelMode, PretrainConfig};
use super::Sensitive;
use crate::accountant::{AccountantLedger, LedgerEvent};
use crate::dataio::{Dataset, SplitManifest};
use crate::error::{invalid, Error, Result};
use crate::mechanisms::{clip_l2, gaussian_mechanism, GaussianNoiseSpec};
use crate::rng::SeededRng;
use crate::tinynn::DpSgdConfig;

const STREAM_GROUPS: u64 = 0xfe7a;
const STREAM_CENTRAL_NOISE: u64 = 0xfe7b;

/// Central images per class used for EuroSAT-like data at full scale.
pub const CENTRAL_IMAGES_EUROSAT: usize = 10;
/// Central images per class used for MNIST-like data at full scale.
pub const CENTRAL_IMAGES_MNIST: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralImages {
    /// `[K][n_central]` noisy group means.
    pub per_class: Vec<Vec<Vec<f64>>>,
    /// Group sizes matching `per_class`.
    pub counts: Vec<Vec<usize>>,
    pub pixel_clip: f64,
    pub sigma: f64,
}

impl CentralImages {
    /// Central images as a labeled dataset, clamped to `[0,1]`.
    pub fn to_dataset(&self, dims: [usize; 3]) -> Result<Dataset> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (k, images) in self.per_class.iter().enumerate() {
            for img in images {
                rows.push(img.clone());
                labels.push(k as u32);
            }
        }
        let mut ds = Dataset::from_rows(&rows, dims, labels, self.per_class.len())?;
        ds = ds.with_split(SplitManifest::default())?;
        Ok(ds)
    }
}

/// Splits each class into `n_central` groups, clips every image to L2 norm
/// `pixel_clip`, averages each group and adds Gaussian noise with
/// sensitivity `pixel_clip / m_group` (known group size). Groups are
/// disjoint, so the whole set is one release in the ledger.
pub fn dpfeta_central(
    sensitive: &Sensitive,
    n_central: usize,
    pixel_clip: f64,
    sigma: f64,
    ledger: &mut AccountantLedger,
    seed: u64,
) -> Result<CentralImages> {
    if n_central == 0 {
        return invalid("need at least one central image per class");
    }
    if !(pixel_clip > 0.0) {
        return invalid("pixel clip must be > 0");
    }
    ledger.push(LedgerEvent::Gaussian { sigma, releases: 1 })?;
    let data = sensitive.release();
    let k = data.num_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..data.len() {
        members[data.label(i)].push(i);
    }
    let mut group_rng = SeededRng::new(seed, STREAM_GROUPS);
    let mut noise_rng = SeededRng::new(seed, STREAM_CENTRAL_NOISE);
    let mut per_class = Vec::with_capacity(k);
    let mut counts = Vec::with_capacity(k);
    for (class, idx) in members.iter_mut().enumerate() {
        if idx.len() < n_central {
            return Err(Error::Grouping(format!(
                "class {class} has {} records, fewer than {n_central} groups",
                idx.len()
            )));
        }
        group_rng.shuffle(idx);
        let mut images = Vec::with_capacity(n_central);
        let mut sizes = Vec::with_capacity(n_central);
        for g in 0..n_central {
            let lo = g * idx.len() / n_central;
            let hi = (g + 1) * idx.len() / n_central;
            let m = hi - lo;
            let mut mean = vec![0.0; data.feature_dim()];
            for &i in &idx[lo..hi] {
                let clipped = clip_l2(&data.image_f64(i), pixel_clip)?;
                for (a, v) in mean.iter_mut().zip(&clipped) {
                    *a += v / m as f64;
                }
            }
            let spec = GaussianNoiseSpec::new(pixel_clip / m as f64, sigma)?;
            images.push(gaussian_mechanism(&mean, spec, &mut noise_rng)?);
            sizes.push(m);
        }
        per_class.push(images);
        counts.push(sizes);
    }
    Ok(CentralImages {
        per_class,
        counts,
        pixel_clip,
        sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralPhase {
    pub n_central: usize,
    pub pixel_clip: f64,
    pub sigma: f64,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetaOutcome {
    pub model: DiffusionModel,
    pub central: Option<CentralImages>,
    pub report: DpdmReport,
}

/// Optional central-image warm-up followed by DP-SGD fine-tuning. Without a
/// central phase this is exactly [`dpdmlite_train`].
pub fn dpfeta_train(
    sensitive: &Sensitive,
    init: DiffusionModel,
    central: Option<&CentralPhase>,
    cfg: &DpSgdConfig,
    k_mult: usize,
    ledger: &mut AccountantLedger,
    seed: u64,
) -> Result<FetaOutcome> {
    let (start, central_images) = match central {
        None => (init, None),
        Some(phase) => {
            let images = dpfeta_central(sensitive, phase.n_central, phase.pixel_clip, phase.sigma, ledger, seed)?;
            let ds = images.to_dataset(sensitive.dims())?;
            let pre = PretrainConfig {
                mode: LabelMode::Conditional,
                ..phase.pretrain.clone()
            };
            let (warm, _) = pretrain(init, &ds, &pre, seed)?;
            (warm, Some(images))
        }
    };
    let (model, report) = dpdmlite_train(sensitive, start, cfg, k_mult, ledger, seed)?;
    Ok(FetaOutcome {
        model,
        central: central_images,
        report,
    })
}
