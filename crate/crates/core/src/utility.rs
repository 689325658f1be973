//! Downstream classifier utility under four checkpoint-selection protocols.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::parallel_compose;
use crate::dataio::{Dataset, SplitPart};
use crate::error::{invalid, Result};
use crate::mechanisms::{argmax, report_noisy_max};
use crate::rng::SeededRng;
use crate::tinynn::{batch_grad, predict_class, Example, Loss, MlpSpec, ModelCheckpoint, Target};

/// Share of the synthetic set held out for synthetic validation.
pub const SYNV_HOLDOUT: f64 = 0.1;

const STREAM_HOLDOUT: u64 = 0x0701;
const STREAM_CLF_INIT: u64 = 0x0702;
const STREAM_CLF_ORDER: u64 = 0x0703;
const STREAM_LAPLACE: u64 = 0x0704;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Testfix,
    Senv,
    Synv,
    NoisySenv,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Testfix, Protocol::Senv, Protocol::Synv, Protocol::NoisySenv];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Testfix => "testfix",
            Protocol::Senv => "senv",
            Protocol::Synv => "synv",
            Protocol::NoisySenv => "noisy_senv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Selection budget for `noisy_senv`; `f64::INFINITY` selects without noise.
    pub eps_val: f64,
    pub fixed_epochs: usize,
    /// Snapshot every this many epochs.
    pub checkpoint_stride: usize,
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol, eps_val: f64, fixed_epochs: usize) -> Self {
        Self {
            protocol,
            eps_val,
            fixed_epochs,
            checkpoint_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.protocol == Protocol::NoisySenv && !(self.eps_val > 0.0) {
            return invalid("noisy_senv needs eps_val > 0");
        }
        if self.protocol == Protocol::Testfix && self.fixed_epochs == 0 {
            return invalid("testfix needs fixed_epochs >= 1");
        }
        if self.checkpoint_stride == 0 {
            return invalid("checkpoint stride must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub spec: MlpSpec,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl ClassifierTraining {
    pub fn validate(&self) -> Result<()> {
        self.spec.check_loss(Loss::CrossEntropy)?;
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return invalid("classifier training needs epochs, batch size and lr > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityResult {
    pub protocol: Protocol,
    /// Epoch of the chosen snapshot.
    pub selected_step: usize,
    pub test_accuracy: f64,
    /// Set when test labels steered the selection.
    pub dp_violating: bool,
    pub val_counts_released: bool,
    #[serde(with = "crate::serde_float")]
    pub eps_train: f64,
    #[serde(with = "crate::serde_float")]
    pub eps_total: f64,
    pub laplace_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub ckpt: ModelCheckpoint,
}

fn examples(ds: &Dataset) -> Vec<Example> {
    (0..ds.len())
        .map(|i| (ds.image_f64(i), Target::Class(ds.label(i))))
        .collect()
}

pub fn correct_count(ckpt: &ModelCheckpoint, ds: &Dataset) -> Result<u64> {
    let hits: Result<Vec<bool>> = (0..ds.len())
        .into_par_iter()
        .map(|i| predict_class(ckpt, &ds.image_f64(i)).map(|c| c == ds.label(i)))
        .collect();
    Ok(hits?.into_iter().filter(|&h| h).count() as u64)
}

pub fn accuracy(ckpt: &ModelCheckpoint, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return invalid("accuracy of an empty slice");
    }
    if ckpt.spec.output_dim() != ds.num_classes() || ckpt.spec.input_dim() != ds.feature_dim() {
        return invalid("classifier does not fit the dataset");
    }
    Ok(correct_count(ckpt, ds)? as f64 / ds.len() as f64)
}

/// Plain minibatch SGD on cross-entropy; returns a snapshot every `stride` epochs.
pub fn fit_classifier(train: &Dataset, cfg: &ClassifierTraining, stride: usize, seed: u64) -> Result<Vec<Snapshot>> {
    cfg.validate()?;
    if train.is_empty() {
        return invalid("no training data for the classifier");
    }
    if cfg.spec.input_dim() != train.feature_dim() || cfg.spec.output_dim() != train.num_classes() {
        return invalid("classifier spec does not fit the training data");
    }
    let stride = stride.max(1);
    let data = examples(train);
    let mut ckpt = ModelCheckpoint::init(cfg.spec.clone(), &mut SeededRng::new(seed, STREAM_CLF_INIT))?;
    let mut order_rng = SeededRng::new(seed, STREAM_CLF_ORDER);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut snaps = Vec::new();
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (_, g) = batch_grad(&ckpt, &batch, Loss::CrossEntropy)?;
            for (p, gi) in ckpt.params.iter_mut().zip(&g) {
                *p -= cfg.lr * gi;
            }
            ckpt.step += 1;
        }
        if epoch % stride == 0 || epoch == cfg.epochs {
            snaps.push(Snapshot {
                epoch,
                ckpt: ckpt.clone(),
            });
        }
    }
    Ok(snaps)
}

/// 90/10 split of the synthetic set into classifier-train and SynV slices.
pub fn holdout_split(syn: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..syn.len()).collect();
    SeededRng::new(seed, STREAM_HOLDOUT).shuffle(&mut idx);
    let n_hold = ((syn.len() as f64 * SYNV_HOLDOUT).round() as usize).clamp(usize::from(syn.len() > 1), syn.len().saturating_sub(1));
    let (hold, train) = idx.split_at(n_hold);
    let mut hold = hold.to_vec();
    let mut train = train.to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (syn.select(&train), syn.select(&hold))
}

fn best_by_accuracy(snaps: &[Snapshot], ds: &Dataset) -> Result<usize> {
    let accs = snaps.iter().map(|s| accuracy(&s.ckpt, ds)).collect::<Result<Vec<_>>>()?;
    Ok(argmax(&accs).expect("nonempty snapshots"))
}

/// Picks one snapshot per the protocol and reports its sensitive-test accuracy.
pub fn select_checkpoint(
    snaps: &[Snapshot],
    syn_holdout: &Dataset,
    sensitive: &Dataset,
    cfg: &ProtocolConfig,
    eps_train: f64,
    seed: u64,
) -> Result<UtilityResult> {
    cfg.validate()?;
    if snaps.is_empty() {
        return invalid("no classifier snapshots");
    }
    let split = sensitive.split();
    if split.n_val() == 0 || split.n_test() == 0 {
        return invalid("sensitive dataset needs validation and test splits");
    }
    let test = sensitive.part(SplitPart::Test);
    let mut laplace_seed = None;
    let mut val_released = false;
    let mut eps_total = eps_train;
    let pick = match cfg.protocol {
        Protocol::Testfix => snaps
            .iter()
            .position(|s| s.epoch == cfg.fixed_epochs)
            .ok_or_else(|| crate::Error::Validation(format!("no snapshot at epoch {}", cfg.fixed_epochs)))?,
        Protocol::Senv => best_by_accuracy(snaps, &test)?,
        Protocol::Synv => {
            if syn_holdout.is_empty() {
                return invalid("empty synthetic validation slice");
            }
            best_by_accuracy(snaps, syn_holdout)?
        }
        Protocol::NoisySenv => {
            let val = sensitive.part(SplitPart::Val);
            let counts = snaps
                .iter()
                .map(|s| correct_count(&s.ckpt, &val))
                .collect::<Result<Vec<_>>>()?;
            laplace_seed = Some(seed);
            val_released = true;
            eps_total = parallel_compose(eps_train, cfg.eps_val);
            report_noisy_max(&counts, cfg.eps_val, &mut SeededRng::new(seed, STREAM_LAPLACE))?
        }
    };
    Ok(UtilityResult {
        protocol: cfg.protocol,
        selected_step: snaps[pick].epoch,
        test_accuracy: accuracy(&snaps[pick].ckpt, &test)?,
        dp_violating: cfg.protocol == Protocol::Senv,
        val_counts_released: val_released,
        eps_train,
        eps_total,
        laplace_seed,
    })
}

/// Trains on the synthetic set (minus the SynV slice) and selects one snapshot.
pub fn train_eval_classifier(
    syn: &Dataset,
    sensitive: &Dataset,
    training: &ClassifierTraining,
    cfg: &ProtocolConfig,
    eps_train: f64,
    seed: u64,
) -> Result<UtilityResult> {
    if syn.is_empty() {
        return invalid("empty synthetic dataset");
    }
    let (train, hold) = holdout_split(syn, seed);
    let snaps = fit_classifier(&train, training, cfg.checkpoint_stride, seed)?;
    select_checkpoint(&snaps, &hold, sensitive, cfg, eps_train, seed)
}

/// Every listed protocol on one shared set of snapshots, in the given order.
pub fn evaluate_protocols(
    syn: &Dataset,
    sensitive: &Dataset,
    training: &ClassifierTraining,
    template: &ProtocolConfig,
    protocols: &[Protocol],
    eps_train: f64,
    seed: u64,
) -> Result<Vec<UtilityResult>> {
    if syn.is_empty() {
        return invalid("empty synthetic dataset");
    }
    let (train, hold) = holdout_split(syn, seed);
    let snaps = fit_classifier(&train, training, template.checkpoint_stride, seed)?;
    protocols
        .iter()
        .map(|&p| {
            let cfg = ProtocolConfig {
                protocol: p,
                ..template.clone()
            };
            select_checkpoint(&snaps, &hold, sensitive, &cfg, eps_train, seed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: Protocol,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTable {
    /// `per_seed[s][p]` follows [`Protocol::ALL`].
    pub per_seed: Vec<Vec<UtilityResult>>,
    pub summary: Vec<ProtocolSummary>,
    pub gap_senv_noisy_senv: f64,
    pub gap_senv_synv: f64,
}

/// All four protocols per seed on one shared set of snapshots.
pub fn protocol_comparison(
    syn: &Dataset,
    sensitive: &Dataset,
    training: &ClassifierTraining,
    template: &ProtocolConfig,
    eps_train: f64,
    seeds: &[u64],
) -> Result<ProtocolTable> {
    if seeds.len() < 2 {
        return invalid("protocol comparison needs at least two seeds");
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let row = evaluate_protocols(syn, sensitive, training, template, &Protocol::ALL, eps_train, seed)?;
        per_seed.push(row);
    }
    let n = seeds.len() as f64;
    let summary: Vec<ProtocolSummary> = Protocol::ALL
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let accs: Vec<f64> = per_seed.iter().map(|r| r[j].test_accuracy).collect();
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            ProtocolSummary {
                protocol: p,
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
            }
        })
        .collect();
    Ok(ProtocolTable {
        gap_senv_noisy_senv: summary[1].mean_accuracy - summary[3].mean_accuracy,
        gap_senv_synv: summary[1].mean_accuracy - summary[2].mean_accuracy,
        per_seed,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{three_gaussians, FIXTURE_SPLIT};
    use crate::dataio::split_dataset;
    use crate::tinynn::{Activation, OutputHead};

    fn setup() -> (Dataset, Dataset, ClassifierTraining) {
        let sens = split_dataset(&three_gaussians(300, 1), FIXTURE_SPLIT, 1, true).unwrap();
        let syn = three_gaussians(200, 2);
        let training = ClassifierTraining {
            spec: MlpSpec::new(vec![2, 8, 3], Activation::Tanh, OutputHead::Softmax).unwrap(),
            epochs: 6,
            lr: 0.3,
            batch_size: 16,
        };
        (syn, sens, training)
    }

    #[test]
    fn constant_classifier_accuracy() {
        let ds = three_gaussians(30, 0);
        let spec = MlpSpec::new(vec![2, 3], Activation::Relu, OutputHead::Softmax).unwrap();
        // bias of class 1 dominates
        let ckpt = ModelCheckpoint::new(spec, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        let ones: Vec<usize> = (0..30).filter(|&i| ds.label(i) == 1).collect();
        assert_eq!(accuracy(&ckpt, &ds.select(&ones)).unwrap(), 1.0);
        assert!(accuracy(&ckpt, &ds.select(&[])).is_err());
    }

    #[test]
    fn protocols_behave() {
        let (syn, sens, training) = setup();
        let template = ProtocolConfig::new(Protocol::Testfix, 1.0, 3);
        let table = protocol_comparison(&syn, &sens, &training, &template, 1.0, &[0, 1]).unwrap();
        for row in &table.per_seed {
            assert!(row[1].test_accuracy >= row[3].test_accuracy);
            assert!(row[1].dp_violating && !row[3].dp_violating);
            assert_eq!(row[0].selected_step, 3);
            assert_eq!(row[3].eps_total, 1.0);
            assert!(row[3].laplace_seed.is_some());
        }
    }

    #[test]
    fn noiseless_noisy_senv_is_clean_argmax() {
        let (syn, sens, training) = setup();
        let (train, hold) = holdout_split(&syn, 3);
        let snaps = fit_classifier(&train, &training, 1, 3).unwrap();
        let cfg = ProtocolConfig::new(Protocol::NoisySenv, f64::INFINITY, 1);
        let r = select_checkpoint(&snaps, &hold, &sens, &cfg, 2.0, 3).unwrap();
        let val = sens.part(SplitPart::Val);
        let counts: Vec<f64> = snaps.iter().map(|s| correct_count(&s.ckpt, &val).unwrap() as f64).collect();
        assert_eq!(r.selected_step, snaps[argmax(&counts).unwrap()].epoch);
        assert_eq!(r.eps_total, f64::INFINITY);
    }

    #[test]
    fn missing_splits_rejected() {
        let (syn, _, training) = setup();
        let cfg = ProtocolConfig::new(Protocol::Senv, 1.0, 1);
        assert!(train_eval_classifier(&syn, &three_gaussians(50, 0), &training, &cfg, 1.0, 0).is_err());
    }
}
