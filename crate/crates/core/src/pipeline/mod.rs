//! Config-driven runs: prepare, pretrain, train, synthesize, evaluate, report.
//!
//! Every run lives in `<exp>/<run-id>/` with `config.json`, `ledger.json`,
//! `checkpoints/`, `synthetic/`, `metrics.json` and `log.txt`. A failed stage
//! leaves its partial artifacts and an `ERROR` file. Models always go through
//! disk between stages so a staged run and `run_experiment` agree.

pub mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::*;
pub use report::{emit_report, read_report_csv, ReportRow};

use crate::accountant::{
    calibrate_sigma_with, compose_and_convert, delta_default, AccountantLedger, LedgerEvent, PrivacySpec,
};
use crate::dataio::{load_dataset, save_dataset, Dataset, SplitPart};
use crate::embeddings::{median_heuristic, RffMap};
use crate::error::{invalid, Error, Result};
use crate::fidelity::{
    fit_gaussian, frechet_distance, inception_score_proxy, precision_recall, FeatureExtractor, PrThreshold,
};
use crate::rng::SeededRng;
use crate::synthesizers::diffusion::{
    dpdmlite_train, generate_diffusion, pretrain, DenoiserLayout, DiffusionModel, NoiseSchedule, PretrainConfig,
};
use crate::synthesizers::dpfeta::{dpfeta_train, CentralPhase};
use crate::synthesizers::dpmerf::{dpmerf_train, GeneratorLayout, MerfGenerator};
use crate::synthesizers::pe::{pe_synthesize_groups, GaussianJitterApi, PeConfig};
use crate::synthesizers::privimage::privimage_select;
use crate::synthesizers::{dpsgd_sigma, single_release_sigma, Sensitive};
use crate::tinynn::{forward, DpSgdConfig, MlpSpec, ModelCheckpoint, OutputHead};
use crate::utility::{evaluate_protocols, fit_classifier, ClassifierTraining, ProtocolConfig, UtilityResult};

pub const CONFIG_FILE: &str = "config.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "log.txt";
pub const ERROR_FILE: &str = "ERROR";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SYNTHETIC_DIR: &str = "synthetic";
pub const CACHE_DIR: &str = "cache";

/// Public rows fed to the bandwidth heuristic.
pub const BANDWIDTH_SUBSET: usize = 500;

const MODEL_STEM: &str = "model";
const PRETRAINED_STEM: &str = "pretrained";
const QUERY_STEM: &str = "query";
const PE_CANDIDATES: &str = "pe_candidates";
const STREAM_MAP: u64 = 0x3a90;
const STREAM_EVAL_MAP: u64 = 0x3a91;
const STREAM_EVAL_CLF: u64 = 0x3a92;

/// Short hash of the config snapshot and seed.
pub fn run_id(cfg: &ExperimentConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(cfg.snapshot()?.as_bytes());
    h.update(cfg.seed.to_le_bytes());
    Ok(hex::encode(&h.finalize()[..6]))
}

fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

/// Paths of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(exp_dir: impl AsRef<Path>, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            root: exp_dir.as_ref().join(run_id(cfg)?),
        })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn ledger(&self) -> PathBuf {
        self.root.join(LEDGER_FILE)
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }
    pub fn log_path(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }
    pub fn error_marker(&self) -> PathBuf {
        self.root.join(ERROR_FILE)
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }
    pub fn synthetic(&self) -> PathBuf {
        self.root.join(SYNTHETIC_DIR)
    }

    pub fn log(&self, line: &str) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.log_path())?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn read_ledger(&self) -> Result<AccountantLedger> {
        AccountantLedger::from_json(&fs::read_to_string(self.ledger())?)
    }

    pub fn read_metrics(&self) -> Result<Metrics> {
        Metrics::parse(&fs::read_to_string(self.metrics())?)
    }
}

/// Everything a run writes to `metrics.json`. Wall-clock time is kept out so
/// reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub epsilon_target: Epsilon,
    #[serde(with = "crate::serde_float")]
    pub epsilon_spent: f64,
    pub delta: f64,
    pub ledger_events: usize,
    pub extractor: String,
    pub covariance_regularized: bool,
    pub fid: f64,
    pub is_proxy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Not computed; kept so downstream readers see a stable schema.
    pub fld: Option<f64>,
    pub image_reward: Option<f64>,
    pub utility: BTreeMap<String, UtilityResult>,
}

impl Metrics {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("metrics schema: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub dir: RunDir,
    pub config_snapshot: String,
    pub ledger: AccountantLedger,
    pub metrics: Metrics,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<PathBuf>,
}

/// Loaded inputs shared by the stages.
struct Inputs {
    sensitive: Dataset,
    train: Dataset,
    public: Option<Dataset>,
    delta: f64,
}

fn load_inputs(cfg: &ExperimentConfig, base: &Path) -> Result<Inputs> {
    let sensitive = cfg.data.load_sensitive(base, cfg.seed)?;
    let train = sensitive.part(SplitPart::Train);
    if train.is_empty() {
        return invalid("sensitive training split is empty");
    }
    let public = cfg.data.load_public(base)?;
    if let Some(p) = &public {
        if p.dims() != sensitive.dims() {
            return invalid("public and sensitive images differ in shape");
        }
    }
    let delta = match cfg.privacy.delta {
        Delta::Auto => delta_default(train.len())?,
        Delta::Value(d) => d,
    };
    Ok(Inputs {
        sensitive,
        train,
        public,
        delta,
    })
}

fn target(cfg: &ExperimentConfig, delta: f64) -> Result<Option<PrivacySpec>> {
    if cfg.privacy.epsilon.is_infinite() {
        Ok(None)
    } else {
        PrivacySpec::new(cfg.privacy.epsilon.0, delta).map(Some)
    }
}

fn scaled(target: Option<PrivacySpec>, fraction: f64) -> Option<PrivacySpec> {
    target.map(|t| PrivacySpec {
        epsilon: t.epsilon * fraction,
        delta: t.delta,
    })
}

/// Spent ε of the ledger; errors when it exceeds a finite target.
pub fn budget_guard(ledger: &AccountantLedger, epsilon: Epsilon, delta: f64) -> Result<f64> {
    let spent = compose_and_convert(ledger, delta)?;
    if !epsilon.is_infinite() && spent > epsilon.0 {
        return Err(Error::Budget {
            spent,
            target: epsilon.0,
        });
    }
    Ok(spent)
}

/// Default kernel bandwidth: mean distance of two uniform points in `[0,1]^d`.
pub fn reference_bandwidth(d: usize) -> f64 {
    (d as f64 / 6.0).sqrt()
}

/// Median heuristic on the public data when there is any, else [`reference_bandwidth`].
/// The sensitive data is never looked at.
pub fn default_bandwidth(public: Option<&Dataset>, d: usize) -> Result<f64> {
    match public {
        Some(p) if p.feature_dim() == d && p.len() >= 2 => median_heuristic(&p.rows(), BANDWIDTH_SUBSET),
        _ => Ok(reference_bandwidth(d)),
    }
}

fn classifier_spec(c: &ClassifierSection, d: usize, k: usize) -> Result<ClassifierTraining> {
    let mut sizes = vec![d];
    sizes.extend(&c.hidden);
    sizes.push(k);
    Ok(ClassifierTraining {
        spec: MlpSpec::new(sizes, c.activation, OutputHead::Softmax)?,
        epochs: c.epochs,
        lr: c.lr,
        batch_size: c.batch_size,
    })
}

fn last_snapshot(train: &Dataset, training: &ClassifierTraining, seed: u64) -> Result<ModelCheckpoint> {
    let mut snaps = fit_classifier(train, training, training.epochs, seed)?;
    Ok(snaps.pop().expect("final epoch snapshot").ckpt)
}

fn denoiser_layout(d: &DiffusionSection, data_dim: usize, k: usize) -> DenoiserLayout {
    DenoiserLayout {
        data_dim,
        num_classes: k,
        time_dim: d.time_dim,
        hidden: d.hidden.clone(),
        activation: d.activation,
    }
}

fn pretrain_config(p: &PretrainSection) -> PretrainConfig {
    PretrainConfig {
        steps: p.steps,
        batch_size: p.batch_size,
        lr: p.lr,
        mode: p.mode,
    }
}

/// Creates the run directory, writes the config snapshot and checks that
/// the data loads.
pub fn prepare(cfg: &ExperimentConfig, base: &Path, exp_dir: &Path) -> Result<RunDir> {
    cfg.validate()?;
    let dir = RunDir::new(exp_dir, cfg)?;
    fs::create_dir_all(dir.checkpoints())?;
    let _ = fs::remove_file(dir.error_marker());
    fs::write(dir.config(), cfg.snapshot()?)?;
    let inputs = load_inputs(cfg, base)?;
    dir.log(&format!(
        "prepare: method={} n_train={} n_val={} n_test={} delta={:e} delta_rule={}",
        cfg.method.id(),
        inputs.train.len(),
        inputs.sensitive.split().n_val(),
        inputs.sensitive.split().n_test(),
        inputs.delta,
        match cfg.privacy.delta {
            Delta::Auto => "1/(N ln N)",
            Delta::Value(_) => "given",
        }
    ))?;
    Ok(dir)
}

fn cached_checkpoint(
    exp_dir: &Path,
    key: &str,
    stem: &str,
    build: impl FnOnce() -> Result<ModelCheckpoint>,
) -> Result<(ModelCheckpoint, bool)> {
    let dir = exp_dir.join(CACHE_DIR).join(key);
    if dir.join(format!("{stem}.json")).exists() {
        return Ok((ModelCheckpoint::load(&dir, stem)?, true));
    }
    let ckpt = build()?;
    ckpt.save(&dir, stem)?;
    Ok((ModelCheckpoint::load(&dir, stem)?, false))
}

/// Non-private warm starts on public data, cached under `<exp>/cache/` by
/// a hash of their inputs so ε sweeps reuse them.
pub fn pretrain_stage(cfg: &ExperimentConfig, base: &Path, exp_dir: &Path) -> Result<RunDir> {
    let dir = RunDir::new(exp_dir, cfg)?;
    let inputs = load_inputs(cfg, base)?;
    let d = inputs.sensitive.feature_dim();
    let k = inputs.sensitive.num_classes();
    if let (Some(diff), Some(public)) = (cfg.method.diffusion(), &inputs.public) {
        if let Some(pre) = &diff.public_pretrain {
            let layout = denoiser_layout(diff, d, k);
            let key = short_hash(&[
                "denoiser",
                &serde_json::to_string(&cfg.data.public)?,
                &serde_json::to_string(&layout)?,
                &diff.timesteps.to_string(),
                &serde_json::to_string(pre)?,
                &cfg.seed.to_string(),
            ]);
            let (ckpt, hit) = cached_checkpoint(exp_dir, &key, PRETRAINED_STEM, || {
                let init = DiffusionModel::init(layout, NoiseSchedule::scaled_default(diff.timesteps)?, cfg.seed)?;
                pretrain(init, public, &pretrain_config(pre), cfg.seed)?.0.to_checkpoint()
            })?;
            ckpt.save(dir.checkpoints(), PRETRAINED_STEM)?;
            dir.log(&format!("pretrain: denoiser cache={key} hit={hit}"))?;
        }
    }
    if let (MethodConfig::PrivImage { selection, .. }, Some(public)) = (&cfg.method, &inputs.public) {
        let training = classifier_spec(&selection.query_classifier, d, public.num_classes())?;
        let key = short_hash(&[
            "query",
            &serde_json::to_string(&cfg.data.public)?,
            &serde_json::to_string(&selection.query_classifier)?,
            &cfg.seed.to_string(),
        ]);
        let (ckpt, hit) = cached_checkpoint(exp_dir, &key, QUERY_STEM, || last_snapshot(public, &training, cfg.seed))?;
        ckpt.save(dir.checkpoints(), QUERY_STEM)?;
        dir.log(&format!("pretrain: query classifier cache={key} hit={hit}"))?;
    }
    Ok(dir)
}

fn initial_denoiser(dir: &RunDir, diff: &DiffusionSection, d: usize, k: usize, seed: u64) -> Result<DiffusionModel> {
    if dir.checkpoints().join(format!("{PRETRAINED_STEM}.json")).exists() {
        let model = DiffusionModel::from_checkpoint(ModelCheckpoint::load(dir.checkpoints(), PRETRAINED_STEM)?)?;
        if model.layout != denoiser_layout(diff, d, k) || model.schedule.steps() != diff.timesteps {
            return invalid("pretrained denoiser does not match the method config");
        }
        return Ok(model);
    }
    DiffusionModel::init(denoiser_layout(diff, d, k), NoiseSchedule::scaled_default(diff.timesteps)?, seed)
}

fn dpsgd_config(diff: &DiffusionSection, n_train: usize, sigma: f64) -> DpSgdConfig {
    DpSgdConfig {
        clip: diff.clip,
        sigma,
        q: (diff.batch_size as f64 / n_train as f64).min(1.0),
        lr: diff.lr,
        steps: diff.steps,
        optimizer: diff.optimizer,
    }
}

fn resolve(override_sigma: Option<f64>, calibrate: impl FnOnce() -> Result<f64>) -> Result<f64> {
    match override_sigma {
        Some(s) => Ok(s),
        None => calibrate(),
    }
}

/// Private training. Writes the model (or PE candidates) and `ledger.json`,
/// then refuses to continue if the ledger overspends.
pub fn train_stage(cfg: &ExperimentConfig, base: &Path, exp_dir: &Path) -> Result<AccountantLedger> {
    let dir = RunDir::new(exp_dir, cfg)?;
    fs::create_dir_all(dir.checkpoints())?;
    let inputs = load_inputs(cfg, base)?;
    let target = target(cfg, inputs.delta)?;
    let sensitive = Sensitive::new(&inputs.train);
    let (d, k, n) = (inputs.train.feature_dim(), inputs.train.num_classes(), inputs.train.len());
    let mut ledger = AccountantLedger::new();
    let seed = cfg.seed;
    match &cfg.method {
        MethodConfig::DpMerf(m) => {
            let bw = match m.bandwidth {
                Some(b) => b,
                None => default_bandwidth(inputs.public.as_ref(), d)?,
            };
            let map = RffMap::new(d, m.rff_dim, bw, &mut SeededRng::new(seed, STREAM_MAP))?;
            let sigma = resolve(m.sigma, || single_release_sigma(target))?;
            let layout = GeneratorLayout {
                latent_dim: m.latent_dim,
                data_dim: d,
                num_classes: k,
                hidden: m.hidden.clone(),
                activation: m.activation,
            };
            let out = dpmerf_train(&sensitive, &map, sigma, &layout, &m.train.resolve(), &mut ledger, seed)?;
            out.generator.to_checkpoint()?.save(dir.checkpoints(), MODEL_STEM)?;
            let first = out.objective.first().map_or(f64::NAN, |o| o.1);
            let last = out.objective.last().map_or(f64::NAN, |o| o.1);
            dir.log(&format!("train: dp-merf sigma={sigma} bandwidth={bw} objective {first:e} -> {last:e}"))?;
        }
        MethodConfig::DpdmLite { diffusion } => {
            let init = initial_denoiser(&dir, diffusion, d, k, seed)?;
            let probe = dpsgd_config(diffusion, n, 0.0);
            let sigma = resolve(diffusion.sigma, || dpsgd_sigma(&ledger, target, probe.q, probe.steps))?;
            let (model, report) =
                dpdmlite_train(&sensitive, init, &dpsgd_config(diffusion, n, sigma), diffusion.k_mult, &mut ledger, seed)?;
            model.to_checkpoint()?.save(dir.checkpoints(), MODEL_STEM)?;
            dir.log(&format!("train: dpdm-lite sigma={sigma} q={} steps={}", probe.q, report.losses.len()))?;
        }
        MethodConfig::DpFeta { diffusion, central } => {
            let init = initial_denoiser(&dir, diffusion, d, k, seed)?;
            let phase = if central.budget_fraction > 0.0 || central.sigma.is_some() {
                let sigma_c = resolve(central.sigma, || single_release_sigma(scaled(target, central.budget_fraction)))?;
                Some(CentralPhase {
                    n_central: central.n_central,
                    pixel_clip: central.pixel_clip,
                    sigma: sigma_c,
                    pretrain: pretrain_config(&central.pretrain),
                })
            } else {
                None
            };
            let mut prefix = AccountantLedger::new();
            if let Some(p) = &phase {
                prefix.push(LedgerEvent::Gaussian { sigma: p.sigma, releases: 1 })?;
            }
            let probe = dpsgd_config(diffusion, n, 0.0);
            let sigma = resolve(diffusion.sigma, || dpsgd_sigma(&prefix, target, probe.q, probe.steps))?;
            let out = dpfeta_train(
                &sensitive,
                init,
                phase.as_ref(),
                &dpsgd_config(diffusion, n, sigma),
                diffusion.k_mult,
                &mut ledger,
                seed,
            )?;
            out.model.to_checkpoint()?.save(dir.checkpoints(), MODEL_STEM)?;
            dir.log(&format!(
                "train: dp-feta central_sigma={:?} sigma={sigma} q={}",
                phase.map(|p| p.sigma),
                probe.q
            ))?;
        }
        MethodConfig::PrivImage { diffusion, selection } => {
            let public = inputs.public.as_ref().expect("validated");
            let query_path = dir.checkpoints().join(format!("{QUERY_STEM}.json"));
            let query = if query_path.exists() {
                ModelCheckpoint::load(dir.checkpoints(), QUERY_STEM)?
            } else {
                let training = classifier_spec(&selection.query_classifier, d, public.num_classes())?;
                last_snapshot(public, &training, seed)?
            };
            let sigma_sel = resolve(selection.sigma, || single_release_sigma(scaled(target, selection.budget_fraction)))?;
            let chosen = privimage_select(public, &sensitive, &query, selection.k_frac, sigma_sel, &mut ledger, seed)?;
            let init = initial_denoiser(&dir, diffusion, d, k, seed)?;
            let (warm, _) = pretrain(init, &chosen.subset, &pretrain_config(&selection.pretrain), seed)?;
            let probe = dpsgd_config(diffusion, n, 0.0);
            let sigma = resolve(diffusion.sigma, || dpsgd_sigma(&ledger, target, probe.q, probe.steps))?;
            let (model, _) =
                dpdmlite_train(&sensitive, warm, &dpsgd_config(diffusion, n, sigma), diffusion.k_mult, &mut ledger, seed)?;
            model.to_checkpoint()?.save(dir.checkpoints(), MODEL_STEM)?;
            dir.log(&format!(
                "train: privimage classes={:?} subset={} sigma_sel={sigma_sel} sigma={sigma}",
                chosen.classes,
                chosen.subset.len()
            ))?;
        }
        MethodConfig::Pe(p) => {
            let sigma = resolve(p.sigma, || match target {
                None => Ok(0.0),
                Some(t) => calibrate_sigma_with(&AccountantLedger::new(), t, |sigma| LedgerEvent::Gaussian {
                    sigma,
                    releases: p.iterations as u64,
                }),
            })?;
            let pe_cfg = PeConfig {
                n_candidates: p.n_candidates,
                iterations: p.iterations,
                sigma_hist: sigma,
                threshold: p.threshold,
            };
            let api = GaussianJitterApi::unit_box(d, p.jitter, p.decay);
            let fetch = || {
                let data = sensitive.release();
                let mut groups = vec![Vec::new(); k];
                for i in 0..data.len() {
                    groups[data.label(i)].push(data.image_f64(i));
                }
                groups
            };
            let (sets, rounds) = pe_synthesize_groups(k, fetch, &api, &pe_cfg, &mut ledger, seed, |_, _| {})?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (c, set) in sets.iter().enumerate() {
                rows.extend(set.iter().cloned());
                labels.extend(std::iter::repeat_n(c as u32, set.len()));
            }
            save_dataset(
                &Dataset::from_rows(&rows, inputs.train.dims(), labels, k)?,
                dir.checkpoints().join(PE_CANDIDATES),
            )?;
            let fallbacks = rounds.iter().filter(|r| r.fallback).count();
            dir.log(&format!("train: pe sigma_hist={sigma} threshold={} fallbacks={fallbacks}", pe_cfg.threshold()))?;
        }
    }
    let touches = sensitive.touches();
    fs::write(dir.ledger(), serde_json::to_string_pretty(&ledger)?)?;
    let spent = budget_guard(&ledger, cfg.privacy.epsilon, inputs.delta)?;
    if let Some(d) = cfg.method.diffusion() {
        dir.log(&format!("train: dp-sgd optimizer={:?} noise scaled by realized batch size", d.optimizer))?;
    }
    dir.log(&format!("train: ledger events={} releases={touches} epsilon={spent}", ledger.len()))?;
    Ok(ledger)
}

/// Balanced labels `i mod K`.
fn synthetic_labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

/// Generates `eval.n_synthetic` labeled samples from the saved model.
pub fn synth_stage(cfg: &ExperimentConfig, base: &Path, exp_dir: &Path) -> Result<Dataset> {
    let dir = RunDir::new(exp_dir, cfg)?;
    let inputs = load_inputs(cfg, base)?;
    let k = inputs.sensitive.num_classes();
    let labels = synthetic_labels(cfg.eval.n_synthetic, k);
    let rows = match &cfg.method {
        MethodConfig::DpMerf(_) => {
            MerfGenerator::from_checkpoint(ModelCheckpoint::load(dir.checkpoints(), MODEL_STEM)?)?.sample(&labels, cfg.seed)?
        }
        MethodConfig::Pe(_) => {
            let cands = load_dataset(dir.checkpoints().join(PE_CANDIDATES))?;
            let mut by_class = vec![Vec::new(); k];
            for i in 0..cands.len() {
                by_class[cands.label(i)].push(i);
            }
            labels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let pool = &by_class[c];
                    if pool.is_empty() {
                        return invalid(format!("no PE candidates for class {c}"));
                    }
                    Ok(cands.image_f64(pool[(i / k) % pool.len()]))
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            let model = DiffusionModel::from_checkpoint(ModelCheckpoint::load(dir.checkpoints(), MODEL_STEM)?)?;
            let cond: Vec<Option<usize>> = labels.iter().map(|&c| Some(c)).collect();
            generate_diffusion(&model, &cond, cfg.seed)?
        }
    };
    let syn = Dataset::from_rows(
        &rows,
        inputs.sensitive.dims(),
        labels.iter().map(|&c| c as u32).collect(),
        k,
    )?;
    save_dataset(&syn, dir.synthetic())?;
    dir.log(&format!("synth: {} samples", syn.len()))?;
    Ok(syn)
}

/// Fidelity against the sensitive test split plus downstream utility.
/// Checks the ledger against the target before anything is written.
pub fn eval_stage(cfg: &ExperimentConfig, base: &Path, exp_dir: &Path) -> Result<Metrics> {
    let dir = RunDir::new(exp_dir, cfg)?;
    let inputs = load_inputs(cfg, base)?;
    let ledger = dir.read_ledger()?;
    let spent = budget_guard(&ledger, cfg.privacy.epsilon, inputs.delta)?;
    let syn = load_dataset(dir.synthetic())?;
    if syn.dims() != inputs.sensitive.dims() || syn.num_classes() != inputs.sensitive.num_classes() {
        return invalid("synthetic data does not match the sensitive data");
    }
    let (d, k) = (inputs.sensitive.feature_dim(), inputs.sensitive.num_classes());
    let test = inputs.sensitive.part(SplitPart::Test);
    let eval_training = classifier_spec(&cfg.eval.eval_classifier, d, k)?;
    let eval_clf = last_snapshot(&inputs.train, &eval_training, cfg.seed ^ STREAM_EVAL_CLF)?;
    let extractor = match cfg.eval.extractor {
        ExtractorKind::RawPixels => FeatureExtractor::RawPixels,
        ExtractorKind::Rff => FeatureExtractor::Rff(RffMap::new(
            d,
            cfg.eval.rff_dim,
            reference_bandwidth(d),
            &mut SeededRng::new(cfg.seed, STREAM_EVAL_MAP),
        )?),
        ExtractorKind::ClassifierPenultimate => FeatureExtractor::ClassifierPenultimate(eval_clf.clone()),
    };
    let syn_rows = syn.rows();
    let real_f = extractor.extract(&test.rows())?;
    let syn_f = extractor.extract(&syn_rows)?;
    let (fa, fb) = (fit_gaussian(&real_f)?, fit_gaussian(&syn_f)?);
    let fid = frechet_distance(&fa, &fb)?;
    let probs = syn_rows.iter().map(|r| forward(&eval_clf, r)).collect::<Result<Vec<_>>>()?;
    let is_proxy = inception_score_proxy(&probs)?;
    let (precision, recall) = precision_recall(&real_f, &syn_f, PrThreshold::KnnRadius { k: cfg.eval.pr_k })?;
    let training = classifier_spec(&cfg.eval.classifier, d, k)?;
    let template = ProtocolConfig {
        protocol: crate::utility::Protocol::Testfix,
        eps_val: cfg.eval.eps_val.0,
        fixed_epochs: cfg.eval.fixed_epochs.unwrap_or(training.epochs),
        checkpoint_stride: 1,
    };
    let results = evaluate_protocols(&syn, &inputs.sensitive, &training, &template, &cfg.eval.protocols, spent, cfg.seed)?;
    let metrics = Metrics {
        run_id: run_id(cfg)?,
        method: cfg.method.id().to_string(),
        seed: cfg.seed,
        epsilon_target: cfg.privacy.epsilon,
        epsilon_spent: spent,
        delta: inputs.delta,
        ledger_events: ledger.len(),
        extractor: extractor.descriptor(),
        covariance_regularized: fa.regularized || fb.regularized,
        fid,
        is_proxy,
        precision,
        recall,
        fld: None,
        image_reward: None,
        utility: results.into_iter().map(|r| (r.protocol.name().to_string(), r)).collect(),
    };
    fs::write(dir.metrics(), serde_json::to_string_pretty(&metrics)? + "\n")?;
    dir.log(&format!("eval: fid={fid:.6} is_proxy={is_proxy:.6} precision={precision} recall={recall}"))?;
    Ok(metrics)
}

/// Runs `stage`, leaving an `ERROR` marker in the run directory if it fails.
pub fn with_marker<T>(cfg: &ExperimentConfig, exp_dir: &Path, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let out = f();
    if let Err(e) = &out {
        if let Ok(dir) = RunDir::new(exp_dir, cfg) {
            if fs::create_dir_all(&dir.root).is_ok() {
                let _ = fs::write(dir.error_marker(), format!("{stage}: {e}\n"));
                let _ = dir.log(&format!("{stage}: error: {e}"));
            }
        }
    }
    out
}

/// All stages in order.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, exp_dir: &Path) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let dir = with_marker(cfg, exp_dir, "prepare", || prepare(cfg, base, exp_dir))?;
    with_marker(cfg, exp_dir, "pretrain", || pretrain_stage(cfg, base, exp_dir))?;
    let ledger = with_marker(cfg, exp_dir, "train", || train_stage(cfg, base, exp_dir))?;
    with_marker(cfg, exp_dir, "synth", || synth_stage(cfg, base, exp_dir))?;
    let metrics = with_marker(cfg, exp_dir, "eval", || eval_stage(cfg, base, exp_dir))?;
    let wall = start.elapsed().as_secs_f64();
    dir.log(&format!("done in {wall:.2}s"))?;
    Ok(ExperimentRecord {
        run_id: metrics.run_id.clone(),
        config_snapshot: cfg.snapshot()?,
        artifacts: vec![
            dir.config(),
            dir.ledger(),
            dir.checkpoints(),
            dir.synthetic(),
            dir.metrics(),
            dir.log_path(),
        ],
        dir,
        ledger,
        metrics,
        wall_clock_secs: wall,
    })
}
