//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataio::{load_dataset, split_dataset, three_gaussians, toy_digits, toy_public, Dataset, FIXTURE_SPLIT};
use crate::embeddings::NeighborNotion;
use crate::error::{invalid, Result};
use crate::fidelity::DEFAULT_PR_K;
use crate::synthesizers::diffusion::{LabelMode, DEFAULT_K_MULT};
use crate::synthesizers::dpmerf::MerfConfig;
use crate::synthesizers::pe::DEFAULT_PE_ITERATIONS;
use crate::synthesizers::privimage::DEFAULT_K_FRAC;
use crate::tinynn::{Activation, DpOptimizer};
use crate::utility::Protocol;

/// Share of ε given to the auxiliary release in two-phase methods.
pub const DEFAULT_AUX_FRACTION: f64 = 0.1;

/// A finite ε, or `"inf"` for no privacy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epsilon(pub f64);

impl Epsilon {
    pub fn is_infinite(self) -> bool {
        self.0 == f64::INFINITY
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Num(f64),
    Text(String),
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrText::deserialize(d)? {
            NumOrText::Num(v) => Ok(Epsilon(v)),
            NumOrText::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "∞") => Ok(Epsilon(f64::INFINITY)),
            NumOrText::Text(t) => Err(serde::de::Error::custom(format!("bad epsilon {t:?}"))),
        }
    }
}

/// `"auto"` resolves to `1 / (N ln N)` over the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delta {
    Auto,
    Value(f64),
}

impl Serialize for Delta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Delta::Auto => s.serialize_str("auto"),
            Delta::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Delta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrText::deserialize(d)? {
            NumOrText::Num(v) => Ok(Delta::Value(v)),
            NumOrText::Text(t) if t == "auto" => Ok(Delta::Auto),
            NumOrText::Text(t) => Err(serde::de::Error::custom(format!("bad delta {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyTarget {
    pub epsilon: Epsilon,
    #[serde(default = "auto_delta")]
    pub delta: Delta,
}

fn auto_delta() -> Delta {
    Delta::Auto
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureName {
    ToyDigits,
    ToyPublic,
    ThreeGaussians,
}

/// Where a dataset comes from: a directory written by `save_dataset`, or a
/// generated fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Dir { dir: PathBuf },
    Fixture { fixture: FixtureName, n: usize, #[serde(default)] seed: u64 },
}

impl DataSource {
    /// Loads the data; relative directories resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSource::Dir { dir } => load_dataset(if dir.is_absolute() { dir.clone() } else { base.join(dir) }),
            DataSource::Fixture { fixture, n, seed } => Ok(match fixture {
                FixtureName::ToyDigits => toy_digits(*n, *seed),
                FixtureName::ToyPublic => toy_public(*n, *seed),
                FixtureName::ThreeGaussians => three_gaussians(*n, *seed),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub sensitive: DataSource,
    #[serde(default)]
    pub public: Option<DataSource>,
    /// Applied when the sensitive data carries no split of its own.
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub stratified: bool,
}

fn default_split() -> (f64, f64, f64) {
    FIXTURE_SPLIT
}

impl DataSection {
    pub fn load_sensitive(&self, base: &Path, seed: u64) -> Result<Dataset> {
        let ds = self.sensitive.load(base)?;
        let s = ds.split();
        if s.n_train() + s.n_val() + s.n_test() == 0 {
            split_dataset(&ds, self.split, seed, self.stratified)
        } else {
            Ok(ds)
        }
    }

    pub fn load_public(&self, base: &Path) -> Result<Option<Dataset>> {
        self.public.as_ref().map(|p| p.load(base)).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MerfSection {
    /// Overrides calibration when set.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub rff_dim: usize,
    /// `None` uses the median heuristic on public data, or `sqrt(d / 6)` without it.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default)]
    pub train: MerfConfigPatch,
}

/// Optional overrides of [`MerfConfig`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MerfConfigPatch {
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub batch_per_class: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub notion: Option<NeighborNotion>,
    #[serde(default)]
    pub eval_per_class: Option<usize>,
    #[serde(default)]
    pub eval_every: Option<usize>,
}

impl MerfConfigPatch {
    pub fn resolve(&self) -> MerfConfig {
        let d = MerfConfig::default();
        MerfConfig {
            iters: self.iters.unwrap_or(d.iters),
            batch_per_class: self.batch_per_class.unwrap_or(d.batch_per_class),
            lr: self.lr.unwrap_or(d.lr),
            notion: self.notion.unwrap_or(d.notion),
            eval_per_class: self.eval_per_class.unwrap_or(d.eval_per_class),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
        }
    }
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: LabelMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    /// Overrides the calibrated DP-SGD noise multiplier.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub timesteps: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default = "default_k_mult")]
    pub k_mult: usize,
    pub clip: f64,
    /// Expected batch size; the sampling rate is this over the training size.
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    #[serde(default)]
    pub optimizer: DpOptimizer,
    /// Non-private warm start on the public data.
    #[serde(default)]
    pub public_pretrain: Option<PretrainSection>,
}

fn default_k_mult() -> usize {
    DEFAULT_K_MULT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeSection {
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Candidates per class.
    pub n_candidates: usize,
    #[serde(default = "default_pe_iters")]
    pub iterations: usize,
    #[serde(default)]
    pub threshold: Option<f64>,
    pub jitter: f64,
    pub decay: f64,
}

fn default_pe_iters() -> usize {
    DEFAULT_PE_ITERATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralSection {
    pub n_central: usize,
    pub pixel_clip: f64,
    #[serde(default = "default_aux")]
    pub budget_fraction: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
    pub pretrain: PretrainSection,
}

fn default_aux() -> f64 {
    DEFAULT_AUX_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    #[serde(default = "default_k_frac")]
    pub k_frac: f64,
    #[serde(default = "default_aux")]
    pub budget_fraction: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
    pub query_classifier: ClassifierSection,
    pub pretrain: PretrainSection,
}

fn default_k_frac() -> f64 {
    DEFAULT_K_FRAC
}

/// Method id plus its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id")]
pub enum MethodConfig {
    #[serde(rename = "dp-merf")]
    DpMerf(MerfSection),
    #[serde(rename = "dpdm-lite")]
    DpdmLite { diffusion: DiffusionSection },
    #[serde(rename = "pe")]
    Pe(PeSection),
    #[serde(rename = "dp-feta")]
    DpFeta { diffusion: DiffusionSection, central: CentralSection },
    #[serde(rename = "privimage")]
    PrivImage { diffusion: DiffusionSection, selection: SelectionSection },
}

impl MethodConfig {
    pub const IDS: [&'static str; 5] = ["dp-merf", "dpdm-lite", "pe", "dp-feta", "privimage"];

    pub fn id(&self) -> &'static str {
        match self {
            MethodConfig::DpMerf(_) => "dp-merf",
            MethodConfig::DpdmLite { .. } => "dpdm-lite",
            MethodConfig::Pe(_) => "pe",
            MethodConfig::DpFeta { .. } => "dp-feta",
            MethodConfig::PrivImage { .. } => "privimage",
        }
    }

    pub fn diffusion(&self) -> Option<&DiffusionSection> {
        match self {
            MethodConfig::DpdmLite { diffusion }
            | MethodConfig::DpFeta { diffusion, .. }
            | MethodConfig::PrivImage { diffusion, .. } => Some(diffusion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    RawPixels,
    Rff,
    ClassifierPenultimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Synthetic samples to generate, spread evenly over the classes.
    pub n_synthetic: usize,
    #[serde(default = "raw")]
    pub extractor: ExtractorKind,
    #[serde(default = "default_rff_eval")]
    pub rff_dim: usize,
    #[serde(default = "default_pr_k")]
    pub pr_k: usize,
    /// Classifier for the IS proxy and penultimate features; trained on the sensitive training split.
    pub eval_classifier: ClassifierSection,
    /// Downstream classifier trained on synthetic data.
    pub classifier: ClassifierSection,
    #[serde(default = "all_protocols")]
    pub protocols: Vec<Protocol>,
    #[serde(default = "one")]
    pub eps_val: Epsilon,
    /// Snapshot used by `testfix`; defaults to the last epoch.
    #[serde(default)]
    pub fixed_epochs: Option<usize>,
}

fn raw() -> ExtractorKind {
    ExtractorKind::RawPixels
}

fn default_rff_eval() -> usize {
    256
}

fn default_pr_k() -> usize {
    DEFAULT_PR_K
}

fn all_protocols() -> Vec<Protocol> {
    Protocol::ALL.to_vec()
}

fn one() -> Epsilon {
    Epsilon(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub method: MethodConfig,
    pub privacy: PrivacyTarget,
    pub eval: EvalSection,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical JSON of the resolved configuration.
    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.privacy.epsilon.0;
        if !(eps > 0.0) {
            return invalid(format!("epsilon {eps} must be > 0"));
        }
        if let Delta::Value(d) = self.privacy.delta {
            if !(d > 0.0 && d < 1.0) {
                return invalid(format!("delta {d} must lie in (0,1)"));
            }
        }
        let (a, b, c) = self.data.split;
        if [a, b, c].iter().any(|f| !(*f >= 0.0)) || a + b + c > 1.0 + 1e-9 {
            return invalid("split fractions must be >= 0 and sum to at most 1");
        }
        if self.eval.n_synthetic == 0 {
            return invalid("eval.n_synthetic must be >= 1");
        }
        if !(self.eval.eps_val.0 > 0.0) {
            return invalid("eval.eps_val must be > 0");
        }
        for f in [&self.eval.classifier, &self.eval.eval_classifier] {
            if f.epochs == 0 || f.batch_size == 0 || !(f.lr > 0.0) {
                return invalid("classifier needs epochs, batch size and lr > 0");
            }
        }
        let sigma_ok = |s: Option<f64>| s.is_none_or(|v| v >= 0.0 && v.is_finite());
        match &self.method {
            MethodConfig::DpMerf(m) => {
                if m.rff_dim == 0 || m.latent_dim == 0 || !sigma_ok(m.sigma) {
                    return invalid("dp-merf needs rff_dim, latent_dim >= 1 and sigma >= 0");
                }
            }
            MethodConfig::Pe(p) => {
                if p.n_candidates == 0 || p.iterations == 0 || !sigma_ok(p.sigma) {
                    return invalid("pe needs candidates, iterations >= 1 and sigma >= 0");
                }
            }
            MethodConfig::DpdmLite { .. } | MethodConfig::DpFeta { .. } | MethodConfig::PrivImage { .. } => {}
        }
        if let Some(d) = self.method.diffusion() {
            if d.timesteps == 0 || d.k_mult == 0 || d.batch_size == 0 || d.steps == 0 || !sigma_ok(d.sigma) {
                return invalid("diffusion needs timesteps, k_mult, batch_size, steps >= 1 and sigma >= 0");
            }
            if !(d.clip > 0.0 && d.lr > 0.0) {
                return invalid("diffusion needs clip and lr > 0");
            }
        }
        match &self.method {
            MethodConfig::DpFeta { central, .. } => {
                if !(0.0..1.0).contains(&central.budget_fraction) || !sigma_ok(central.sigma) {
                    return invalid("central budget fraction must lie in [0,1)");
                }
            }
            MethodConfig::PrivImage { selection, .. } => {
                if !(selection.budget_fraction > 0.0 && selection.budget_fraction < 1.0) || !sigma_ok(selection.sigma) {
                    return invalid("selection budget fraction must lie in (0,1)");
                }
                if !(selection.k_frac > 0.0 && selection.k_frac <= 1.0) {
                    return invalid("k_frac must lie in (0,1]");
                }
                if self.data.public.is_none() {
                    return invalid("privimage needs public data");
                }
            }
            MethodConfig::DpdmLite { diffusion } if diffusion.public_pretrain.is_some() && self.data.public.is_none() => {
                return invalid("public pretraining needs public data");
            }
            _ => {}
        }
        Ok(())
    }
}
