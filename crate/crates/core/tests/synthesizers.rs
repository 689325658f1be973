use dpsynth::accountant::{AccountantLedger, LedgerEvent};
use dpsynth::dataio::{three_gaussians, toy_digits, toy_public, Dataset};
use dpsynth::embeddings::RffMap;
use dpsynth::rng::SeededRng;
use dpsynth::synthesizers::diffusion::{
    dpdmlite_train, generate_diffusion, DenoiserLayout, DiffusionModel, LabelMode, NoiseSchedule, PretrainConfig,
};
use dpsynth::synthesizers::dpfeta::{dpfeta_central, dpfeta_train, CentralPhase};
use dpsynth::synthesizers::dpmerf::{dpmerf_train, GeneratorLayout, MerfConfig};
use dpsynth::synthesizers::pe::{pe_synthesize_groups, GaussianJitterApi, PeConfig};
use dpsynth::synthesizers::privimage::privimage_select;
use dpsynth::synthesizers::Sensitive;
use dpsynth::tinynn::{Activation, DpOptimizer, DpSgdConfig, MlpSpec, OutputHead};
use dpsynth::utility::{fit_classifier, ClassifierTraining};
use dpsynth::Error;

fn denoiser(k: usize) -> DiffusionModel {
    let layout = DenoiserLayout { data_dim: 64, num_classes: k, time_dim: 4, hidden: vec![16], activation: Activation::Relu };
    DiffusionModel::init(layout, NoiseSchedule::scaled_default(20).unwrap(), 0).unwrap()
}

fn sgd(sigma: f64, steps: u64) -> DpSgdConfig {
    DpSgdConfig { clip: 1.0, sigma, q: 0.05, lr: 1e-3, steps, optimizer: DpOptimizer::Adam }
}

#[test]
fn dpmerf_reads_private_data_once() {
    let data = three_gaussians(90, 1);
    let sensitive = Sensitive::new(&data);
    let map = RffMap::new(2, 50, 0.5, &mut SeededRng::new(0, 1)).unwrap();
    let layout = GeneratorLayout { latent_dim: 2, data_dim: 2, num_classes: 3, hidden: vec![8], activation: Activation::Tanh };
    let cfg = MerfConfig { iters: 5, batch_per_class: 8, eval_per_class: 8, eval_every: 1, ..MerfConfig::default() };
    let mut ledger = AccountantLedger::new();
    let out = dpmerf_train(&sensitive, &map, 3.0, &layout, &cfg, &mut ledger, 0).unwrap();
    assert_eq!(sensitive.touches(), 1);
    assert_eq!(ledger.events(), &[LedgerEvent::Gaussian { sigma: 3.0, releases: 1 }]);
    assert_eq!(out.objective.len(), 6);
    let samples = out.generator.sample(&[0, 1, 2], 4).unwrap();
    assert!(samples.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pe_reads_private_data_once_per_round() {
    let data = three_gaussians(60, 2);
    let sensitive = Sensitive::new(&data);
    let cfg = PeConfig { n_candidates: 10, iterations: 5, sigma_hist: 1.5, threshold: None };
    let api = GaussianJitterApi::unit_box(2, 0.1, 0.8);
    let fetch = || {
        let d = sensitive.release();
        let mut groups = vec![Vec::new(); 3];
        for i in 0..d.len() {
            groups[d.label(i)].push(d.image_f64(i));
        }
        groups
    };
    let mut ledger = AccountantLedger::new();
    let (sets, rounds) = pe_synthesize_groups(3, fetch, &api, &cfg, &mut ledger, 0, |_, _| {}).unwrap();
    assert_eq!(sensitive.touches(), 5);
    assert_eq!(rounds.len(), 5);
    assert_eq!(ledger.events(), &[LedgerEvent::Gaussian { sigma: 1.5, releases: 5 }]);
    assert!(sets.iter().all(|s| s.len() == 10));
}

#[test]
fn dpdm_ledger_ignores_multiplicity_and_counts_steps() {
    let data = toy_digits(200, 3);
    let mut seen = Vec::new();
    for k_mult in [1, 3] {
        let sensitive = Sensitive::new(&data);
        let mut ledger = AccountantLedger::new();
        let (model, report) = dpdmlite_train(&sensitive, denoiser(10), &sgd(1.1, 4), k_mult, &mut ledger, 5).unwrap();
        assert_eq!(sensitive.touches(), 4);
        assert_eq!(report.losses.len(), 4);
        assert_eq!(model.ckpt.step, 4);
        seen.push(ledger);
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[0].events(), &[LedgerEvent::SubsampledGaussian { q: 0.05, sigma: 1.1, steps: 4 }]);
}

#[test]
fn dpdm_training_is_reproducible() {
    let data = toy_digits(100, 4);
    let run = || {
        let mut ledger = AccountantLedger::new();
        dpdmlite_train(&Sensitive::new(&data), denoiser(10), &sgd(0.9, 3), 2, &mut ledger, 9).unwrap().0
    };
    let (a, b) = (run(), run());
    assert_eq!(a.ckpt.params, b.ckpt.params);
    let labels = [Some(0), Some(3)];
    assert_eq!(generate_diffusion(&a, &labels, 1).unwrap(), generate_diffusion(&b, &labels, 1).unwrap());
}

#[test]
fn feta_central_images_cost_one_release() {
    let data = toy_digits(300, 5);
    let sensitive = Sensitive::new(&data);
    let mut ledger = AccountantLedger::new();
    let central = dpfeta_central(&sensitive, 5, 8.0, 2.0, &mut ledger, 0).unwrap();
    assert_eq!(sensitive.touches(), 1);
    assert_eq!(ledger.events(), &[LedgerEvent::Gaussian { sigma: 2.0, releases: 1 }]);
    assert_eq!(central.per_class.len(), 10);
    assert!(central.counts.iter().all(|c| c.len() == 5 && c.iter().sum::<usize>() == 30));
    assert_eq!(central.to_dataset([8, 8, 1]).unwrap().len(), 50);

    let err = dpfeta_central(&sensitive, 31, 8.0, 2.0, &mut AccountantLedger::new(), 0).unwrap_err();
    assert!(matches!(err, Error::Grouping(_)), "{err}");
}

#[test]
fn feta_ledger_is_central_then_dpsgd() {
    let data = toy_digits(200, 6);
    let sensitive = Sensitive::new(&data);
    let phase = CentralPhase {
        n_central: 4,
        pixel_clip: 8.0,
        sigma: 3.0,
        pretrain: PretrainConfig { steps: 3, batch_size: 8, lr: 1e-3, mode: LabelMode::Unconditional },
    };
    let mut ledger = AccountantLedger::new();
    let out = dpfeta_train(&sensitive, denoiser(10), Some(&phase), &sgd(1.2, 2), 2, &mut ledger, 0).unwrap();
    assert_eq!(sensitive.touches(), 3);
    assert_eq!(
        ledger.events(),
        &[
            LedgerEvent::Gaussian { sigma: 3.0, releases: 1 },
            LedgerEvent::SubsampledGaussian { q: 0.05, sigma: 1.2, steps: 2 },
        ]
    );
    assert!(out.central.is_some());
    assert_eq!(out.model.ckpt.meta.get("pretrain_mode").map(String::as_str), Some("conditional"));
}

#[test]
fn privimage_keeps_top_public_classes() {
    let public = toy_public(400, 7);
    let sensitive_data: Dataset = toy_digits(200, 8);
    let spec = MlpSpec::new(vec![64, 32, 20], Activation::Relu, OutputHead::Softmax).unwrap();
    let training = ClassifierTraining { spec, epochs: 3, lr: 0.1, batch_size: 32 };
    let query = fit_classifier(&public, &training, 3, 0).unwrap().pop().unwrap().ckpt;
    let sensitive = Sensitive::new(&sensitive_data);
    let mut ledger = AccountantLedger::new();
    let sel = privimage_select(&public, &sensitive, &query, 0.2, 0.0, &mut ledger, 0).unwrap();
    assert_eq!(sensitive.touches(), 1);
    assert_eq!(ledger.events(), &[LedgerEvent::Gaussian { sigma: 0.0, releases: 1 }]);
    assert_eq!(sel.classes.len(), 4);
    assert!((0..sel.subset.len()).all(|i| sel.classes.contains(&sel.subset.label(i))));
    let top = sel.noisy_histogram[sel.classes[0]];
    assert!(sel.noisy_histogram.iter().all(|&h| h <= top));
    assert_eq!(sel.noisy_histogram.iter().sum::<f64>(), 200.0);
}
