//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dpsynth::accountant::{
    calibrate_sigma, compose_and_convert, delta_default, rdp_subsampled_gaussian, AccountantLedger, LedgerEvent,
    PrivacySpec,
};
use dpsynth::audits::audit_dppromise;
use dpsynth::dataio::{load_dataset, Dataset, SplitPart};
use dpsynth::embeddings::{brute_force_sensitivity, mean_embedding, mmd2, NeighborNotion, RffMap};
use dpsynth::fidelity::{fit_gaussian, frechet_distance, inception_score_proxy, precision_recall, GaussianFit, PrThreshold};
use dpsynth::mechanisms::clip_l2;
use dpsynth::pipeline::{budget_guard, run_experiment, Epsilon, ExperimentConfig, MethodConfig};
use dpsynth::rng::SeededRng;
use dpsynth::synthesizers::diffusion::{
    diffuse_forward, diffusion_loss, dpdmlite_train, DenoiserLayout, DiffusionModel, LabelMode, NoiseSchedule,
    PretrainConfig,
};
use dpsynth::synthesizers::dpfeta::{dpfeta_train, CentralPhase};
use dpsynth::synthesizers::dpmerf::{dpmerf_train, GeneratorLayout};
use dpsynth::synthesizers::pe::{mean_nearest_distance, pe_synthesize_groups, GaussianJitterApi, PeConfig, DEFAULT_PE_ITERATIONS};
use dpsynth::synthesizers::{dpsgd_sigma, single_release_sigma, Sensitive};
use dpsynth::mechanisms::dppromise_reconstruct;
use dpsynth::tinynn::{
    dpsgd_step, loss_value, per_example_grads, Activation, DpOptimizer, DpSgdConfig, Example, Loss, MlpSpec,
    ModelCheckpoint, OutputHead, Target,
};
use dpsynth::utility::{
    correct_count, fit_classifier, select_checkpoint, ClassifierTraining, Protocol, ProtocolConfig,
};
use dpsynth::Error;
use nalgebra::{DMatrix, DVector};

// 1
const SENSITIVITY_TOL: f64 = 1e-12;
const SENSITIVITY_MAX_M: usize = 5;
const LIMIT_1: Duration = Duration::from_secs(5);
// 2
const GAUSSIAN_EPS: f64 = 5.30;
const GAUSSIAN_EPS_TOL: f64 = 0.01;
const Q1_TOL: f64 = 1e-9;
const CALIBRATION_WINDOW: f64 = 1e-3;
const CALIBRATION_TARGETS: usize = 100;
const LIMIT_2: Duration = Duration::from_secs(30);
// 3
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_NETS: usize = 20;
const LIMIT_3: Duration = Duration::from_secs(60);
// 4
const CLIP_FUZZ: usize = 10_000;
const SGD_MATCH_TOL: f64 = 1e-12;
// 5
const FRECHET_ZERO_TOL: f64 = 1e-8;
const FRECHET_UNIVARIATE: f64 = 10.0;
const EXACT_TOL: f64 = 1e-12;
const PR_POINTS: usize = 20;
const LIMIT_5: Duration = Duration::from_secs(10);
// 6
const MERF_DROP: f64 = 0.1;
const PAIRED_SEEDS: u64 = 10;
const LIMIT_6: Duration = Duration::from_secs(180);
// 7
const LIMIT_7: Duration = Duration::from_secs(60);
// 8
const FETA_EPSILON: f64 = 10.0;
const FETA_MIN_WINS: usize = 6;
const LIMIT_8: Duration = Duration::from_secs(600);
// 9
const LIMIT_9: Duration = Duration::from_secs(120);
// 10
const RECONSTRUCTION_TOL: f64 = 1e-9;
const RECONSTRUCTION_TRIALS: usize = 100;
// 11
const LIMIT_TOTAL: Duration = Duration::from_secs(20 * 60);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> Dataset {
    load_dataset(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)).expect("bundled fixture")
}

fn naive_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sensitivity() -> Outcome {
    let start = Instant::now();
    let alphabet = vec![vec![1.0], vec![-1.0]];
    let mut worst: f64 = 0.0;
    for m in 1..=SENSITIVITY_MAX_M {
        let replace = brute_force_sensitivity(&alphabet, m, NeighborNotion::ReplaceOne).map_err(|e| e.to_string())?;
        let known = brute_force_sensitivity(&alphabet, m, NeighborNotion::AddRemoveKnownM).map_err(|e| e.to_string())?;
        let (want_r, want_k) = (2.0 / m as f64, 1.0 / m as f64);
        ensure((replace.max_diff - want_r).abs() <= SENSITIVITY_TOL, format!("replace-one m={m}: {} vs {want_r}", replace.max_diff))?;
        ensure((known.max_diff - want_k).abs() <= SENSITIVITY_TOL, format!("known-m m={m}: {} vs {want_k}", known.max_diff))?;
        worst = worst.max((replace.max_diff - want_r).abs()).max((known.max_diff - want_k).abs());
    }
    let took = within(LIMIT_1, start)?;
    Ok(format!("m=1..{SENSITIVITY_MAX_M}, worst deviation {worst:e}, {took:.2?}"))
}

/// `min_α α/(2σ²) + ln(1/δ)/(α−1)` over a dense real grid of orders.
fn dense_gaussian_epsilon(sigma: f64, delta: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut alpha = 1.0001;
    while alpha <= 512.0 {
        best = best.min(alpha / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (alpha - 1.0));
        alpha += 1e-4;
    }
    best
}

fn accountant() -> Outcome {
    let start = Instant::now();
    let delta = 1e-5;
    let ledger = AccountantLedger::new()
        .with(LedgerEvent::Gaussian { sigma: 1.0, releases: 1 })
        .map_err(|e| e.to_string())?;
    let eps = compose_and_convert(&ledger, delta).map_err(|e| e.to_string())?;
    let oracle = dense_gaussian_epsilon(1.0, delta);
    ensure((oracle - GAUSSIAN_EPS).abs() <= GAUSSIAN_EPS_TOL, format!("oracle gives {oracle}"))?;
    ensure((eps - GAUSSIAN_EPS).abs() <= GAUSSIAN_EPS_TOL, format!("accountant gives {eps}"))?;
    ensure((eps - oracle).abs() <= GAUSSIAN_EPS_TOL, format!("accountant {eps} vs oracle {oracle}"))?;

    let mut q1_worst: f64 = 0.0;
    for sigma in [0.5, 0.8, 1.0, 2.0, 5.0] {
        for alpha in ledger.orders() {
            let sub = rdp_subsampled_gaussian(1.0, sigma, *alpha).map_err(|e| e.to_string())?;
            let closed = *alpha as f64 / (2.0 * sigma * sigma);
            let dev = (sub - closed).abs();
            q1_worst = q1_worst.max(dev);
            ensure(dev <= Q1_TOL, format!("q=1 σ={sigma} α={alpha}: {sub} vs {closed}"))?;
        }
    }

    let mut rng = SeededRng::new(2, 0xacc0);
    let mut done = 0;
    let mut worst_gap: f64 = 0.0;
    while done < CALIBRATION_TARGETS {
        let q = 10f64.powf(-3.0 + 3.0 * rng.uniform());
        let steps = 1 + rng.below(2000);
        let sigma_true = 0.5 + 9.5 * rng.uniform();
        let probe = AccountantLedger::new()
            .with(LedgerEvent::SubsampledGaussian { q, sigma: sigma_true, steps })
            .map_err(|e| e.to_string())?;
        let target = compose_and_convert(&probe, delta).map_err(|e| e.to_string())?;
        if !(0.1..=50.0).contains(&target) {
            continue;
        }
        let spec = PrivacySpec::new(target, delta).map_err(|e| e.to_string())?;
        let sigma = calibrate_sigma(spec, q, steps).map_err(|e| format!("target {target} q={q} T={steps}: {e}"))?;
        let back = AccountantLedger::new()
            .with(LedgerEvent::SubsampledGaussian { q, sigma, steps })
            .map_err(|e| e.to_string())?;
        let spent = compose_and_convert(&back, delta).map_err(|e| e.to_string())?;
        ensure(
            spent <= target && spent >= target - CALIBRATION_WINDOW,
            format!("target {target} q={q} T={steps}: spent {spent}"),
        )?;
        worst_gap = worst_gap.max(target - spent);
        done += 1;
    }
    let took = within(LIMIT_2, start)?;
    Ok(format!(
        "ε(σ=1)={eps:.4} oracle={oracle:.4}; q=1 worst {q1_worst:e}; {CALIBRATION_TARGETS} round trips, max shortfall {worst_gap:.2e}; {took:.2?}"
    ))
}

fn random_net(rng: &mut SeededRng, head: OutputHead) -> ModelCheckpoint {
    let depth = 1 + rng.below(3) as usize;
    let mut sizes = vec![1 + rng.below(5) as usize];
    for _ in 0..depth {
        sizes.push(1 + rng.below(6) as usize);
    }
    sizes.push(2 + rng.below(3) as usize);
    let act = if rng.bernoulli(0.5) { Activation::Tanh } else { Activation::Relu };
    let spec = MlpSpec::new(sizes, act, head).expect("valid spec");
    ModelCheckpoint::init(spec, rng).expect("init")
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(3, 0x9bad);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for net in 0..GRAD_NETS {
        for loss in [Loss::Mse, Loss::CrossEntropy] {
            let head = if loss == Loss::Mse { OutputHead::Linear } else { OutputHead::Softmax };
            let mut ckpt = random_net(&mut rng, head);
            // Zero biases can park a ReLU exactly on its kink, where finite
            // differences and the subgradient legitimately disagree.
            for p in ckpt.params.iter_mut() {
                *p += 0.1 * rng.normal();
            }
            let (din, dout) = (ckpt.spec.input_dim(), ckpt.spec.output_dim());
            let batch: Vec<Example> = (0..3)
                .map(|_| {
                    let x = rng.normal_vec(din);
                    let t = match loss {
                        Loss::Mse => Target::Vector(rng.normal_vec(dout)),
                        Loss::CrossEntropy => Target::Class(rng.below(dout as u64) as usize),
                    };
                    (x, t)
                })
                .collect();
            let grads = per_example_grads(&ckpt, &batch, loss).map_err(|e| e.to_string())?;
            for ((x, t), g) in batch.iter().zip(&grads) {
                let h = 1e-6;
                let mut fd = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let mut up = ckpt.clone();
                    up.params[i] += h;
                    let mut down = ckpt.clone();
                    down.params[i] -= h;
                    let lu = loss_value(&up, x, t, loss).map_err(|e| e.to_string())?;
                    let ld = loss_value(&down, x, t, loss).map_err(|e| e.to_string())?;
                    fd[i] = (lu - ld) / (2.0 * h);
                }
                let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
                let scale = naive_norm(g).max(naive_norm(&fd)).max(1e-8);
                let rel = naive_norm(&diff) / scale;
                worst = worst.max(rel);
                ensure(rel <= GRAD_REL_TOL, format!("net {net} {loss:?}: relative error {rel:e}"))?;
                checked += 1;
            }
        }
    }
    let took = within(LIMIT_3, start)?;
    Ok(format!("{checked} per-example gradients, worst relative error {worst:.2e}, {took:.2?}"))
}

fn dpsgd_contract() -> Outcome {
    let mut rng = SeededRng::new(4, 0xc11b);
    let mut clipped = 0;
    for _ in 0..CLIP_FUZZ {
        let dim = 1 + rng.below(64) as usize;
        let mag = 10f64.powf(-150.0 + 300.0 * rng.uniform());
        let g: Vec<f64> = rng.normal_vec(dim).iter().map(|v| v * mag).collect();
        let c = 10f64.powf(-3.0 + 6.0 * rng.uniform());
        let out = clip_l2(&g, c).map_err(|e| e.to_string())?;
        let n = naive_norm(&out);
        ensure(n <= c, format!("clipped norm {n} exceeds {c} (dim {dim}, magnitude {mag:e})"))?;
        if naive_norm(&g) > c {
            clipped += 1;
        }
    }

    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let ckpt = random_net(&mut rng, OutputHead::Linear);
        let grads: Vec<Vec<f64>> = (0..1 + trial % 7).map(|_| rng.normal_vec(ckpt.params.len())).collect();
        let cfg = DpSgdConfig { clip: 1e6, sigma: 0.0, q: 1.0, lr: 0.05, steps: 1, optimizer: DpOptimizer::Sgd };
        let next = dpsgd_step(&ckpt, &grads, &cfg, &mut SeededRng::new(trial, 1)).map_err(|e| e.to_string())?;
        for (i, p) in ckpt.params.iter().enumerate() {
            let mean = grads.iter().map(|g| g[i]).sum::<f64>() / grads.len() as f64;
            let dev = (next.params[i] - (p - cfg.lr * mean)).abs();
            worst = worst.max(dev);
            ensure(dev <= SGD_MATCH_TOL, format!("trial {trial} param {i}: deviation {dev:e}"))?;
        }
    }
    Ok(format!("{CLIP_FUZZ} fuzzed gradients ({clipped} clipped) within bound; σ=0 step vs SGD worst {worst:e}"))
}

fn univariate(mean: f64, var: f64) -> GaussianFit {
    GaussianFit {
        mu: DVector::from_element(1, mean),
        sigma: DMatrix::from_element(1, 1, var),
        regularized: false,
    }
}

/// Exhaustive precision/recall: every pairwise distance, sorted neighbour lists.
fn pr_oracle(real: &[Vec<f64>], syn: &[Vec<f64>], k: usize) -> (f64, f64) {
    let radius = |set: &[Vec<f64>], i: usize| -> f64 {
        let mut d: Vec<f64> = (0..set.len()).filter(|&j| j != i).map(|j| sq_dist(&set[i], &set[j]).sqrt()).collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    };
    let cover = |queries: &[Vec<f64>], refs: &[Vec<f64>]| -> f64 {
        let radii: Vec<f64> = (0..refs.len()).map(|j| radius(refs, j)).collect();
        let hits = queries
            .iter()
            .filter(|q| {
                let (j, d) = refs
                    .iter()
                    .enumerate()
                    .map(|(j, r)| (j, sq_dist(q, r).sqrt()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("nonempty");
                d <= radii[j]
            })
            .count();
        hits as f64 / queries.len() as f64
    };
    (cover(syn, real), cover(real, syn))
}

fn fidelity_closed_forms() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(5, 0xf1de);
    let feats: Vec<Vec<f64>> = (0..200).map(|_| rng.normal_vec(6)).collect();
    let fit = fit_gaussian(&feats).map_err(|e| e.to_string())?;
    let same = frechet_distance(&fit, &fit).map_err(|e| e.to_string())?;
    ensure(same.abs() <= FRECHET_ZERO_TOL, format!("identical fits give {same}"))?;
    let uni = frechet_distance(&univariate(0.0, 1.0), &univariate(3.0, 4.0)).map_err(|e| e.to_string())?;
    ensure((uni - FRECHET_UNIVARIATE).abs() <= EXACT_TOL, format!("univariate gives {uni}"))?;

    for k in [2usize, 5, 10] {
        let probs: Vec<Vec<f64>> = (0..10 * k)
            .map(|i| {
                let mut p = vec![0.0; k];
                p[i % k] = 1.0;
                p
            })
            .collect();
        let is = inception_score_proxy(&probs).map_err(|e| e.to_string())?;
        ensure((is - k as f64).abs() <= EXACT_TOL * k as f64, format!("IS of uniform one-hot over {k} classes is {is}"))?;
    }

    let mut cases = 0;
    for trial in 0..5 {
        let half = PR_POINTS / 2;
        let real: Vec<Vec<f64>> = (0..half).map(|_| rng.normal_vec(2)).collect();
        let shift = 0.5 * trial as f64;
        let syn: Vec<Vec<f64>> = (0..half).map(|_| rng.normal_vec(2).iter().map(|v| v + shift).collect()).collect();
        let got = precision_recall(&real, &syn, PrThreshold::KnnRadius { k: 3 }).map_err(|e| e.to_string())?;
        let want = pr_oracle(&real, &syn, 3);
        ensure(got == want, format!("trial {trial}: got {got:?}, oracle {want:?}"))?;
        cases += 1;
    }
    let took = within(LIMIT_5, start)?;
    Ok(format!("FD(same)={same:.1e}, FD(uni)={uni}, IS=K, {cases} precision/recall fixtures exact, {took:.2?}"))
}

fn toy_config() -> ExperimentConfig {
    ExperimentConfig::load(root().join("configs/toy2d_dpmerf.json")).expect("toy config")
}

fn dpmerf_desk() -> Outcome {
    let start = Instant::now();
    let cfg = toy_config();
    let MethodConfig::DpMerf(m) = &cfg.method else {
        return Err("toy config is not dp-merf".into());
    };
    let data = cfg.data.load_sensitive(&root(), cfg.seed).map_err(|e| e.to_string())?;
    let train = data.part(SplitPart::Train);
    let test = data.part(SplitPart::Test);
    let d = train.feature_dim();
    let delta = delta_default(train.len()).map_err(|e| e.to_string())?;
    let sigma_1 = single_release_sigma(Some(PrivacySpec::new(1.0, delta).map_err(|e| e.to_string())?))
        .map_err(|e| e.to_string())?;
    let train_cfg = m.train.resolve();
    let layout = GeneratorLayout {
        latent_dim: m.latent_dim,
        data_dim: d,
        num_classes: train.num_classes(),
        hidden: m.hidden.clone(),
        activation: m.activation,
    };
    let bw = m.bandwidth.expect("toy config sets a bandwidth");
    let labels: Vec<usize> = (0..test.len()).map(|i| i % train.num_classes()).collect();
    let (mut sum_private, mut sum_clean) = (0.0, 0.0);
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..PAIRED_SEEDS {
        let map = RffMap::new(d, m.rff_dim, bw, &mut SeededRng::new(seed, 0x3a9)).map_err(|e| e.to_string())?;
        let eval_map = RffMap::new(d, 512, bw, &mut SeededRng::new(seed, 0xe7a)).map_err(|e| e.to_string())?;
        let real = mean_embedding(&test.rows(), None, &eval_map).map_err(|e| e.to_string())?;
        let mut mmd = [0.0; 2];
        for (slot, sigma) in [(0, 0.0), (1, sigma_1)] {
            let sensitive = Sensitive::new(&train);
            let mut ledger = AccountantLedger::new();
            let out = dpmerf_train(&sensitive, &map, sigma, &layout, &train_cfg, &mut ledger, seed).map_err(|e| e.to_string())?;
            ensure(ledger.len() == 1, format!("seed {seed}: ledger has {} events", ledger.len()))?;
            ensure(sensitive.touches() == 1, format!("seed {seed}: {} releases of the private data", sensitive.touches()))?;
            if sigma == 0.0 {
                let first = out.objective.first().expect("objective").1;
                let last = out.objective.last().expect("objective").1;
                worst_ratio = worst_ratio.max(last / first);
                ensure(last < MERF_DROP * first, format!("seed {seed}: objective {first:e} -> {last:e}"))?;
            }
            let syn = out.generator.sample(&labels, seed).map_err(|e| e.to_string())?;
            let emb = mean_embedding(&syn, None, &eval_map).map_err(|e| e.to_string())?;
            mmd[slot] = mmd2(&real.mu, &emb.mu).map_err(|e| e.to_string())?;
        }
        sum_clean += mmd[0];
        sum_private += mmd[1];
    }
    let (clean, private) = (sum_clean / PAIRED_SEEDS as f64, sum_private / PAIRED_SEEDS as f64);
    ensure(private >= clean, format!("mean MMD² at ε=1 {private:e} < at ε=∞ {clean:e}"))?;
    let took = within(LIMIT_6, start)?;
    Ok(format!(
        "objective ratio ≤ {worst_ratio:.3}; mean MMD² ε=1 {private:.2e} vs ε=∞ {clean:.2e}; one ledger event; {took:.1?}"
    ))
}

fn pe_desk() -> Outcome {
    let start = Instant::now();
    let data = fixture("three_gaussians").part(SplitPart::Train);
    let k = data.num_classes();
    let mut groups = vec![Vec::new(); k];
    for i in 0..data.len() {
        groups[data.label(i)].push(data.image_f64(i));
    }
    let rounds = DEFAULT_PE_ITERATIONS;
    let mut curve = vec![0.0; rounds + 1];
    for seed in 0..PAIRED_SEEDS {
        let cfg = PeConfig { n_candidates: 100, iterations: rounds, sigma_hist: 0.0, threshold: None };
        let api = GaussianJitterApi::unit_box(data.feature_dim(), 0.15, 0.8);
        let mut ledger = AccountantLedger::new();
        pe_synthesize_groups(k, || groups.clone(), &api, &cfg, &mut ledger, seed, |round, sets| {
            let mean = sets.iter().zip(&groups).map(|(c, p)| mean_nearest_distance(c, p)).sum::<f64>() / k as f64;
            curve[round] += mean / PAIRED_SEEDS as f64;
        })
        .map_err(|e| e.to_string())?;
    }
    for r in 1..=rounds {
        ensure(curve[r] <= curve[r - 1], format!("distance rose at round {r}: {curve:?}"))?;
    }
    let took = within(LIMIT_7, start)?;
    Ok(format!("mean distance {:.4} -> {:.4} over {rounds} rounds, {took:.2?}", curve[0], curve[rounds]))
}

fn small_denoiser(k: usize, seed: u64) -> DiffusionModel {
    let layout = DenoiserLayout { data_dim: 64, num_classes: k, time_dim: 8, hidden: vec![64], activation: Activation::Relu };
    DiffusionModel::init(layout, NoiseSchedule::scaled_default(50).expect("schedule"), seed).expect("denoiser")
}

fn diffusion_desk() -> Outcome {
    let start = Instant::now();
    let data = fixture("toy_digits");
    let train = data.part(SplitPart::Train);
    let val = data.part(SplitPart::Val);
    let k = train.num_classes();
    let n = train.len();
    let delta = delta_default(n).map_err(|e| e.to_string())?;
    let target = PrivacySpec::new(FETA_EPSILON, delta).map_err(|e| e.to_string())?;
    let (batch, steps) = (64.0, 150u64);
    let q = batch / n as f64;
    let base = DpSgdConfig { clip: 1.0, sigma: 0.0, q, lr: 2e-3, steps, optimizer: DpOptimizer::Adam };

    // Multiplicity is free: the ledger depends only on (q, σ, T).
    let short = DpSgdConfig { sigma: 1.3, steps: 3, ..base };
    let mut ledgers = Vec::new();
    for k_mult in [1, 4, 16] {
        let mut ledger = AccountantLedger::new();
        let sensitive = Sensitive::new(&train);
        dpdmlite_train(&sensitive, small_denoiser(k, 0), &short, k_mult, &mut ledger, 0).map_err(|e| e.to_string())?;
        ledgers.push(serde_json::to_string(&ledger).map_err(|e| e.to_string())?);
    }
    ensure(ledgers.iter().all(|l| l == &ledgers[0]), format!("ledgers differ across multiplicities: {ledgers:?}"))?;

    let sigma_dpdm = dpsgd_sigma(&AccountantLedger::new(), Some(target), q, steps).map_err(|e| e.to_string())?;
    let central_target = PrivacySpec::new(FETA_EPSILON * 0.1, delta).map_err(|e| e.to_string())?;
    let sigma_c = single_release_sigma(Some(central_target)).map_err(|e| e.to_string())?;
    let prefix = AccountantLedger::new()
        .with(LedgerEvent::Gaussian { sigma: sigma_c, releases: 1 })
        .map_err(|e| e.to_string())?;
    let sigma_feta = dpsgd_sigma(&prefix, Some(target), q, steps).map_err(|e| e.to_string())?;
    let phase = CentralPhase {
        n_central: 10,
        pixel_clip: 8.0,
        sigma: sigma_c,
        pretrain: PretrainConfig { steps: 200, batch_size: 32, lr: 2e-3, mode: LabelMode::Conditional },
    };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..PAIRED_SEEDS {
        let mut ledger_d = AccountantLedger::new();
        let (plain, _) = dpdmlite_train(
            &Sensitive::new(&train),
            small_denoiser(k, seed),
            &DpSgdConfig { sigma: sigma_dpdm, ..base },
            4,
            &mut ledger_d,
            seed,
        )
        .map_err(|e| e.to_string())?;
        let mut ledger_f = AccountantLedger::new();
        let feta = dpfeta_train(
            &Sensitive::new(&train),
            small_denoiser(k, seed),
            Some(&phase),
            &DpSgdConfig { sigma: sigma_feta, ..base },
            4,
            &mut ledger_f,
            seed,
        )
        .map_err(|e| e.to_string())?;
        for (name, l) in [("dpdm-lite", &ledger_d), ("dp-feta", &ledger_f)] {
            let spent = compose_and_convert(l, delta).map_err(|e| e.to_string())?;
            ensure(spent <= FETA_EPSILON, format!("{name} seed {seed} spent {spent}"))?;
        }
        let loss_d = diffusion_loss(&plain, &val, 4, 1000 + seed).map_err(|e| e.to_string())?;
        let loss_f = diffusion_loss(&feta.model, &val, 4, 1000 + seed).map_err(|e| e.to_string())?;
        if loss_f < loss_d {
            wins += 1;
        }
        pairs.push(format!("{loss_f:.4}/{loss_d:.4}"));
    }
    ensure(wins >= FETA_MIN_WINS, format!("dp-feta won {wins}/{PAIRED_SEEDS}: {pairs:?}"))?;
    let took = within(LIMIT_8, start)?;
    Ok(format!(
        "ledger identical for k_mult 1/4/16; dp-feta beats dpdm-lite in {wins}/{PAIRED_SEEDS} seeds (feta/dpdm {}), {took:.1?}",
        pairs.join(" ")
    ))
}

fn utility_protocols() -> Outcome {
    let start = Instant::now();
    let sensitive = fixture("toy_digits");
    let syn = dpsynth::dataio::toy_digits(600, 77);
    let val = sensitive.part(SplitPart::Val);
    let training = ClassifierTraining {
        spec: MlpSpec::new(vec![64, 32, 10], Activation::Relu, OutputHead::Softmax).map_err(|e| e.to_string())?,
        epochs: 8,
        lr: 0.1,
        batch_size: 32,
    };
    let eps_train = 10.0;
    let hold = syn.select(&[0]);
    let mut gaps = Vec::new();
    for seed in 0..PAIRED_SEEDS {
        let snaps = fit_classifier(&syn, &training, 1, seed).map_err(|e| e.to_string())?;
        let pick = |protocol, eps_val| {
            select_checkpoint(&snaps, &hold, &sensitive, &ProtocolConfig::new(protocol, eps_val, 8), eps_train, seed)
                .map_err(|e| e.to_string())
        };
        let senv = pick(Protocol::Senv, 1.0)?;
        let noisy = pick(Protocol::NoisySenv, 1.0)?;
        ensure(
            senv.test_accuracy >= noisy.test_accuracy,
            format!("seed {seed}: senv {} < noisy_senv {}", senv.test_accuracy, noisy.test_accuracy),
        )?;
        gaps.push(senv.test_accuracy - noisy.test_accuracy);
        ensure(noisy.eps_total == eps_train.max(1.0), format!("seed {seed}: eps_total {}", noisy.eps_total))?;

        let clean = pick(Protocol::NoisySenv, f64::INFINITY)?;
        let counts: Vec<u64> = snaps.iter().map(|s| correct_count(&s.ckpt, &val)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let best = *counts.iter().max().expect("snapshots");
        let chosen = snaps.iter().position(|s| s.epoch == clean.selected_step).expect("selected snapshot");
        ensure(counts[chosen] == best, format!("seed {seed}: noiseless pick has {} correct, best {best}", counts[chosen]))?;

        let matched = pick(Protocol::NoisySenv, eps_train)?;
        ensure(matched.eps_total == eps_train, format!("seed {seed}: matched eps_total {}", matched.eps_total))?;
        let wide = pick(Protocol::NoisySenv, 2.0 * eps_train)?;
        ensure(wide.eps_total == 2.0 * eps_train, format!("seed {seed}: eps_total {}", wide.eps_total))?;
    }
    let took = within(LIMIT_9, start)?;
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok(format!("senv ≥ noisy_senv on {PAIRED_SEEDS}/{PAIRED_SEEDS} seeds (mean gap {mean_gap:.4}); noiseless pick is the clean argmax; eps_total = max; {took:.1?}"))
}

fn dppromise() -> Outcome {
    let sched = NoiseSchedule::scaled_default(1000).map_err(|e| e.to_string())?;
    let report = audit_dppromise(RECONSTRUCTION_TRIALS, &sched, 10).map_err(|e| e.to_string())?;
    ensure(report.passed, format!("audit failed: {}", report.witness))?;
    let mut rng = SeededRng::new(10, 0x0bad);
    let mut worst: f64 = 0.0;
    for _ in 0..RECONSTRUCTION_TRIALS {
        let x0: Vec<f64> = (0..64).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let t = 1 + rng.below(1000) as usize;
        let e = rng.normal_vec(64);
        let x_t = diffuse_forward(&x0, t, &e, &sched).map_err(|e| e.to_string())?;
        let rec = dppromise_reconstruct(&x_t, &e, t, &sched).map_err(|e| e.to_string())?;
        worst = worst.max(x0.iter().zip(&rec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= RECONSTRUCTION_TOL, format!("worst reconstruction error {worst:e}"))?;
    Ok(format!("{RECONSTRUCTION_TRIALS} trials, worst error {worst:.2e}, audit max {}", report.witness["max_error"]))
}

fn determinism() -> Outcome {
    let cfg = toy_config();
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let ra = run_experiment(&cfg, &root(), a.path()).map_err(|e| e.to_string())?;
    let rb = run_experiment(&cfg, &root(), b.path()).map_err(|e| e.to_string())?;
    let (ma, mb) = (std::fs::read(ra.dir.metrics()).map_err(|e| e.to_string())?, std::fs::read(rb.dir.metrics()).map_err(|e| e.to_string())?);
    ensure(ma == mb, "metrics.json differs between identical runs")?;

    let text = serde_json::to_string(&cfg)
        .map_err(|e| e.to_string())?
        .replace("\"epsilon\":\"inf\"", "\"epsilon\":1.0")
        .replace("\"sigma\":null", "\"sigma\":0.5");
    let over = ExperimentConfig::parse(&text).map_err(|e| e.to_string())?;
    let c = tempfile::tempdir().map_err(|e| e.to_string())?;
    match run_experiment(&over, &root(), c.path()) {
        Err(Error::Budget { spent, target }) => ensure(spent > target, "budget error without overspend")?,
        other => return Err(format!("overspending run was not stopped: {:?}", other.map(|r| r.metrics.epsilon_spent))),
    }
    let ledger = AccountantLedger::new()
        .with(LedgerEvent::Gaussian { sigma: 1.0, releases: 1 })
        .map_err(|e| e.to_string())?;
    ensure(matches!(budget_guard(&ledger, Epsilon(5.0), 1e-5), Err(Error::Budget { .. })), "guard let ε≈5.30 through a 5.0 target")?;
    ensure(budget_guard(&ledger, Epsilon(5.5), 1e-5).is_ok(), "guard rejected a ledger under target")?;
    Ok(format!("metrics.json byte-identical ({} bytes); overspend aborted with a budget error", ma.len()))
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("sensitivity audit", sensitivity),
        ("accountant", accountant),
        ("gradient correctness", gradients),
        ("dp-sgd contract", dpsgd_contract),
        ("fidelity closed forms", fidelity_closed_forms),
        ("dp-merf desk run", dpmerf_desk),
        ("pe desk run", pe_desk),
        ("dpdm-lite + dp-feta", diffusion_desk),
        ("utility protocols", utility_protocols),
        ("dp-promise audit", dppromise),
    ];
    let mut failed = 0;
    let mut report = |i: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("criterion {i:>2} PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {i:>2} FAIL {name}: {detail}");
            }
        }
    };
    let run = |f: fn() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        })
    };
    // ACCEPTANCE_ONLY=3,8 runs a subset; the rest are reported as skipped.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    for (i, (name, f)) in criteria.iter().enumerate() {
        if wanted(i + 1) {
            report(i + 1, name, run(*f));
        } else {
            println!("criterion {:>2} SKIP {name}", i + 1);
        }
    }
    if !wanted(11) {
        println!("criterion 11 SKIP pipeline determinism + budget guard");
        if failed > 0 {
            std::process::exit(1);
        }
        return;
    }
    let last = run(determinism).and_then(|detail| {
        let took = within(LIMIT_TOTAL, start)?;
        Ok(format!("{detail}; whole suite {took:.1?}"))
    });
    report(11, "pipeline determinism + budget guard", last);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
