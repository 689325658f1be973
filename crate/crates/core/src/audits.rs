//! Executable checks of analytical claims: mean-embedding sensitivity is
//! tight, DP-Promise outputs reveal their input, and the accountant agrees
//! with direct numerical integration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::accountant::{compose_and_convert, default_orders, rdp_to_epsilon, AccountantLedger, LedgerEvent};
use crate::embeddings::{brute_force_sensitivity, sensitivity_mean_embedding, NeighborNotion};
use crate::error::{invalid, Result};
use crate::mechanisms::dppromise_reconstruct;
use crate::rng::SeededRng;
use crate::synthesizers::diffusion::{diffuse_forward, NoiseSchedule};

pub const SENSITIVITY_TOL: f64 = 1e-12;
pub const RECONSTRUCTION_TOL: f64 = 1e-9;
pub const ACCOUNTANT_REL_TOL: f64 = 1e-4;
/// The control arm (reconstruction with fresh noise) must miss by at least this much on average.
pub const CONTROL_MIN_ERROR: f64 = 1e-3;
pub const AUDIT_IDS: [&str; 3] = ["sensitivity", "dppromise", "accountant"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub id: String,
    pub claim: String,
    pub passed: bool,
    /// Worst case found; present whether or not the audit passed.
    pub witness: Value,
    pub tolerances: BTreeMap<String, f64>,
}

fn tol(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn unit_alphabet(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed, 0xa1fa);
    (0..n)
        .map(|_| {
            let v = rng.normal_vec(dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Exhaustive neighbour search for `m = 1..=5` over the ±1 alphabet and a
/// random unit-vector alphabet, under every neighbour notion.
pub fn audit_sensitivity() -> Result<AuditReport> {
    let alphabets = [
        ("pm_one", vec![vec![1.0], vec![-1.0]]),
        ("random_unit", unit_alphabet(4, 3, 7)),
    ];
    let mut rows = Vec::new();
    let mut passed = true;
    for (name, alphabet) in &alphabets {
        for notion in NeighborNotion::ALL {
            for m in 1..=5 {
                let bound = sensitivity_mean_embedding(m, notion)?;
                let w = brute_force_sensitivity(alphabet, m, notion)?;
                let within = w.max_diff <= bound + SENSITIVITY_TOL;
                let tight_required = *name == "pm_one" && notion != NeighborNotion::AddRemoveUnknownM;
                let tight = (w.max_diff - bound).abs() <= SENSITIVITY_TOL;
                let ok = within && (!tight_required || tight);
                passed &= ok;
                rows.push(json!({
                    "alphabet": name,
                    "notion": notion,
                    "m": m,
                    "bound": bound,
                    "achieved": w.max_diff,
                    "dataset": w.dataset,
                    "neighbor": w.neighbor,
                    "ok": ok,
                }));
            }
        }
    }
    Ok(AuditReport {
        id: "sensitivity".into(),
        claim: "mean-embedding sensitivity is 2/m under replacement, attained by ±1 features; 1/m for known-size add/remove".into(),
        passed,
        witness: Value::Array(rows),
        tolerances: tol(&[("abs", SENSITIVITY_TOL)]),
    })
}

/// Releases `(x_t, e, t)` for random `x0` and recovers `x0` exactly. The
/// control arm reconstructs with independent noise and should miss.
pub fn audit_dppromise(trials: usize, sched: &NoiseSchedule, seed: u64) -> Result<AuditReport> {
    if trials == 0 {
        return invalid("audit needs at least one trial");
    }
    const DIM: usize = 16;
    let mut rng = SeededRng::new(seed, 0xd9a0);
    let mut worst = (0.0, Value::Null);
    let mut control_total = 0.0;
    let mut control_n = 0usize;
    for trial in 0..trials {
        let x0: Vec<f64> = (0..DIM).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let t = 1 + rng.below(sched.steps() as u64) as usize;
        let e = rng.normal_vec(DIM);
        let ab = sched.alphabar(t)?;
        if ab == 0.0 {
            continue;
        }
        let x_t = diffuse_forward(&x0, t, &e, sched)?;
        let rec = dppromise_reconstruct(&x_t, &e, t, sched)?;
        let err = x0.iter().zip(&rec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err >= worst.0 || worst.1.is_null() {
            worst = (err, json!({ "trial": trial, "t": t, "x0": x0, "x_t": x_t, "e": e, "reconstructed": rec }));
        }
        let fresh = rng.normal_vec(DIM);
        let guess = dppromise_reconstruct(&x_t, &fresh, t, sched)?;
        control_total += x0.iter().zip(&guess).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        control_n += 1;
    }
    let control_mean = control_total / control_n.max(1) as f64;
    Ok(AuditReport {
        id: "dppromise".into(),
        claim: "releasing (x_t, e, t) reveals x0 exactly".into(),
        passed: worst.0 < RECONSTRUCTION_TOL && control_mean > CONTROL_MIN_ERROR,
        witness: json!({
            "max_error": worst.0,
            "worst_trial": worst.1,
            "control_mean_error": control_mean,
            "trials": control_n,
        }),
        tolerances: tol(&[("max_error", RECONSTRUCTION_TOL), ("control_min_error", CONTROL_MIN_ERROR)]),
    })
}

/// One grid point: sampling rate, noise multiplier, steps, delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantCase {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
}

pub fn default_accountant_grid() -> Vec<AccountantCase> {
    let mut grid = Vec::new();
    for &q in &[0.0, 0.01, 0.1, 1.0] {
        for &sigma in &[0.8, 1.0, 2.0] {
            for &steps in &[1, 100, 1000] {
                grid.push(AccountantCase { q, sigma, steps, delta: 1e-5 });
            }
        }
    }
    grid
}

/// `ln E_{x~N(0,σ²)} [ (1 − q + q·exp((2x − 1)/(2σ²)))^α ] / (α − 1)` by the
/// trapezoid rule in log space over a window covering both Gaussian bumps.
pub fn rdp_quadrature(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let a = alpha as f64;
    let var = sigma * sigma;
    let lo = -40.0 * sigma - 1.0;
    let hi = a + 40.0 * sigma + 1.0;
    let h = sigma / 64.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let log_1mq = (-q).ln_1p();
    let log_q = q.ln();
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let ratio = (2.0 * x - 1.0) / (2.0 * var);
        // log(1 - q + q e^ratio), stable on both sides
        let log_mix = if q == 1.0 {
            ratio
        } else {
            let (u, v) = (log_1mq, log_q + ratio);
            let m = u.max(v);
            m + ((u - m).exp() + (v - m).exp()).ln()
        };
        let w: f64 = if i == 0 || i == n { 0.5 } else { 1.0 };
        terms.push(w.ln() + h.ln() + log_norm - x * x / (2.0 * var) + a * log_mix);
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_e = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    log_e / (a - 1.0)
}

/// ε from quadrature RDP over the same order grid.
pub fn epsilon_by_quadrature(case: &AccountantCase) -> f64 {
    let orders = default_orders();
    let curve: Vec<f64> = orders
        .iter()
        .map(|&a| case.steps as f64 * rdp_quadrature(case.q, case.sigma, a))
        .collect();
    rdp_to_epsilon(&curve, &orders, case.delta).0
}

pub fn audit_accountant(grid: &[AccountantCase]) -> Result<AuditReport> {
    if grid.is_empty() {
        return invalid("accountant audit needs a nonempty grid");
    }
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for case in grid {
        let ledger = AccountantLedger::new().with(LedgerEvent::SubsampledGaussian {
            q: case.q,
            sigma: case.sigma,
            steps: case.steps,
        })?;
        let eps = compose_and_convert(&ledger, case.delta)?;
        let oracle = epsilon_by_quadrature(case);
        let gap = (eps - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(gap);
        rows.push(json!({ "case": case, "ledger": eps, "oracle": oracle, "relative_gap": gap }));
    }
    let mut monotone = true;
    for a in grid {
        for b in grid {
            if a.q == b.q && a.sigma == b.sigma && a.delta == b.delta && a.steps < b.steps {
                let ea = rows.iter().find(|r| r["case"] == json!(a)).expect("row")["ledger"].as_f64();
                let eb = rows.iter().find(|r| r["case"] == json!(b)).expect("row")["ledger"].as_f64();
                monotone &= ea <= eb;
            }
        }
    }
    Ok(AuditReport {
        id: "accountant".into(),
        claim: "ledger epsilon of the subsampled Gaussian matches numerical integration".into(),
        passed: worst <= ACCOUNTANT_REL_TOL && monotone,
        witness: json!({ "worst_relative_gap": worst, "monotone_in_steps": monotone, "rows": rows }),
        tolerances: tol(&[("relative_gap", ACCOUNTANT_REL_TOL)]),
    })
}

/// Runs every audit, or only the one named by `only`.
pub fn run_audits(only: Option<&str>) -> Result<Vec<AuditReport>> {
    if let Some(id) = only {
        if !AUDIT_IDS.contains(&id) {
            return invalid(format!("unknown audit {id:?}; expected one of {AUDIT_IDS:?}"));
        }
    }
    let wanted = |id: &str| only.is_none_or(|o| o == id);
    let mut out = Vec::new();
    if wanted("sensitivity") {
        out.push(audit_sensitivity()?);
    }
    if wanted("dppromise") {
        out.push(audit_dppromise(100, &NoiseSchedule::scaled_default(1000)?, 0)?);
    }
    if wanted("accountant") {
        out.push(audit_accountant(&default_accountant_grid())?);
    }
    Ok(out)
}
