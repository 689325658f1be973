//! Rényi-DP accounting over integer orders.
//!
//! A ledger is an append-only list of privacy-consuming events. Gaussian-type
//! events are composed by adding their RDP curves order-wise; pure-ε events
//! (Laplace selections) are added on top after the RDP curve is converted.
//! The conversion is the standard `ε = min_α RDP(α) + log(1/δ)/(α − 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 256;

/// Bracket and iteration cap of the noise-multiplier search.
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 1e4);
pub const CALIBRATION_ITERS: usize = 80;
pub const CALIBRATION_TOL: f64 = 1e-3;

pub fn default_orders() -> Vec<u32> {
    (MIN_ORDER..=MAX_ORDER).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let spec = Self { epsilon, delta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return invalid(format!("epsilon {} must be > 0", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta {} must lie in (0,1)", self.delta));
        }
        Ok(())
    }

    pub fn is_unbounded(&self) -> bool {
        self.epsilon == f64::INFINITY
    }
}

/// One privacy-consuming release. `sigma` is the noise multiplier (noise std
/// divided by L2 sensitivity); `sigma = 0` records a noiseless release and
/// makes the ledger's ε infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEvent {
    SubsampledGaussian { q: f64, sigma: f64, steps: u64 },
    Gaussian { sigma: f64, releases: u64 },
    PureDp { epsilon: f64 },
}

impl LedgerEvent {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LedgerEvent::SubsampledGaussian { q, sigma, .. } => {
                if !(0.0..=1.0).contains(&q) {
                    return invalid(format!("sampling rate {q} outside [0,1]"));
                }
                check_sigma(sigma)
            }
            LedgerEvent::Gaussian { sigma, .. } => check_sigma(sigma),
            LedgerEvent::PureDp { epsilon } => {
                if !(epsilon >= 0.0) {
                    return invalid(format!("pure epsilon {epsilon} must be >= 0"));
                }
                Ok(())
            }
        }
    }

    /// RDP of this event at integer order `alpha` (0 for pure-ε events).
    pub fn rdp(&self, alpha: u32) -> Result<f64> {
        match *self {
            LedgerEvent::SubsampledGaussian { q, sigma, steps } => {
                if steps == 0 || q == 0.0 {
                    return Ok(0.0);
                }
                if sigma == 0.0 {
                    return Ok(f64::INFINITY);
                }
                Ok(steps as f64 * rdp_subsampled_gaussian(q, sigma, alpha)?)
            }
            LedgerEvent::Gaussian { sigma, releases } => {
                if releases == 0 {
                    return Ok(0.0);
                }
                if sigma == 0.0 {
                    return Ok(f64::INFINITY);
                }
                Ok(releases as f64 * rdp_gaussian(sigma, alpha as f64)?)
            }
            LedgerEvent::PureDp { .. } => Ok(0.0),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return invalid(format!("noise multiplier {sigma} must be finite and >= 0"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantLedger {
    events: Vec<LedgerEvent>,
    #[serde(default = "default_orders")]
    orders: Vec<u32>,
}

impl Default for AccountantLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl AccountantLedger {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            orders: default_orders(),
        }
    }

    pub fn push(&mut self, event: LedgerEvent) -> Result<()> {
        event.validate()?;
        self.events.push(event);
        Ok(())
    }

    pub fn with(mut self, event: LedgerEvent) -> Result<Self> {
        self.push(event)?;
        Ok(self)
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    /// Appends every event of `other`.
    pub fn extend(&mut self, other: &AccountantLedger) -> Result<()> {
        for e in other.events() {
            self.push(*e)?;
        }
        Ok(())
    }

    /// Parses and validates a ledger from JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let ledger: AccountantLedger = serde_json::from_str(text)?;
        ledger.validate()?;
        Ok(ledger)
    }

    pub fn validate(&self) -> Result<()> {
        if self.orders.is_empty() {
            return invalid("order grid is empty");
        }
        if let Some(bad) = self.orders.iter().find(|&&a| a < MIN_ORDER) {
            return invalid(format!("RDP order {bad} must be >= {MIN_ORDER}"));
        }
        self.events.iter().try_for_each(LedgerEvent::validate)
    }

    /// Total RDP per order of the grid.
    pub fn rdp_curve(&self) -> Result<Vec<f64>> {
        let mut curve = vec![0.0; self.orders.len()];
        for event in &self.events {
            if matches!(event, LedgerEvent::PureDp { .. }) {
                continue;
            }
            for (slot, &alpha) in curve.iter_mut().zip(&self.orders) {
                *slot += event.rdp(alpha)?;
            }
        }
        Ok(curve)
    }

    pub fn pure_epsilon(&self) -> f64 {
        self.events
            .iter()
            .map(|e| match e {
                LedgerEvent::PureDp { epsilon } => *epsilon,
                _ => 0.0,
            })
            .sum()
    }
}

pub fn rdp_gaussian(sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("sigma {sigma} must be > 0"));
    }
    if !(alpha > 1.0) {
        return invalid(format!("order {alpha} must be > 1"));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

/// RDP at integer order `alpha` of one Poisson-subsampled Gaussian step:
///
/// `log( Σ_k C(α,k) (1−q)^(α−k) q^k exp((k² − k) / (2σ²)) ) / (α − 1)`,
///
/// summed in log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return invalid(format!("sampling rate {q} outside [0,1]"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("sigma {sigma} must be > 0"));
    }
    if alpha < MIN_ORDER {
        return invalid(format!("order {alpha} must be an integer >= {MIN_ORDER}"));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return rdp_gaussian(sigma, alpha as f64);
    }
    let a = alpha as f64;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut log_binom = 0.0;
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    for k in 0..=alpha {
        let kf = k as f64;
        if k > 0 {
            log_binom += (a - kf + 1.0).ln() - kf.ln();
        }
        terms.push(log_binom + (a - kf) * log_1mq + kf * log_q + (kf * kf - kf) * inv_two_var);
    }
    Ok(log_sum_exp(&terms) / (a - 1.0))
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Converts an RDP curve over `orders` to ε at `delta`, returning the best
/// ε and the order achieving it.
pub fn rdp_to_epsilon(curve: &[f64], orders: &[u32], delta: f64) -> (f64, u32) {
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = (f64::INFINITY, orders.first().copied().unwrap_or(MIN_ORDER));
    for (&rdp, &alpha) in curve.iter().zip(orders) {
        let eps = rdp + log_inv_delta / (alpha as f64 - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    best
}

pub fn compose_and_convert(ledger: &AccountantLedger, delta: f64) -> Result<f64> {
    if ledger.is_empty() {
        return invalid("cannot convert an empty ledger");
    }
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("delta {delta} must lie in (0,1)"));
    }
    let pure = ledger.pure_epsilon();
    let has_rdp = ledger
        .events()
        .iter()
        .any(|e| !matches!(e, LedgerEvent::PureDp { .. }));
    if !has_rdp {
        return Ok(pure);
    }
    let curve = ledger.rdp_curve()?;
    let (eps, _) = rdp_to_epsilon(&curve, ledger.orders(), delta);
    Ok(eps + pure)
}

/// Finds the smallest noise multiplier in [`SIGMA_BRACKET`] such that
/// `prefix + make_event(σ)` accounts to at most `target.epsilon`, landing
/// within [`CALIBRATION_TOL`] below it.
pub fn calibrate_sigma_with(
    prefix: &AccountantLedger,
    target: PrivacySpec,
    make_event: impl Fn(f64) -> LedgerEvent,
) -> Result<f64> {
    target.validate()?;
    let eps_at = |sigma: f64| -> Result<f64> {
        let mut ledger = prefix.clone();
        ledger.push(make_event(sigma))?;
        compose_and_convert(&ledger, target.delta)
    };
    let (lo_sigma, hi_sigma) = SIGMA_BRACKET;
    let eps_hi = eps_at(hi_sigma)?;
    if eps_hi > target.epsilon {
        return Err(Error::Calibration(format!(
            "even sigma={hi_sigma} spends {eps_hi:.4} > target {}",
            target.epsilon
        )));
    }
    let eps_lo = eps_at(lo_sigma)?;
    if eps_lo <= target.epsilon {
        if eps_lo >= target.epsilon - CALIBRATION_TOL {
            return Ok(lo_sigma);
        }
        return Err(Error::Calibration(format!(
            "target {} is looser than sigma={lo_sigma} ({eps_lo:.4}); bracket cannot reach it",
            target.epsilon
        )));
    }
    // Bisect in log space: eps(lo) > target >= eps(hi).
    let (mut lo, mut hi) = (lo_sigma.ln(), hi_sigma.ln());
    let mut eps_best = eps_hi;
    for _ in 0..CALIBRATION_ITERS {
        let mid = 0.5 * (lo + hi);
        let eps = eps_at(mid.exp())?;
        if eps > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
            eps_best = eps;
            if eps >= target.epsilon - CALIBRATION_TOL * 0.5 {
                break;
            }
        }
    }
    if eps_best < target.epsilon - CALIBRATION_TOL {
        return Err(Error::Calibration(format!(
            "search ended at eps {eps_best:.6}, more than {CALIBRATION_TOL} below target {}",
            target.epsilon
        )));
    }
    Ok(hi.exp())
}

/// Noise multiplier for `steps` Poisson-subsampled Gaussian steps at rate `q`.
pub fn calibrate_sigma(target: PrivacySpec, q: f64, steps: u64) -> Result<f64> {
    if steps == 0 {
        return invalid("calibration needs at least one step");
    }
    if !(q > 0.0 && q <= 1.0) {
        return invalid(format!("sampling rate {q} outside (0,1]"));
    }
    calibrate_sigma_with(&AccountantLedger::new(), target, |sigma| {
        LedgerEvent::SubsampledGaussian { q, sigma, steps }
    })
}

/// `δ = 1 / (N ln N)`, which sits well below `1/N`.
pub fn delta_default(n: usize) -> Result<f64> {
    if n < 3 {
        return invalid(format!("dataset size {n} too small for the default delta (need >= 3)"));
    }
    let n = n as f64;
    Ok(1.0 / (n * n.ln()))
}

/// Disjoint-data composition: the worse of the two guarantees.
pub fn parallel_compose(eps_train: f64, eps_val: f64) -> f64 {
    eps_train.max(eps_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_closed_form() {
        assert_eq!(rdp_gaussian(1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_gaussian(2.0, 2.0).unwrap(), 0.25);
        let a = rdp_gaussian(1.3, 3.0).unwrap();
        let b = rdp_gaussian(1.3, 6.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
        assert!(rdp_gaussian(0.0, 2.0).is_err());
        assert!(rdp_gaussian(1.0, 1.0).is_err());
    }

    #[test]
    fn subsampled_limits() {
        for alpha in [2, 7, 64, 256] {
            let full = rdp_subsampled_gaussian(1.0, 1.1, alpha).unwrap();
            assert!((full - rdp_gaussian(1.1, alpha as f64).unwrap()).abs() < 1e-9);
        }
        assert!(rdp_subsampled_gaussian(1e-9, 1.0, 8).unwrap() < 1e-15);
        assert_eq!(rdp_subsampled_gaussian(0.0, 1.0, 8).unwrap(), 0.0);
        assert!(rdp_subsampled_gaussian(0.5, 1.0, 1).is_err());
    }

    #[test]
    fn q_near_one_approaches_full_batch() {
        let near = rdp_subsampled_gaussian(1.0 - 1e-12, 1.0, 10).unwrap();
        let full = rdp_gaussian(1.0, 10.0).unwrap();
        assert!((near - full).abs() < 1e-9);
    }

    #[test]
    fn events_double_curve() {
        let e = LedgerEvent::SubsampledGaussian { q: 0.1, sigma: 1.2, steps: 10 };
        let one = AccountantLedger::new().with(e).unwrap();
        let two = one.clone().with(e).unwrap();
        for (a, b) in one.rdp_curve().unwrap().iter().zip(two.rdp_curve().unwrap()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn empty_ledger_rejected() {
        assert!(compose_and_convert(&AccountantLedger::new(), 1e-5).is_err());
    }

    #[test]
    fn pure_events_add_after_conversion() {
        let g = AccountantLedger::new().with(LedgerEvent::Gaussian { sigma: 1.0, releases: 1 }).unwrap();
        let base = compose_and_convert(&g, 1e-5).unwrap();
        let with_pure = g.with(LedgerEvent::PureDp { epsilon: 0.5 }).unwrap();
        assert!((compose_and_convert(&with_pure, 1e-5).unwrap() - base - 0.5).abs() < 1e-12);
    }

    #[test]
    fn noiseless_event_is_unbounded() {
        let g = AccountantLedger::new().with(LedgerEvent::Gaussian { sigma: 0.0, releases: 1 }).unwrap();
        assert_eq!(compose_and_convert(&g, 1e-5).unwrap(), f64::INFINITY);
    }

    #[test]
    fn invalid_events_rejected() {
        let mut l = AccountantLedger::new();
        assert!(l.push(LedgerEvent::SubsampledGaussian { q: 1.5, sigma: 1.0, steps: 1 }).is_err());
        assert!(l.push(LedgerEvent::Gaussian { sigma: -1.0, releases: 1 }).is_err());
        assert!(l.is_empty());
    }

    #[test]
    fn ledger_json_round_trip() {
        let l = AccountantLedger::new()
            .with(LedgerEvent::SubsampledGaussian { q: 0.05, sigma: 1.0, steps: 100 })
            .unwrap()
            .with(LedgerEvent::PureDp { epsilon: 1.0 })
            .unwrap();
        let text = serde_json::to_string(&l).unwrap();
        assert!(text.contains("\"kind\":\"subsampled_gaussian\""));
        assert_eq!(AccountantLedger::from_json(&text).unwrap(), l);
        let short = r#"{"events":[{"kind":"gaussian","sigma":1.0,"releases":1}]}"#;
        assert_eq!(AccountantLedger::from_json(short).unwrap().orders().len(), 255);
        assert!(AccountantLedger::from_json(r#"{"events":[],"orders":[1]}"#).is_err());
    }

    #[test]
    fn delta_rule() {
        let d = delta_default(55_000).unwrap();
        let expected = 1.0 / (55_000.0 * 55_000f64.ln());
        assert_eq!(d, expected);
        assert!((d - 1.666e-6).abs() < 1e-9);
        assert!(delta_default(3).unwrap().is_finite() && delta_default(3).unwrap() > 0.0);
        assert!(delta_default(2).is_err());
        for n in [3usize, 10, 150, 1000, 1_000_000] {
            assert!(delta_default(n).unwrap() < 1.0 / n as f64);
        }
        assert!(delta_default(150).unwrap() * 150.0 < 0.2);
    }

    #[test]
    fn parallel_composition() {
        assert_eq!(parallel_compose(1.0, 1.0), 1.0);
        assert_eq!(parallel_compose(1.0, 2.0), 2.0);
        assert_eq!(parallel_compose(2.0, 1.0), parallel_compose(1.0, 2.0));
    }

    #[test]
    fn calibration_rejects_unreachable_targets() {
        let tiny = PrivacySpec::new(1e-4, 1e-5).unwrap();
        assert!(matches!(calibrate_sigma(tiny, 1.0, 1000), Err(Error::Calibration(_))));
        assert!(calibrate_sigma(PrivacySpec::new(1.0, 1e-5).unwrap(), 0.1, 0).is_err());
    }

    #[test]
    fn calibration_round_trip_paper_setting() {
        let n = 55_000usize;
        let delta = delta_default(n).unwrap();
        let q = 4096.0 / n as f64;
        let target = PrivacySpec::new(10.0, delta).unwrap();
        let sigma = calibrate_sigma(target, q, 2196).unwrap();
        let ledger = AccountantLedger::new()
            .with(LedgerEvent::SubsampledGaussian { q, sigma, steps: 2196 })
            .unwrap();
        let eps = compose_and_convert(&ledger, delta).unwrap();
        assert!(eps <= 10.0 && eps >= 10.0 - CALIBRATION_TOL, "eps {eps} sigma {sigma}");
    }

    #[test]
    fn more_steps_need_more_noise() {
        let target = PrivacySpec::new(3.0, 1e-5).unwrap();
        let mut prev = 0.0;
        for steps in [1, 10, 100, 1000] {
            let s = calibrate_sigma(target, 0.05, steps).unwrap();
            assert!(s >= prev, "steps {steps}: {s} < {prev}");
            prev = s;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn epsilon_monotone(
            q in 0.001f64..1.0,
            sigma in 0.5f64..5.0,
            steps in 1u64..500,
        ) {
            let eps = |q: f64, sigma: f64, steps: u64| {
                let l = AccountantLedger::new()
                    .with(LedgerEvent::SubsampledGaussian { q, sigma, steps })
                    .unwrap();
                compose_and_convert(&l, 1e-5).unwrap()
            };
            let base = eps(q, sigma, steps);
            prop_assert!(eps(q, sigma * 1.1, steps) < base);
            prop_assert!(eps(q, sigma, steps + 1) >= base);
            prop_assert!(eps((q * 1.1).min(1.0), sigma, steps) >= base);
        }

        #[test]
        fn subsampled_monotone_in_q(q in 0.001f64..0.99, alpha in 2u32..64) {
            let a = rdp_subsampled_gaussian(q, 1.0, alpha).unwrap();
            let b = rdp_subsampled_gaussian((q * 1.01).min(1.0), 1.0, alpha).unwrap();
            prop_assert!(b >= a);
        }
    }
}
