//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! A mechanism is (α, ρ)-RDP if the order-α Rényi divergence between its
//! outputs on any two datasets differing in one record is at most ρ. RDP
//! composes additively over steps and converts to an (ε, δ) guarantee:
//! for every pair of adjacent datasets and every set of outputs S,
//! `Pr[M(D) ∈ S] ≤ e^ε Pr[M(D') ∈ S] + δ`.
//!
//! Per-step divergences are exact for the subsampled Gaussian: a log-domain
//! binomial expansion for integer orders and the erfc series of the same
//! integral for fractional orders.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Default Rényi orders.
pub const DEFAULT_ORDERS: [f64; 16] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0,
];

/// Upper end of the σ search in [`calibrate_sigma`].
pub const SIGMA_MAX: f64 = 1e4;
const SIGMA_MIN: f64 = 1e-2;
const CALIBRATION_TOLERANCE: f64 = 1e-3;

/// How an RDP curve is turned into an (ε, δ) statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    /// `ε = ρ(α) + ln(1/δ)/(α − 1)`.
    #[default]
    Simple,
    /// `ε = ρ(α) + ln((α − 1)/α) − (ln δ + ln α)/(α − 1)`.
    Tight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantConfig {
    #[serde(default = "default_orders")]
    pub orders: Vec<f64>,
    #[serde(default)]
    pub conversion: Conversion,
}

fn default_orders() -> Vec<f64> {
    DEFAULT_ORDERS.to_vec()
}

impl Default for AccountantConfig {
    fn default() -> Self {
        AccountantConfig {
            orders: default_orders(),
            conversion: Conversion::Simple,
        }
    }
}

impl AccountantConfig {
    /// The default orders plus 400 log-spaced orders in (1, 4096], with the
    /// tight conversion.
    pub fn fine() -> Self {
        let mut orders = default_orders();
        let (lo, hi) = (1.01f64.ln(), 4096f64.ln());
        orders.extend((0..400).map(|i| (lo + (hi - lo) * i as f64 / 399.0).exp()));
        orders.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orders.dedup();
        AccountantConfig {
            orders,
            conversion: Conversion::Tight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.orders.is_empty() || self.orders.iter().any(|&a| !(a > 1.0) || !a.is_finite()) {
            return Err(Error::config("accountant.orders", "orders must be finite and > 1"));
        }
        Ok(())
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a − e^b)` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return erfc(x).ln();
    }
    // Asymptotic expansion; relative error below 1e-12 for x ≥ 25.
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)
        + 105.0 / (16.0 * x2 * x2 * x2 * x2);
    -x2 - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

fn ln_binomial(n: f64, k: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// `ln A_α` for integer α by the binomial expansion.
fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let a = alpha as f64;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(a, kf) + kf * lq + (a - kf) * l1q + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

/// `ln A_α` for fractional α by the erfc series.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let s2 = sigma * sigma;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    // Generalized binomial coefficient C(α, i), tracked by sign and log-magnitude.
    let mut coef_sign = 1.0f64;
    let mut log_coef = 0.0f64;
    for i in 0..100_000u32 {
        let fi = i as f64;
        if i > 0 {
            let ratio = (alpha - fi + 1.0) / fi;
            if ratio == 0.0 {
                break;
            }
            coef_sign *= ratio.signum();
            log_coef += ratio.abs().ln();
        }
        let j = alpha - fi;
        let log_t0 = log_coef + fi * q.ln() + j * (-q).ln_1p();
        let log_t1 = log_coef + j * q.ln() + fi * (-q).ln_1p();
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if coef_sign > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if fi > alpha && log_s0.max(log_s1) < -30.0 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// Order-α Rényi divergence of one Poisson-subsampled Gaussian step with
/// sampling rate `q` and noise multiplier `sigma` (sensitivity 1).
///
/// Returns `+∞` when `sigma == 0`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::config("alpha", format!("order {alpha} must exceed 1")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config("q", format!("sampling rate {q} outside [0, 1]")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if !(sigma > 0.0) {
        return Ok(f64::INFINITY);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= 1e6 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    Ok((log_a / (alpha - 1.0)).max(0.0))
}

/// ε at `delta` from an RDP curve, minimized over orders. Returns the
/// minimizing order alongside.
pub fn rdp_to_dp(orders: &[f64], rdp: &[f64], delta: f64, conversion: Conversion) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::NAN);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = match conversion {
            Conversion::Simple => r + (1.0 / delta).ln() / (a - 1.0),
            Conversion::Tight => r + ((a - 1.0) / a).ln() - (delta.ln() + a.ln()) / (a - 1.0),
        };
        if eps < best.0 {
            best = (eps, a);
        }
    }
    (best.0.max(0.0), best.1)
}

/// One run of identical steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u64,
}

/// Append-only record of executed mechanism steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    config: AccountantConfig,
    entries: Vec<LedgerEntry>,
    /// Accumulated RDP per order.
    rdp: Vec<f64>,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        PrivacyLedger::new(AccountantConfig::default())
    }
}

impl PrivacyLedger {
    pub fn new(config: AccountantConfig) -> Self {
        let rdp = vec![0.0; config.orders.len()];
        PrivacyLedger {
            config,
            entries: Vec::new(),
            rdp,
        }
    }

    pub fn config(&self) -> &AccountantConfig {
        &self.config
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    pub fn total_steps(&self) -> u64 {
        self.entries.iter().map(|e| e.steps).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_steps() == 0
    }

    /// Append `steps` executions of the mechanism with `(sigma, q)`.
    pub fn record(&mut self, noise_multiplier: f64, sampling_rate: f64, steps: u64) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        for (acc, &a) in self.rdp.iter_mut().zip(&self.config.orders) {
            *acc += steps as f64 * rdp_subsampled_gaussian(sampling_rate, noise_multiplier, a)?;
        }
        match self.entries.last_mut() {
            Some(last) if last.noise_multiplier == noise_multiplier && last.sampling_rate == sampling_rate => {
                last.steps += steps
            }
            _ => self.entries.push(LedgerEntry {
                noise_multiplier,
                sampling_rate,
                steps,
            }),
        }
        Ok(())
    }

    /// Spent ε at `delta`; `0` for an empty ledger.
    pub fn epsilon(&self, delta: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        rdp_to_dp(&self.config.orders, &self.rdp, delta, self.config.conversion).0
    }
}

/// Target guarantee; `epsilon = ∞` means non-private.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyTarget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyTarget {
    pub fn is_private(&self) -> bool {
        self.epsilon.is_finite()
    }
}

/// Compose the ledger's steps and convert at `delta`.
pub fn compose_and_convert(ledger: &PrivacyLedger, delta: f64) -> f64 {
    ledger.epsilon(delta)
}

/// A target guarantee and the training plan it must cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub target_epsilon: f64,
    pub target_delta: f64,
    pub dataset_size: usize,
    pub sampling_rate: f64,
    pub steps: u64,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_epsilon > 0.0) {
            return Err(Error::config("privacy.epsilon", "must be positive"));
        }
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return Err(Error::config("privacy.delta", "must lie in (0, 1)"));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::config("privacy.sampling_rate", "must lie in (0, 1]"));
        }
        if self.dataset_size == 0 {
            return Err(Error::config("privacy.dataset_size", "must be positive"));
        }
        Ok(())
    }
}

/// ε spent by `steps` steps at `(q, sigma)`.
pub fn epsilon_for(cfg: &AccountantConfig, q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    let mut ledger = PrivacyLedger::new(cfg.clone());
    ledger.record(sigma, q, steps)?;
    Ok(ledger.epsilon(delta))
}

/// Smallest noise multiplier (to relative tolerance 1e-3) whose planned
/// steps stay within the target ε.
pub fn calibrate_sigma(spec: &PrivacySpec, cfg: &AccountantConfig) -> Result<f64> {
    spec.validate()?;
    cfg.validate()?;
    if spec.steps == 0 {
        return Ok(0.0);
    }
    let eps = |s: f64| epsilon_for(cfg, spec.sampling_rate, s, spec.steps, spec.target_delta);
    let reached = eps(SIGMA_MAX)?;
    if reached > spec.target_epsilon {
        return Err(Error::Infeasible(format!(
            "σ = {SIGMA_MAX} still spends ε = {reached:.4} > target {}",
            spec.target_epsilon
        )));
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    if eps(lo)? <= spec.target_epsilon {
        return Ok(lo);
    }
    while hi / lo - 1.0 > CALIBRATION_TOLERANCE {
        let mid = (lo * hi).sqrt();
        if eps(mid)? <= spec.target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `δ = 1 / (2n)`.
pub fn delta_default(n: usize) -> f64 {
    1.0 / (2.0 * n as f64)
}
