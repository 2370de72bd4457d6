//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Integer orders use the binomial expansion of `A_α`; fractional orders use
//! the two-sided series with `erfc` tails. Without subsampling (`q = 1`) the
//! exact Gaussian value `α / 2σ²` is used. RDP composes additively over steps
//! and converts to `(ε, δ)` as `ε = RDP(α) + ln(1/δ)/(α − 1)`, minimized over
//! the order grid.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const MAX_SERIES_TERMS: usize = 100_000;
const MAX_CALIBRATION_ITERS: usize = 200;

/// `{1.25, 1.5, …, 63.5} ∪ {64, 128, 256}`.
pub fn default_orders() -> Vec<f64> {
    (5..=254)
        .map(|i| f64::from(i) / 4.0)
        .chain([64.0, 128.0, 256.0])
        .collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        // cancellation down to (numerically) nothing
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        let v = erfc(x);
        if v > 0.0 {
            return v.ln();
        }
    }
    // asymptotic expansion for large x
    let x2 = x * x;
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln()
        + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)).ln()
}

fn ln_binomial(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

fn log_a_integer(q: f64, sigma: f64, order: u64) -> f64 {
    let alpha = order as f64;
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=order {
        let i = i as f64;
        let term = ln_binomial(alpha, i) + i * lq + (alpha - i) * l1q + (i * i - i) / (2.0 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    log_a
}

fn log_a_fractional(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    // generalized binomial coefficient C(alpha, i), tracked as sign and log|.|
    let mut log_coef = 0.0;
    let mut positive = true;
    for i in 0..MAX_SERIES_TERMS {
        let fi = i as f64;
        if i > 0 {
            let factor = (alpha - fi + 1.0) / fi;
            if factor == 0.0 {
                break;
            }
            log_coef += factor.abs().ln();
            if factor < 0.0 {
                positive = !positive;
            }
        }
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// Per-step RDP of the subsampled Gaussian mechanism at one order.
pub fn rdp_per_step(q: f64, sigma: f64, order: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return order / (2.0 * sigma * sigma);
    }
    let log_a = if order.fract() == 0.0 {
        log_a_integer(q, sigma, order as u64)
    } else {
        log_a_fractional(q, sigma, order)
    };
    let rdp = log_a / (order - 1.0);
    if rdp.is_nan() {
        f64::INFINITY
    } else {
        rdp.max(0.0)
    }
}

/// Smallest `ε` over the grid and the order attaining it.
pub fn epsilon_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> (f64, f64) {
    let log_inv_delta = (1.0 / delta).ln();
    orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| (r + log_inv_delta / (a - 1.0), a))
        .fold((f64::INFINITY, orders[0]), |best, cand| if cand.0 < best.0 { cand } else { best })
}

fn check_inputs(sigma: f64, q: f64, delta: f64, orders: &[f64]) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidRange(format!("noise multiplier must be > 0, got {sigma}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidRange(format!("sampling rate must be in (0, 1], got {q}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidRange(format!("delta must be in (0, 1), got {delta}")));
    }
    if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0)) {
        return Err(Error::InvalidRange("orders must be nonempty and > 1".into()));
    }
    Ok(())
}

/// `(ε, best order)` after `steps` compositions.
pub fn rdp_epsilon(sigma: f64, q: f64, steps: u64, delta: f64, orders: &[f64]) -> Result<(f64, f64)> {
    check_inputs(sigma, q, delta, orders)?;
    let rdp: Vec<f64> = orders
        .iter()
        .map(|&a| steps as f64 * rdp_per_step(q, sigma, a))
        .collect();
    Ok(epsilon_from_rdp(orders, &rdp, delta))
}

/// Noise multiplier whose `ε` lies in `[target·(1 − 1e-3), target]`.
pub fn calibrate_sigma(q: f64, steps: u64, target_epsilon: f64, delta: f64, orders: &[f64]) -> Result<f64> {
    if !(target_epsilon > 0.0 && target_epsilon.is_finite()) {
        return Err(Error::InvalidRange(format!("target epsilon must be > 0, got {target_epsilon}")));
    }
    check_inputs(1.0, q, delta, orders)?;
    let eps = |sigma: f64| -> Result<f64> {
        let e = rdp_epsilon(sigma, q, steps, delta, orders)?.0;
        Ok(if e.is_nan() { f64::INFINITY } else { e })
    };
    let floor = target_epsilon * (1.0 - 1e-3);

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut iters = 0;
    while eps(hi)? > target_epsilon {
        lo = hi;
        hi *= 2.0;
        iters += 1;
        if iters > 64 {
            return Err(Error::NoConvergence(iters));
        }
    }
    for _ in 0..MAX_CALIBRATION_ITERS {
        if eps(hi)? >= floor {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NoConvergence(MAX_CALIBRATION_ITERS))
}

/// Accumulated RDP across training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
    pub steps: u64,
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new(default_orders())
    }
}

impl AccountantState {
    pub fn new(orders: Vec<f64>) -> Self {
        let rdp = vec![0.0; orders.len()];
        Self { orders, rdp, steps: 0 }
    }

    /// Composes one step of the mechanism with noise `sigma` and rate `q`.
    pub fn step(&mut self, sigma: f64, q: f64) {
        for (r, &a) in self.rdp.iter_mut().zip(&self.orders) {
            *r += rdp_per_step(q, sigma, a);
        }
        self.steps += 1;
    }

    pub fn epsilon(&self, delta: f64) -> (f64, f64) {
        if self.steps == 0 {
            return (0.0, self.orders[0]);
        }
        epsilon_from_rdp(&self.orders, &self.rdp, delta)
    }
}

/// One line of the privacy ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: u64,
    pub sigma: f64,
    pub q: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub best_order: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn orders_grid() {
        let o = default_orders();
        assert_eq!(o[0], 1.25);
        assert_eq!(o[o.len() - 4], 63.5);
        assert_eq!(&o[o.len() - 3..], &[64.0, 128.0, 256.0]);
        assert_eq!(o.len(), 250 + 3);
    }

    #[test]
    fn full_batch_gaussian_matches_closed_form() {
        // min over real α of α/2 + ln(1e5)/(α − 1) is at α = 1 + sqrt(2 ln 1e5).
        let l = (1e5f64).ln();
        let a = 1.0 + (2.0 * l).sqrt();
        let analytic = a / 2.0 + l / (a - 1.0);
        assert!((analytic - 5.298).abs() < 1e-3);
        let (eps, order) = rdp_epsilon(1.0, 1.0, 1, 1e-5, &default_orders()).unwrap();
        assert!((eps - analytic).abs() / analytic < 0.02);
        assert!((order - a).abs() < 0.25);
    }

    #[test]
    fn full_batch_rdp_is_exact() {
        let mut acc = AccountantState::default();
        for _ in 0..7 {
            acc.step(1.3, 1.0);
        }
        for (&a, &r) in acc.orders.iter().zip(&acc.rdp) {
            assert!((r - a * 7.0 / (2.0 * 1.3 * 1.3)).abs() <= 1e-12 * r);
        }
    }

    #[test]
    fn integer_order_two_closed_form() {
        // A_2 = 1 + q²(e^{1/σ²} − 1)
        let (q, s) = (0.1f64, 1.5f64);
        let want = (1.0 + q * q * ((1.0 / (s * s)).exp() - 1.0)).ln();
        assert!((rdp_per_step(q, s, 2.0) - want).abs() < 1e-14);
    }

    #[test]
    fn fractional_orders_interpolate_integer_neighbours() {
        let (q, s) = (0.05, 1.1);
        for a in [2.0, 3.0, 5.0, 10.0] {
            let lo = rdp_per_step(q, s, a);
            let mid = rdp_per_step(q, s, a + 0.5);
            let hi = rdp_per_step(q, s, a + 1.0);
            assert!(lo <= mid && mid <= hi, "order {a}: {lo} {mid} {hi}");
        }
    }

    #[test]
    fn log_erfc_branches_meet() {
        let direct = erfc(20.0).ln();
        let x2 = 400.0f64;
        let asym = -x2 - 20f64.ln() - 0.5 * std::f64::consts::PI.ln()
            + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2)).ln();
        assert!((direct - asym).abs() < 1e-8);
        assert!(log_erfc(40.0).is_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let o = default_orders();
        assert!(rdp_epsilon(0.0, 0.5, 1, 1e-5, &o).is_err());
        assert!(rdp_epsilon(1.0, 0.0, 1, 1e-5, &o).is_err());
        assert!(rdp_epsilon(1.0, 0.5, 1, 1.0, &o).is_err());
        assert!(rdp_epsilon(1.0, 0.5, 1, 1e-5, &[1.0]).is_err());
        assert!(calibrate_sigma(0.1, 10, 0.0, 1e-5, &o).is_err());
    }

    #[test]
    fn calibration_round_trips() {
        let o = default_orders();
        let delta = 3750f64.powf(-1.1);
        assert!((delta - 1.17e-4).abs() < 0.01e-4);
        let mut last = f64::INFINITY;
        for target in [0.5, 1.0, 3.0, 5.0] {
            let sigma = calibrate_sigma(32.0 / 3750.0, 1000, target, delta, &o).unwrap();
            let (eps, _) = rdp_epsilon(sigma, 32.0 / 3750.0, 1000, delta, &o).unwrap();
            assert!(eps <= target && eps >= target * (1.0 - 1e-3), "{target}: {eps}");
            assert!(sigma < last);
            last = sigma;
        }
    }

    #[test]
    fn ledger_serializes() {
        let e = LedgerEntry { step: 3, sigma: 1.0, q: 0.1, delta: 1e-5, epsilon: 2.0, best_order: 8.0 };
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"best_order\":8.0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn subsampling_never_hurts(q in 0.001f64..0.999, sigma in 0.5f64..5.0, idx in 0usize..253) {
            let order = default_orders()[idx];
            let sub = rdp_per_step(q, sigma, order);
            let full = rdp_per_step(1.0, sigma, order);
            prop_assert!(sub <= full * (1.0 + 1e-9), "q={q} σ={sigma} α={order}: {sub} > {full}");
        }
    }
}
