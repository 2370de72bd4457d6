//! Two-pass ghost-clipping DP-SGD.
//!
//! A step runs the forward pass once, computes exact per-example gradient
//! norms from the cached states (first backward pass), turns them into clip
//! coefficients, then runs a second backward pass on the reweighted loss
//! `Σ_b c_b·ℓ_b`. The resulting sum of clipped gradients gets Gaussian noise
//! of scale `σ·C` and the optimizer divides by the expected batch size.

pub mod accountant;
pub mod sampling;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persample::PerExampleNorms;
use crate::tensor::DenseTensor;

pub use accountant::{calibrate_sigma, default_orders, rdp_epsilon, AccountantState, LedgerEntry};

pub const DEFAULT_TAU: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub clip_c: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub delta: f64,
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl PrivacySpec {
    pub fn new(clip_c: f64, noise_multiplier: f64, sampling_rate: f64, delta: f64) -> Self {
        Self {
            clip_c,
            noise_multiplier,
            sampling_rate,
            delta,
            target_epsilon: None,
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_c > 0.0) {
            return Err(Error::InvalidRange(format!("clip bound must be > 0, got {}", self.clip_c)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "noise multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::InvalidRange(format!(
                "sampling rate must be in (0, 1], got {}",
                self.sampling_rate
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidRange(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidRange(format!("tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }

    /// Standard deviation of the per-entry noise, `σ·C`.
    pub fn noise_std(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            0.0
        } else {
            self.noise_multiplier * self.clip_c
        }
    }
}

/// Identity of one forward pass, used to reject coefficients from another batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchId(pub u64);

impl BatchId {
    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        Self(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// `c_b = min(1, C / (‖g_b‖ + τ))`.
pub fn clip_coefficients(norms: &[f64], spec: &PrivacySpec) -> Vec<f64> {
    norms
        .iter()
        .map(|&n| (spec.clip_c / (n + spec.tau)).min(1.0))
        .collect()
}

/// Clip coefficients bound to the forward pass they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipCoefficients {
    pub batch: BatchId,
    pub values: Vec<f64>,
}

/// A forward pass with cached states and layer upstreams.
pub trait ForwardPass {
    fn batch_id(&self) -> BatchId;
    fn batch_size(&self) -> usize;
    /// Mean per-example training loss of the pass.
    fn mean_loss(&self) -> f64;
}

/// A model whose trainable tensors support ghost clipping.
pub trait GhostClipModel {
    type Example;
    type Pass: ForwardPass;

    /// Forward pass plus loss backward down to every adapted layer output.
    fn forward_pass(&self, batch: &[&Self::Example]) -> Result<Self::Pass>;

    /// First backward pass: exact per-example norms over all trainable tensors.
    fn per_example_norms(&self, pass: &Self::Pass) -> Result<PerExampleNorms>;

    /// Second backward pass on `Σ_b w_b·ℓ_b`, one tensor per trainable parameter.
    fn weighted_grads(&self, pass: &Self::Pass, weights: &[f64]) -> Result<Vec<DenseTensor>>;

    /// Trainable tensors in the same order as [`Self::weighted_grads`].
    fn trainable_mut(&mut self) -> Vec<&mut DenseTensor>;
}

/// `Σ_b c_b·g_b` via the reweighted second backward pass.
pub fn clipped_aggregate<M: GhostClipModel>(
    model: &M,
    pass: &M::Pass,
    coefficients: &ClipCoefficients,
) -> Result<Vec<DenseTensor>> {
    if coefficients.batch != pass.batch_id() {
        return Err(Error::StaleCoefficients {
            expected: pass.batch_id().0,
            actual: coefficients.batch.0,
        });
    }
    model.weighted_grads(pass, &coefficients.values)
}

/// Adds i.i.d. `N(0, σ²C²)` noise to every entry using a generator seeded by `rng_seed`.
pub fn add_noise(grad: &DenseTensor, spec: &PrivacySpec, rng_seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    add_noise_with(grad, spec.noise_std(), &mut rng)
}

pub fn add_noise_with(grad: &DenseTensor, std: f64, rng: &mut impl Rng) -> DenseTensor {
    let mut out = grad.clone();
    if std == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, std).expect("finite noise scale");
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out
}

/// What one private step saw, for instrumentation and logging.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub batch_size: usize,
    pub mean_loss: f64,
    pub norms: Vec<f64>,
    pub coefficients: Vec<f64>,
}

/// Settings of the plain SGD update that follows aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Divisor for the noisy gradient sum, `q·N` under Poisson sampling.
    pub expected_batch: f64,
}

/// One ghost-clipping DP-SGD step; advances `accountant` by one composition.
pub fn dp_step<M: GhostClipModel>(
    model: &mut M,
    batch: &[&M::Example],
    spec: &PrivacySpec,
    sgd: SgdConfig,
    accountant: &mut AccountantState,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    spec.validate()?;
    let pass = model.forward_pass(batch)?;
    let norms = model.per_example_norms(&pass)?;
    let coefficients = ClipCoefficients {
        batch: pass.batch_id(),
        values: clip_coefficients(&norms.global_norm, spec),
    };
    let summed = clipped_aggregate(model, &pass, &coefficients)?;
    let std = spec.noise_std();
    let scale = sgd.learning_rate / sgd.expected_batch;
    for (param, grad) in model.trainable_mut().into_iter().zip(&summed) {
        let noisy = add_noise_with(grad, std, rng);
        param.axpy(-scale, &noisy)?;
    }
    accountant.step(spec.noise_multiplier, spec.sampling_rate);
    Ok(StepReport {
        batch_size: pass.batch_size(),
        mean_loss: pass.mean_loss(),
        norms: norms.global_norm,
        coefficients: coefficients.values,
    })
}

/// Plain SGD on the summed per-example gradients, with the same divisor as [`dp_step`].
pub fn sgd_step<M: GhostClipModel>(model: &mut M, batch: &[&M::Example], sgd: SgdConfig) -> Result<f64> {
    let pass = model.forward_pass(batch)?;
    let ones = vec![1.0; pass.batch_size()];
    let summed = model.weighted_grads(&pass, &ones)?;
    let scale = sgd.learning_rate / sgd.expected_batch;
    for (param, grad) in model.trainable_mut().into_iter().zip(&summed) {
        param.axpy(-scale, grad)?;
    }
    Ok(pass.mean_loss())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: f64, sigma: f64) -> PrivacySpec {
        PrivacySpec::new(c, sigma, 0.1, 1e-5)
    }

    #[test]
    fn coefficient_formula() {
        let mut s = spec(1.0, 1.0);
        s.tau = 0.0;
        assert_eq!(clip_coefficients(&[2.0, 0.5], &s), vec![0.5, 1.0]);
        let s = spec(1.0, 1.0);
        assert_eq!(clip_coefficients(&[0.0], &s), vec![1.0]);
        for n in [1e-3, 0.9, 1.0, 5.0, 1e6] {
            let c = clip_coefficients(&[n], &s)[0];
            assert!(c * n < 1.0 || (c == 1.0 && n < 1.0));
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let g = DenseTensor::vector(vec![1.0, -2.0, 3.5]);
        let out = add_noise(&g, &spec(1.0, 0.0), 9);
        assert_eq!(out, g);
        let inf = add_noise(&g, &spec(f64::INFINITY, 0.0), 9);
        assert_eq!(inf, g);
    }

    #[test]
    fn noise_is_seeded() {
        let g = DenseTensor::zeros(&[16]);
        let s = spec(0.7, 1.3);
        assert_eq!(add_noise(&g, &s, 5), add_noise(&g, &s, 5));
        assert_ne!(add_noise(&g, &s, 5), add_noise(&g, &s, 6));
    }

    #[test]
    fn noise_variance_matches() {
        let s = spec(0.5, 2.0);
        let g = DenseTensor::zeros(&[100_000]);
        let noisy = add_noise(&g, &s, 17);
        let n = noisy.len() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = 2.0f64.powi(2) * 0.5f64.powi(2);
        assert!((var - want).abs() / want < 0.05, "variance {var}");
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1.0, 1.0).validate().is_ok());
        assert!(spec(0.0, 1.0).validate().is_err());
        assert!(spec(1.0, -1.0).validate().is_err());
        let mut s = spec(1.0, 1.0);
        s.sampling_rate = 0.0;
        assert!(s.validate().is_err());
        s.sampling_rate = 1.0;
        s.delta = 3750f64.powf(-1.1);
        assert!(s.validate().is_ok());
    }
}
