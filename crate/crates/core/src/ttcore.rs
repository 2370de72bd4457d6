//! Tensor-Train shape planning, core initialization and checkpoints.
//!
//! A TT adapter represents `ΔW ∈ R^{d_out × d_in}` as a chain of third-order
//! cores. The chain runs over the input factors `m_1..m_p` first and then the
//! output factors `n_1..n_q`; the rank entering the first input core and the
//! rank leaving the last output core are both 1.
//!
//! Index convention: input index `i` corresponds to the multi-index
//! `(i_1..i_p)` taken row-major over the declared input factors, and likewise
//! for the output index over `(j_1..j_q)`. Every contraction in the crate
//! consumes `m_1` first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{contract, DenseTensor};

/// Standard deviation used by [`init_cores`] unless configured otherwise.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Largest `d_out * d_in` that [`reconstruct_delta_w`] will materialize.
pub const DEFAULT_RECONSTRUCT_LIMIT: usize = 4096 * 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTShapePlan {
    pub d_in: usize,
    pub d_out: usize,
    pub input_factors: Vec<usize>,
    pub output_factors: Vec<usize>,
    /// `r_0..r_{p+q}`, with both ends equal to 1.
    pub ranks: Vec<usize>,
    pub alpha: f64,
}

impl TTShapePlan {
    pub fn num_input_cores(&self) -> usize {
        self.input_factors.len()
    }

    pub fn num_output_cores(&self) -> usize {
        self.output_factors.len()
    }

    pub fn num_cores(&self) -> usize {
        self.input_factors.len() + self.output_factors.len()
    }

    /// Mode size of chain position `i` (input cores first).
    pub fn mode(&self, i: usize) -> usize {
        let p = self.num_input_cores();
        if i < p {
            self.input_factors[i]
        } else {
            self.output_factors[i - p]
        }
    }

    /// Shape `(r_{i}, mode_i, r_{i+1})` of chain position `i`.
    pub fn core_shape(&self, i: usize) -> [usize; 3] {
        [self.ranks[i], self.mode(i), self.ranks[i + 1]]
    }

    pub fn core_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.num_cores()).map(|i| self.core_shape(i)).collect()
    }

    /// Number of rank-`r` internal bonds, i.e. the "TT-rank" reported in sweeps.
    pub fn rank(&self) -> usize {
        self.ranks[1..self.ranks.len() - 1]
            .iter()
            .copied()
            .max()
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        check_factors(&self.input_factors, self.d_in)?;
        check_factors(&self.output_factors, self.d_out)?;
        let n = self.num_cores();
        if self.ranks.len() != n + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} ranks for {n} cores",
                self.ranks.len()
            )));
        }
        if self.ranks[0] != 1 || self.ranks[n] != 1 || self.ranks.contains(&0) {
            return Err(Error::InvalidRange(format!(
                "boundary ranks must be 1 and internal ranks positive: {:?}",
                self.ranks
            )));
        }
        Ok(())
    }
}

fn check_factors(factors: &[usize], expected: usize) -> Result<()> {
    let product: usize = factors.iter().product();
    if factors.is_empty() || factors.contains(&0) || product != expected {
        return Err(Error::FactorizationMismatch {
            factors: factors.to_vec(),
            product,
            expected,
        });
    }
    Ok(())
}

/// Builds a plan with uniform internal rank and unit boundary ranks.
pub fn plan_shapes(
    d_in: usize,
    d_out: usize,
    input_factors: &[usize],
    output_factors: &[usize],
    rank: usize,
    alpha: f64,
) -> Result<TTShapePlan> {
    check_factors(input_factors, d_in)?;
    check_factors(output_factors, d_out)?;
    if rank == 0 {
        return Err(Error::InvalidRange("TT rank must be at least 1".into()));
    }
    let n = input_factors.len() + output_factors.len();
    let mut ranks = vec![rank; n + 1];
    ranks[0] = 1;
    ranks[n] = 1;
    Ok(TTShapePlan {
        d_in,
        d_out,
        input_factors: input_factors.to_vec(),
        output_factors: output_factors.to_vec(),
        ranks,
        alpha,
    })
}

/// Trainable parameter count `Σ r_{k-1}·dim_k·r_k`.
pub fn param_count(plan: &TTShapePlan) -> usize {
    plan.core_shapes()
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum()
}

/// Trainable TT adapter: input cores `G_1..G_p`, output cores `G̃_1..G̃_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct TTAdapter {
    pub plan: TTShapePlan,
    pub input_cores: Vec<DenseTensor>,
    pub output_cores: Vec<DenseTensor>,
}

impl TTAdapter {
    /// Assembles an adapter from explicit cores, checking the chain shapes.
    pub fn from_cores(
        plan: TTShapePlan,
        input_cores: Vec<DenseTensor>,
        output_cores: Vec<DenseTensor>,
    ) -> Result<Self> {
        let adapter = Self {
            plan,
            input_cores,
            output_cores,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn alpha(&self) -> f64 {
        self.plan.alpha
    }

    pub fn num_cores(&self) -> usize {
        self.input_cores.len() + self.output_cores.len()
    }

    /// Core at chain position `i` (input cores first).
    pub fn core(&self, i: usize) -> &DenseTensor {
        let p = self.input_cores.len();
        if i < p {
            &self.input_cores[i]
        } else {
            &self.output_cores[i - p]
        }
    }

    pub fn core_mut(&mut self, i: usize) -> &mut DenseTensor {
        let p = self.input_cores.len();
        if i < p {
            &mut self.input_cores[i]
        } else {
            &mut self.output_cores[i - p]
        }
    }

    pub fn cores(&self) -> impl Iterator<Item = &DenseTensor> {
        self.input_cores.iter().chain(&self.output_cores)
    }

    /// Checks the plan and that every core shape chains with its neighbours.
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.input_cores.len() != self.plan.num_input_cores()
            || self.output_cores.len() != self.plan.num_output_cores()
        {
            return Err(Error::ShapeMismatch("core count differs from plan".into()));
        }
        for (i, core) in self.cores().enumerate() {
            let want = self.plan.core_shape(i);
            if core.shape() != want {
                return Err(Error::ShapeMismatch(format!(
                    "core {i} has shape {:?}, plan says {want:?}",
                    core.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.cores().map(DenseTensor::len).sum()
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint {
            plan: self.plan.clone(),
            alpha: self.plan.alpha,
            cores: self
                .cores()
                .map(|c| CoreRecord {
                    shape: c.shape().to_vec(),
                    data: c.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: AdapterCheckpoint) -> Result<Self> {
        let mut plan = ckpt.plan;
        plan.alpha = ckpt.alpha;
        plan.validate()?;
        if ckpt.cores.len() != plan.num_cores() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} cores, plan needs {}",
                ckpt.cores.len(),
                plan.num_cores()
            )));
        }
        let mut cores = ckpt
            .cores
            .into_iter()
            .map(|c| DenseTensor::new(c.shape, c.data))
            .collect::<Result<Vec<_>>>()?;
        let output_cores = cores.split_off(plan.num_input_cores());
        Self::from_cores(plan, cores, output_cores)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(json)?)
    }
}

/// On-disk form of one adapter: `{plan, alpha, cores: [{shape, data}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub plan: TTShapePlan,
    pub alpha: f64,
    pub cores: Vec<CoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Common core std under which the chain, run with its last core random
/// too, maps unit-variance inputs to unit-variance outputs on average.
///
/// Each input core sums over `m_k·r_{k-1}` terms and each output core over
/// `r_{p+ℓ-1}`; the std solves `Π fan_in · std^{2K} = 1` for `K` cores.
pub fn unit_gain_std(plan: &TTShapePlan) -> f64 {
    let shapes = plan.core_shapes();
    let p = plan.num_input_cores();
    let log_fan: f64 = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| if i < p { (s[0] * s[1]) as f64 } else { s[0] as f64 })
        .map(f64::ln)
        .sum();
    (-log_fan / (2.0 * shapes.len() as f64)).exp()
}

/// Samples every core from `N(0, std²)` except the last output core, which
/// is zero so the adapter starts as the zero map.
pub fn init_cores(plan: &TTShapePlan, seed: u64, std: f64) -> Result<TTAdapter> {
    plan.validate()?;
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidRange(format!("init std must be > 0, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std checked above");
    let last = plan.num_cores() - 1;
    let mut cores: Vec<DenseTensor> = plan
        .core_shapes()
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let mut core = DenseTensor::zeros(shape);
            if i != last {
                for v in core.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
            core
        })
        .collect();
    let output_cores = cores.split_off(plan.num_input_cores());
    TTAdapter::from_cores(plan.clone(), cores, output_cores)
}

/// Materializes `ΔW` (without `α`) as a `(d_out, d_in)` matrix.
pub fn reconstruct_delta_w(adapter: &TTAdapter) -> Result<DenseTensor> {
    reconstruct_delta_w_with_limit(adapter, DEFAULT_RECONSTRUCT_LIMIT)
}

pub fn reconstruct_delta_w_with_limit(adapter: &TTAdapter, limit: usize) -> Result<DenseTensor> {
    let plan = &adapter.plan;
    if plan.d_out.saturating_mul(plan.d_in) > limit {
        return Err(Error::DimTooLarge {
            rows: plan.d_out,
            cols: plan.d_in,
            limit,
        });
    }
    // Left block: (d_in, r_p) in row-major input order.
    let mut left = DenseTensor::filled(&[1, 1], 1.0);
    for core in &adapter.input_cores {
        let rows = left.shape()[0];
        let [r0, m, r1] = [core.shape()[0], core.shape()[1], core.shape()[2]];
        debug_assert_eq!(left.shape()[1], r0);
        left = contract(&left, core, &[1], &[0])?.into_reshape(&[rows * m, r1])?;
    }
    // Right block: (r_p, d_out) in row-major output order.
    let mut right = DenseTensor::filled(&[1, 1], 1.0);
    for core in adapter.output_cores.iter().rev() {
        let cols = right.shape()[1];
        let [r0, n, r1] = [core.shape()[0], core.shape()[1], core.shape()[2]];
        debug_assert_eq!(right.shape()[0], r1);
        right = contract(core, &right, &[2], &[0])?.into_reshape(&[r0, n * cols])?;
    }
    // ΔW[out, in] = Σ_a right[a, out] · left[in, a]
    contract(&right, &left, &[0], &[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(plan: &TTShapePlan) -> Vec<Vec<usize>> {
        plan.core_shapes().iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn unit_gain_std_keeps_scale() {
        let plan = plan_shapes(64, 64, &[4, 4, 4], &[4, 4, 4], 2, 1.0).unwrap();
        let std = unit_gain_std(&plan);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        let trials = 200;
        for seed in 0..trials {
            let mut a = init_cores(&plan, seed, std).unwrap();
            let last = a.num_cores() - 1;
            let shape = a.core(last).shape().to_vec();
            *a.core_mut(last) = DenseTensor::new(shape.clone(), (0..shape.iter().product()).map(|_| std * normal.sample(&mut rng)).collect()).unwrap();
            let x: Vec<f64> = (0..64).map(|_| normal.sample(&mut rng)).collect();
            let (y, _) = crate::adapter::tt_chain_token(&x, &a).unwrap();
            total += y.iter().map(|v| v * v).sum::<f64>() / 64.0;
        }
        let gain = total / trials as f64;
        assert!(gain > 0.3 && gain < 3.0, "{gain}");
    }

    #[test]
    fn attention_example_shapes() {
        // Conv1D orientation: 768 inputs expanded to 2304 outputs.
        let plan = plan_shapes(768, 2304, &[64, 4, 3], &[3, 3, 4, 64], 2, 1.0).unwrap();
        assert_eq!(
            shapes(&plan),
            vec![
                vec![1, 64, 2],
                vec![2, 4, 2],
                vec![2, 3, 2],
                vec![2, 3, 2],
                vec![2, 3, 2],
                vec![2, 4, 2],
                vec![2, 64, 1],
            ]
        );
        assert_eq!(param_count(&plan), 324);
    }

    #[test]
    fn projection_and_total_counts() {
        let proj = plan_shapes(768, 768, &[64, 4, 3], &[3, 4, 64], 2, 1.0).unwrap();
        assert_eq!(param_count(&proj), 312);
        let attn = plan_shapes(768, 2304, &[64, 4, 3], &[3, 3, 4, 64], 2, 1.0).unwrap();
        assert_eq!((param_count(&attn) + param_count(&proj)) * 12, 7632);
    }

    #[test]
    fn minimal_chain() {
        let plan = plan_shapes(2, 2, &[2], &[2], 1, 1.0).unwrap();
        assert_eq!(shapes(&plan), vec![vec![1, 2, 1], vec![1, 2, 1]]);
    }

    #[test]
    fn bad_factorization() {
        let err = plan_shapes(10, 4, &[3, 3], &[2, 2], 2, 1.0).unwrap_err();
        assert!(matches!(
            err,
            Error::FactorizationMismatch { product: 9, expected: 10, .. }
        ));
        assert!(plan_shapes(4, 4, &[2, 2], &[2, 2], 0, 1.0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_zero_tailed() {
        let plan = plan_shapes(16, 8, &[4, 4], &[2, 4], 3, 1.0).unwrap();
        let a = init_cores(&plan, 7, DEFAULT_INIT_STD).unwrap();
        let b = init_cores(&plan, 7, DEFAULT_INIT_STD).unwrap();
        assert_eq!(a, b);
        assert!(a.output_cores.last().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.input_cores[0].data().iter().any(|&v| v != 0.0));
        assert!(init_cores(&plan, 7, 0.0).is_err());
    }

    #[test]
    fn different_seeds_differ() {
        let plan = plan_shapes(16, 8, &[4, 4], &[2, 4], 2, 1.0).unwrap();
        let base = init_cores(&plan, 0, DEFAULT_INIT_STD).unwrap();
        for seed in 1..10 {
            assert_ne!(init_cores(&plan, seed, DEFAULT_INIT_STD).unwrap(), base);
        }
    }

    #[test]
    fn ones_adapter_reconstructs_ones() {
        let plan = plan_shapes(2, 2, &[2], &[2], 1, 1.0).unwrap();
        let ones = DenseTensor::filled(&[1, 2, 1], 1.0);
        let adapter = TTAdapter::from_cores(plan, vec![ones.clone()], vec![ones]).unwrap();
        let dw = reconstruct_delta_w(&adapter).unwrap();
        assert_eq!(dw.shape(), &[2, 2]);
        assert_eq!(dw.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_tail_reconstructs_zero() {
        let plan = plan_shapes(6, 6, &[2, 3], &[3, 2], 2, 1.0).unwrap();
        let adapter = init_cores(&plan, 1, 0.5).unwrap();
        assert_eq!(reconstruct_delta_w(&adapter).unwrap().l2_norm_sq(), 0.0);
    }

    #[test]
    fn reconstruct_guard() {
        let plan = plan_shapes(64, 64, &[8, 8], &[8, 8], 2, 1.0).unwrap();
        let adapter = init_cores(&plan, 1, 0.1).unwrap();
        assert!(matches!(
            reconstruct_delta_w_with_limit(&adapter, 100),
            Err(Error::DimTooLarge { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let plan = plan_shapes(12, 6, &[3, 4], &[2, 3], 2, 0.37).unwrap();
        let mut adapter = init_cores(&plan, 11, 0.3).unwrap();
        adapter.output_cores[1].data_mut()[0] = std::f64::consts::PI * 1e-17;
        let json = adapter.to_json().unwrap();
        let back = TTAdapter::from_json(&json).unwrap();
        for (a, b) in adapter.cores().zip(back.cores()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.plan, adapter.plan);
    }

    #[test]
    fn checkpoint_rejects_bad_core_shape() {
        let plan = plan_shapes(4, 4, &[2, 2], &[2, 2], 2, 1.0).unwrap();
        let adapter = init_cores(&plan, 1, 0.1).unwrap();
        let mut ckpt = adapter.to_checkpoint();
        ckpt.cores[1].shape = vec![2, 1, 4];
        assert!(TTAdapter::from_checkpoint(ckpt).is_err());
    }
}
