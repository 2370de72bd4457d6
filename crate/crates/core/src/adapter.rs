//! Adapted linear layers: a frozen base weight plus a TT chain or a LoRA pair.
//!
//! The TT forward pass contracts each token through the input cores (which
//! shrinks it down to the rank bond) and then expands it through the output
//! cores. Every state that enters a core is kept in a [`ContractionCache`] so
//! per-example gradients can be formed later without another forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{contract, matvec, DenseTensor};
use crate::ttcore::{TTAdapter, TTShapePlan};

/// Pre-core states for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStates {
    /// `S_0..S_{p-1}`; `S_{k-1}` has shape `(r_{k-1}, m_k, …, m_p)`.
    pub input: Vec<DenseTensor>,
    /// `T_0..T_{q-1}`; `T_{ℓ-1}` has shape `(r_{p+ℓ-1}, n_1, …, n_{ℓ-1})`.
    pub output: Vec<DenseTensor>,
}

impl TokenStates {
    pub fn num_floats(&self) -> usize {
        self.input.iter().chain(&self.output).map(DenseTensor::len).sum()
    }
}

/// Cached pre-core states for every `(example, token)` of one forward pass.
#[derive(Debug, Clone)]
pub struct ContractionCache {
    batch: usize,
    seq: usize,
    tokens: Vec<TokenStates>,
}

impl ContractionCache {
    pub fn new(batch: usize, seq: usize) -> Self {
        Self {
            batch,
            seq,
            tokens: Vec::with_capacity(batch * seq),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn push(&mut self, states: TokenStates) {
        self.tokens.push(states);
    }

    pub fn token(&self, example: usize, token: usize) -> Result<&TokenStates> {
        if token >= self.seq {
            return Err(Error::CacheMissing { example, token });
        }
        self.tokens
            .get(example * self.seq + token)
            .ok_or(Error::CacheMissing { example, token })
    }

    /// Total cached floats across all tokens.
    pub fn num_floats(&self) -> usize {
        self.tokens.iter().map(TokenStates::num_floats).sum()
    }
}

/// Exact number of cached floats per token for `plan`.
pub fn cache_floats_per_token(plan: &TTShapePlan) -> usize {
    let p = plan.num_input_cores();
    let input: usize = (0..p)
        .map(|k| plan.ranks[k] * plan.input_factors[k..].iter().product::<usize>())
        .sum();
    let output: usize = (0..plan.num_output_cores())
        .map(|l| plan.ranks[p + l] * plan.output_factors[..l].iter().product::<usize>())
        .sum();
    input + output
}

/// One core step of the input contraction: `(r_{k-1}, m_k, rest…) → (r_k, rest…)`.
pub(crate) fn contract_input_core(state: &DenseTensor, core: &DenseTensor) -> Result<DenseTensor> {
    contract(state, core, &[0, 1], &[0, 1])?.last_axis_first()
}

/// One core step of the output expansion: `(r, n_1..n_{ℓ-1}) → (r', n_1..n_ℓ)`.
pub(crate) fn expand_output_core(state: &DenseTensor, core: &DenseTensor) -> Result<DenseTensor> {
    contract(state, core, &[0], &[0])?.last_axis_first()
}

/// Runs one token through the chain, returning `f_TT(x)` (without `α`) and
/// the pre-core states.
pub fn tt_chain_token(x_token: &[f64], adapter: &TTAdapter) -> Result<(Vec<f64>, TokenStates)> {
    let plan = &adapter.plan;
    if x_token.len() != plan.d_in {
        return Err(Error::ShapeMismatch(format!(
            "token has {} features, adapter expects {}",
            x_token.len(),
            plan.d_in
        )));
    }
    let mut shape = Vec::with_capacity(plan.num_input_cores() + 1);
    shape.push(1);
    shape.extend(&plan.input_factors);
    let mut state = DenseTensor::new(shape, x_token.to_vec())?;

    let mut input = Vec::with_capacity(plan.num_input_cores());
    for core in &adapter.input_cores {
        let next = contract_input_core(&state, core)?;
        input.push(std::mem::replace(&mut state, next));
    }
    let mut output = Vec::with_capacity(plan.num_output_cores());
    for core in &adapter.output_cores {
        let next = expand_output_core(&state, core)?;
        output.push(std::mem::replace(&mut state, next));
    }
    Ok((state.into_data(), TokenStates { input, output }))
}

/// Adapter output `α·f_TT(x)` for a single token of length `d_in`.
pub fn tt_apply(x_token: &DenseTensor, adapter: &TTAdapter) -> Result<DenseTensor> {
    if x_token.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected a single token, got shape {:?}",
            x_token.shape()
        )));
    }
    let (mut out, _) = tt_chain_token(x_token.data(), adapter)?;
    let alpha = adapter.alpha();
    out.iter_mut().for_each(|v| *v *= alpha);
    Ok(DenseTensor::vector(out))
}

fn batch_dims(x: &DenseTensor, d_in: usize) -> Result<(usize, usize)> {
    match x.shape() {
        &[b, s, d] if d == d_in => Ok((b, s)),
        other => Err(Error::ShapeMismatch(format!(
            "expected input (B, S, {d_in}), got {other:?}"
        ))),
    }
}

fn check_base(base_w: &DenseTensor, d_out: usize, d_in: usize) -> Result<()> {
    if base_w.shape() != [d_out, d_in] {
        return Err(Error::ShapeMismatch(format!(
            "base weight {:?}, expected [{d_out}, {d_in}]",
            base_w.shape()
        )));
    }
    Ok(())
}

/// `y = x·Wᵀ + α·f_TT(x)` over a `(B, S, d_in)` batch, caching pre-core states.
pub fn tt_forward(
    x: &DenseTensor,
    base_w: &DenseTensor,
    adapter: &TTAdapter,
) -> Result<(DenseTensor, ContractionCache)> {
    let (d_in, d_out) = (adapter.plan.d_in, adapter.plan.d_out);
    let (b, s) = batch_dims(x, d_in)?;
    check_base(base_w, d_out, d_in)?;
    let alpha = adapter.alpha();
    let mut y = vec![0.0; b * s * d_out];
    let mut cache = ContractionCache::new(b, s);
    for (x_tok, y_tok) in x.data().chunks_exact(d_in).zip(y.chunks_exact_mut(d_out)) {
        matvec(base_w.data(), d_in, x_tok, y_tok);
        let (f, states) = tt_chain_token(x_tok, adapter)?;
        for (o, v) in y_tok.iter_mut().zip(f) {
            *o += alpha * v;
        }
        cache.push(states);
    }
    Ok((DenseTensor::new(vec![b, s, d_out], y)?, cache))
}

/// Low-rank baseline adapter, `ΔW = B·A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAAdapter {
    /// `(r, d_in)`
    pub a: DenseTensor,
    /// `(d_out, r)`
    pub b: DenseTensor,
    pub alpha: f64,
}

impl LoRAAdapter {
    /// Gaussian `A`, zero `B`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64, std: f64) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::InvalidRange("LoRA dimensions must be positive".into()));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidRange(format!("init std must be > 0, got {std}")));
        }
        let normal = Normal::new(0.0, std).expect("std checked above");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DenseTensor::zeros(&[rank, d_in]);
        for v in a.data_mut() {
            *v = normal.sample(&mut rng);
        }
        Ok(Self {
            a,
            b: DenseTensor::zeros(&[d_out, rank]),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Adds `α·B·A·x` to `out` and returns the bottleneck `A·x`.
    pub(crate) fn apply_token(&self, x: &[f64], out: &mut [f64]) -> Vec<f64> {
        let r = self.rank();
        let mut hidden = vec![0.0; r];
        matvec(self.a.data(), self.d_in(), x, &mut hidden);
        for (o, row) in out.iter_mut().zip(self.b.data().chunks_exact(r)) {
            let v: f64 = row.iter().zip(&hidden).map(|(p, q)| p * q).sum();
            *o += self.alpha * v;
        }
        hidden
    }
}

/// `y = x·Wᵀ + α·x·Aᵀ·Bᵀ` for any input whose last axis is `d_in`.
pub fn lora_forward(x: &DenseTensor, base_w: &DenseTensor, lora: &LoRAAdapter) -> Result<DenseTensor> {
    let (d_in, d_out) = (lora.d_in(), lora.d_out());
    if lora.b.shape()[1] != lora.rank() {
        return Err(Error::ShapeMismatch("LoRA factors disagree on rank".into()));
    }
    if x.shape().last() != Some(&d_in) {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not end in {d_in}",
            x.shape()
        )));
    }
    check_base(base_w, d_out, d_in)?;
    let tokens = x.len() / d_in;
    let mut y = vec![0.0; tokens * d_out];
    for (x_tok, y_tok) in x.data().chunks_exact(d_in).zip(y.chunks_exact_mut(d_out)) {
        matvec(base_w.data(), d_in, x_tok, y_tok);
        lora.apply_token(x_tok, y_tok);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    DenseTensor::new(shape, y)
}
