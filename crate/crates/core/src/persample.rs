//! Per-example backpropagation through TT cores from cached forward states.
//!
//! The upstream `α·Δ(b,t)` is walked right-to-left through the output cores
//! and then through the input cores `p..1`. Each core's per-token gradient is
//! formed from the cotangent arriving at it and the cached state that entered
//! it, before the cotangent is pushed further left, so only one cotangent per
//! token is live at a time.
//!
//! A per-example gradient is the sum of its per-token gradients. The norm pass
//! accumulates that sum one example at a time and keeps only its squared norm.

use std::collections::BTreeMap;

use crate::adapter::{ContractionCache, LoRAAdapter, TokenStates};
use crate::error::{Error, Result};
use crate::tensor::{contract, matvec, matvec_t_acc, outer_acc, DenseTensor};
use crate::ttcore::{TTAdapter, TTShapePlan};

/// Squared per-example norms per trainable tensor, plus the global norm.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerExampleNorms {
    /// parameter id → `‖g_θ^{(b)}‖²` for each example `b`.
    pub per_param_sq: BTreeMap<String, Vec<f64>>,
    /// `‖g_b‖₂` for each example.
    pub global_norm: Vec<f64>,
}

impl PerExampleNorms {
    /// Builds norms from per-parameter squared norms, reducing in key order.
    pub fn from_squares(per_param_sq: BTreeMap<String, Vec<f64>>, batch: usize) -> Self {
        let mut total = vec![0.0; batch];
        for sq in per_param_sq.values() {
            for (t, v) in total.iter_mut().zip(sq) {
                *t += v;
            }
        }
        Self {
            per_param_sq,
            global_norm: total.into_iter().map(f64::sqrt).collect(),
        }
    }

    /// Merges the parameter maps of several layers, prefixing their ids.
    pub fn combine<'a>(parts: impl IntoIterator<Item = (&'a str, PerExampleNorms)>, batch: usize) -> Self {
        let mut merged = BTreeMap::new();
        for (prefix, part) in parts {
            for (id, sq) in part.per_param_sq {
                merged.insert(format!("{prefix}.{id}"), sq);
            }
        }
        Self::from_squares(merged, batch)
    }

    pub fn batch(&self) -> usize {
        self.global_norm.len()
    }
}

/// Identifier of chain position `i`: `in{k}` or `out{ℓ}` (zero-based).
pub fn core_id(plan: &TTShapePlan, i: usize) -> String {
    let p = plan.num_input_cores();
    if i < p {
        format!("in{i}")
    } else {
        format!("out{}", i - p)
    }
}

/// Per-token cotangents flowing through the chain.
#[derive(Debug, Clone)]
pub struct UpstreamState {
    batch: usize,
    seq: usize,
    cotangents: Vec<DenseTensor>,
}

impl UpstreamState {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn get(&self, example: usize, token: usize) -> &DenseTensor {
        &self.cotangents[example * self.seq + token]
    }
}

/// Reshapes `α·Δ(b,t)` into `C_q(b,t)` with shape `(1, n_1, …, n_q)`.
pub fn seed_upstream(delta: &DenseTensor, alpha: f64, plan: &TTShapePlan) -> Result<UpstreamState> {
    let (batch, seq) = match delta.shape() {
        &[b, s, d] if d == plan.d_out => (b, s),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "upstream {other:?}, expected (B, S, {})",
                plan.d_out
            )))
        }
    };
    let cotangents = delta
        .data()
        .chunks_exact(plan.d_out)
        .map(|tok| seed_token(tok, alpha, plan))
        .collect::<Result<_>>()?;
    Ok(UpstreamState {
        batch,
        seq,
        cotangents,
    })
}

fn seed_token(delta_token: &[f64], alpha: f64, plan: &TTShapePlan) -> Result<DenseTensor> {
    let mut shape = Vec::with_capacity(plan.num_output_cores() + 1);
    shape.push(1);
    shape.extend(&plan.output_factors);
    DenseTensor::new(shape, delta_token.iter().map(|v| alpha * v).collect())
}

/// `∂ℓ/∂G̃_ℓ(a, n, b') = Σ_ctx C_ℓ[b', ctx, n] · T_{ℓ-1}[a, ctx]`.
///
/// `cotangent` is `C_ℓ` with shape `(r', n_1..n_ℓ)` and `prev_state` is the
/// cached `T_{ℓ-1}` with shape `(r, n_1..n_{ℓ-1})`.
pub fn grad_output_core(cotangent: &DenseTensor, prev_state: &DenseTensor) -> Result<DenseTensor> {
    let ctx = prev_state.rank() - 1;
    if cotangent.rank() != ctx + 2 {
        return Err(Error::ShapeMismatch(format!(
            "cotangent {:?} does not extend state {:?} by one mode",
            cotangent.shape(),
            prev_state.shape()
        )));
    }
    let axes: Vec<usize> = (1..=ctx).collect();
    // (r, r', n_ℓ) → (r, n_ℓ, r')
    contract(prev_state, cotangent, &axes, &axes)?.permute(&[0, 2, 1])
}

/// `C_{ℓ-1}[a, ctx] = Σ_{n, b'} C_ℓ[b', ctx, n] · G̃_ℓ(a, n, b')`.
pub fn upstream_output(cotangent: &DenseTensor, core: &DenseTensor) -> Result<DenseTensor> {
    if cotangent.rank() < 2 || core.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "cotangent {:?} against core {:?}",
            cotangent.shape(),
            core.shape()
        )));
    }
    let last = cotangent.rank() - 1;
    contract(cotangent, core, &[0, last], &[2, 1])?.last_axis_first()
}

/// `∂ℓ/∂G_k(a, m, b') = Σ_z U_k[b', z] · S_{k-1}[a, m, z]`.
pub fn grad_input_core(upstream: &DenseTensor, prev_state: &DenseTensor) -> Result<DenseTensor> {
    if prev_state.rank() != upstream.rank() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?} against state {:?}",
            upstream.shape(),
            prev_state.shape()
        )));
    }
    let axes_s: Vec<usize> = (2..prev_state.rank()).collect();
    let axes_u: Vec<usize> = (1..upstream.rank()).collect();
    contract(prev_state, upstream, &axes_s, &axes_u)
}

/// `U_{k-1}[a, m, z] = Σ_{b'} U_k[b', z] · G_k(a, m, b')`.
pub fn upstream_input(upstream: &DenseTensor, core: &DenseTensor) -> Result<DenseTensor> {
    if core.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("core {:?}", core.shape())));
    }
    contract(core, upstream, &[2], &[0])
}

/// Walks one token's cotangent through the chain, calling `visit(i, grad)` for
/// each core position `i` in backprop order. Returns the cotangent w.r.t. the
/// token input (shape `(1, m_1..m_p)`) when `want_input` is set.
pub fn backprop_token(
    seed: DenseTensor,
    states: &TokenStates,
    adapter: &TTAdapter,
    want_input: bool,
    mut visit: impl FnMut(usize, DenseTensor) -> Result<()>,
) -> Result<Option<DenseTensor>> {
    let p = adapter.input_cores.len();
    let q = adapter.output_cores.len();
    if states.input.len() != p || states.output.len() != q {
        return Err(Error::ShapeMismatch("cached states do not match the adapter".into()));
    }
    let mut cot = seed;
    for l in (0..q).rev() {
        visit(p + l, grad_output_core(&cot, &states.output[l])?)?;
        cot = upstream_output(&cot, &adapter.output_cores[l])?;
    }
    for k in (0..p).rev() {
        visit(k, grad_input_core(&cot, &states.input[k])?)?;
        if k > 0 || want_input {
            cot = upstream_input(&cot, &adapter.input_cores[k])?;
        }
    }
    Ok(want_input.then_some(cot))
}

/// Cotangent of `α·f_TT(x)` w.r.t. the token input, i.e. `α·ΔWᵀ·Δ`, walked
/// through the cores without forming any core gradient.
pub fn input_cotangent(delta_token: &[f64], adapter: &TTAdapter) -> Result<Vec<f64>> {
    let mut cot = seed_token(delta_token, adapter.alpha(), &adapter.plan)?;
    for core in adapter.output_cores.iter().rev() {
        cot = upstream_output(&cot, core)?;
    }
    for core in adapter.input_cores.iter().rev() {
        cot = upstream_input(&cot, core)?;
    }
    Ok(cot.into_data())
}

fn zero_grads(adapter: &TTAdapter) -> Vec<DenseTensor> {
    adapter
        .cores()
        .map(|c| DenseTensor::zeros(c.shape()))
        .collect()
}

fn check_pass(cache: &ContractionCache, delta: &DenseTensor, adapter: &TTAdapter) -> Result<()> {
    let want = [cache.batch(), cache.seq(), adapter.plan.d_out];
    if delta.shape() != want {
        return Err(Error::ShapeMismatch(format!(
            "upstream {:?}, cache expects {want:?}",
            delta.shape()
        )));
    }
    Ok(())
}

/// Token-summed gradient of example `b` for every core.
pub fn example_grads(
    cache: &ContractionCache,
    delta: &DenseTensor,
    adapter: &TTAdapter,
    b: usize,
) -> Result<Vec<DenseTensor>> {
    check_pass(cache, delta, adapter)?;
    let d_out = adapter.plan.d_out;
    let seq = cache.seq();
    let mut grads = zero_grads(adapter);
    for t in 0..seq {
        let states = cache.token(b, t)?;
        let row = &delta.data()[(b * seq + t) * d_out..(b * seq + t + 1) * d_out];
        let seed = seed_token(row, adapter.alpha(), &adapter.plan)?;
        backprop_token(seed, states, adapter, false, |i, g| grads[i].axpy(1.0, &g))?;
    }
    Ok(grads)
}

/// Exact per-example gradient norms over all cores of one adapter.
///
/// Each example's token-summed gradient is built in a scratch buffer, reduced
/// to squared norms, and dropped before the next example.
pub fn per_example_norms(
    cache: &ContractionCache,
    delta: &DenseTensor,
    adapter: &TTAdapter,
) -> Result<PerExampleNorms> {
    check_pass(cache, delta, adapter)?;
    let batch = cache.batch();
    let n = adapter.num_cores();
    let mut sq = vec![vec![0.0; batch]; n];
    for b in 0..batch {
        let grads = example_grads(cache, delta, adapter, b)?;
        for (i, g) in grads.iter().enumerate() {
            sq[i][b] = g.l2_norm_sq();
        }
    }
    let per_param_sq = sq
        .into_iter()
        .enumerate()
        .map(|(i, v)| (core_id(&adapter.plan, i), v))
        .collect();
    Ok(PerExampleNorms::from_squares(per_param_sq, batch))
}

/// `Σ_b w_b · g_b` for every core, accumulated token by token into a single
/// buffer per core.
pub fn weighted_core_grads(
    cache: &ContractionCache,
    delta: &DenseTensor,
    adapter: &TTAdapter,
    weights: &[f64],
) -> Result<Vec<DenseTensor>> {
    check_pass(cache, delta, adapter)?;
    if weights.len() != cache.batch() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for batch of {}",
            weights.len(),
            cache.batch()
        )));
    }
    let d_out = adapter.plan.d_out;
    let seq = cache.seq();
    let mut grads = zero_grads(adapter);
    for (b, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for t in 0..seq {
            let states = cache.token(b, t)?;
            let row = &delta.data()[(b * seq + t) * d_out..(b * seq + t + 1) * d_out];
            // reweighted loss: the upstream itself is scaled by w
            let seed = seed_token(row, w * adapter.alpha(), &adapter.plan)?;
            backprop_token(seed, states, adapter, false, |i, g| grads[i].axpy(1.0, &g))?;
        }
    }
    Ok(grads)
}

/// Token-summed `[∂ℓ/∂A, ∂ℓ/∂B]` of one example for a LoRA pair.
///
/// `x` holds the example's tokens as `(S·d_in)` and `delta` its upstream as
/// `(S·d_out)`; the result is scaled by `weight`.
pub fn lora_example_grads(lora: &LoRAAdapter, x: &[f64], delta: &[f64], weight: f64, grads: &mut [DenseTensor; 2]) {
    let (d_in, d_out, r) = (lora.d_in(), lora.d_out(), lora.rank());
    let scale = weight * lora.alpha;
    let mut hidden = vec![0.0; r];
    let mut back = vec![0.0; r];
    for (xt, dt) in x.chunks_exact(d_in).zip(delta.chunks_exact(d_out)) {
        matvec(lora.a.data(), d_in, xt, &mut hidden);
        back.fill(0.0);
        matvec_t_acc(lora.b.data(), r, dt, &mut back);
        // ∂/∂B = α·δ·(A x)ᵀ, ∂/∂A = α·(Bᵀδ)·xᵀ
        outer_acc(grads[1].data_mut(), scale, dt, &hidden);
        outer_acc(grads[0].data_mut(), scale, &back, xt);
    }
}

fn lora_zero_grads(lora: &LoRAAdapter) -> [DenseTensor; 2] {
    [DenseTensor::zeros(lora.a.shape()), DenseTensor::zeros(lora.b.shape())]
}

/// Per-example norms of a LoRA pair; `x` is `(B, S, d_in)` and `delta` `(B, S, d_out)`.
pub fn lora_per_example_norms(lora: &LoRAAdapter, x: &DenseTensor, delta: &DenseTensor) -> Result<PerExampleNorms> {
    let (batch, seq) = lora_batch(lora, x, delta)?;
    let (d_in, d_out) = (lora.d_in(), lora.d_out());
    let mut sq_a = vec![0.0; batch];
    let mut sq_b = vec![0.0; batch];
    for b in 0..batch {
        let mut grads = lora_zero_grads(lora);
        let xb = &x.data()[b * seq * d_in..(b + 1) * seq * d_in];
        let db = &delta.data()[b * seq * d_out..(b + 1) * seq * d_out];
        lora_example_grads(lora, xb, db, 1.0, &mut grads);
        sq_a[b] = grads[0].l2_norm_sq();
        sq_b[b] = grads[1].l2_norm_sq();
    }
    let map = [("a".to_string(), sq_a), ("b".to_string(), sq_b)].into_iter().collect();
    Ok(PerExampleNorms::from_squares(map, batch))
}

/// `Σ_b w_b·[∂ℓ_b/∂A, ∂ℓ_b/∂B]`.
pub fn lora_weighted_grads(lora: &LoRAAdapter, x: &DenseTensor, delta: &DenseTensor, weights: &[f64]) -> Result<Vec<DenseTensor>> {
    let (batch, seq) = lora_batch(lora, x, delta)?;
    if weights.len() != batch {
        return Err(Error::ShapeMismatch(format!("{} weights for batch of {batch}", weights.len())));
    }
    let (d_in, d_out) = (lora.d_in(), lora.d_out());
    let mut grads = lora_zero_grads(lora);
    for (b, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let xb = &x.data()[b * seq * d_in..(b + 1) * seq * d_in];
        let db = &delta.data()[b * seq * d_out..(b + 1) * seq * d_out];
        lora_example_grads(lora, xb, db, w, &mut grads);
    }
    Ok(grads.into())
}

fn lora_batch(lora: &LoRAAdapter, x: &DenseTensor, delta: &DenseTensor) -> Result<(usize, usize)> {
    match (x.shape(), delta.shape()) {
        (&[b, s, di], &[b2, s2, dout]) if b == b2 && s == s2 && di == lora.d_in() && dout == lora.d_out() => Ok((b, s)),
        (xs, ds) => Err(Error::ShapeMismatch(format!("LoRA batch {xs:?} / upstream {ds:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{tt_chain_token, tt_forward};
    use crate::ttcore::{init_cores, plan_shapes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_adapter(plan: &TTShapePlan, rng: &mut ChaCha8Rng) -> TTAdapter {
        let mut adapter = init_cores(plan, rng.random(), 0.5).unwrap();
        let last = adapter.num_cores() - 1;
        for v in adapter.core_mut(last).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        adapter
    }

    #[test]
    fn seed_shapes_and_scaling() {
        let plan = plan_shapes(2304, 768, &[3, 3, 4, 64], &[64, 4, 3], 2, 1.0).unwrap();
        let delta = DenseTensor::filled(&[1, 1, 768], 0.5);
        let one = seed_upstream(&delta, 1.0, &plan).unwrap();
        let two = seed_upstream(&delta, 2.0, &plan).unwrap();
        assert_eq!(one.get(0, 0).shape(), &[1, 64, 4, 3]);
        assert_eq!(two.get(0, 0).data()[7], 2.0 * one.get(0, 0).data()[7]);
        let zero = seed_upstream(&DenseTensor::zeros(&[2, 3, 768]), 1.0, &plan).unwrap();
        assert!(zero.get(1, 2).data().iter().all(|&v| v == 0.0));
        assert!(seed_upstream(&DenseTensor::zeros(&[1, 1, 767]), 1.0, &plan).is_err());
    }

    #[test]
    fn single_output_core_is_outer_product() {
        // q = 1: ∂/∂G̃(a, n, 0) = T_0[a] · αΔ[n]
        let t0 = DenseTensor::vector(vec![0.5, -2.0]);
        let cot = DenseTensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let g = grad_output_core(&cot, &t0).unwrap();
        assert_eq!(g.shape(), &[2, 2, 1]);
        assert_eq!(g.data(), &[1.5, 2.0, -6.0, -8.0]);
        let zero = grad_output_core(&DenseTensor::zeros(&[1, 2]), &t0).unwrap();
        assert_eq!(zero.l2_norm_sq(), 0.0);
    }

    #[test]
    fn single_input_core_is_outer_product() {
        // p = 1: ∂/∂G(0, m, b') = x[m] · U_1[b']
        let s0 = DenseTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let u = DenseTensor::vector(vec![-1.0, 0.5]);
        let g = grad_input_core(&u, &s0).unwrap();
        assert_eq!(g.shape(), &[1, 2, 2]);
        assert_eq!(g.data(), &[-1.0, 0.5, -2.0, 1.0]);
        assert_eq!(grad_input_core(&DenseTensor::zeros(&[2]), &s0).unwrap().l2_norm_sq(), 0.0);
    }

    #[test]
    fn upstream_trivial_cores() {
        let cot = DenseTensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let id = DenseTensor::filled(&[1, 1, 1], 1.0);
        let passed = upstream_output(&cot, &id).unwrap();
        assert_eq!(passed.shape(), &[1, 3]);
        assert_eq!(passed.data(), &[1.0, 2.0, 3.0]);
        let zero = upstream_output(&cot, &DenseTensor::zeros(&[2, 1, 1])).unwrap();
        assert_eq!(zero.l2_norm_sq(), 0.0);

        let u = DenseTensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let core = DenseTensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let down = upstream_input(&u, &core).unwrap();
        assert_eq!(down.shape(), &[1, 3, 2]);
        assert_eq!(down.data(), &[2.0, -1.0, 4.0, -2.0, 6.0, -3.0]);
        assert_eq!(upstream_input(&u, &DenseTensor::zeros(&[1, 3, 1])).unwrap().l2_norm_sq(), 0.0);
    }

    /// Input cotangent of the whole chain equals `α·ΔWᵀ·Δ`.
    #[test]
    fn chain_input_cotangent_matches_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = plan_shapes(12, 6, &[2, 3, 2], &[3, 2], 2, 0.8).unwrap();
        let adapter = random_adapter(&plan, &mut rng);
        let dw = crate::ttcore::reconstruct_delta_w(&adapter).unwrap();
        let x = random(&[12], &mut rng);
        let delta = random(&[6], &mut rng);
        let (_, states) = tt_chain_token(x.data(), &adapter).unwrap();
        let seed = seed_token(delta.data(), 0.8, &plan).unwrap();
        let dx = backprop_token(seed, &states, &adapter, true, |_, _| Ok(()))
            .unwrap()
            .unwrap();
        assert_eq!(dx.shape(), &[1, 2, 3, 2]);
        let want = contract(&delta, &dw, &[0], &[0]).unwrap().scale(0.8);
        let got = dx.reshape(&[12]).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let plan = plan_shapes(8, 8, &[2, 4], &[4, 2], 2, 1.0).unwrap();
        let adapter = random_adapter(&plan, &mut rng);
        let x = random(&[3, 2, 8], &mut rng);
        let (_, cache) = tt_forward(&x, &DenseTensor::zeros(&[8, 8]), &adapter).unwrap();
        let norms = per_example_norms(&cache, &DenseTensor::zeros(&[3, 2, 8]), &adapter).unwrap();
        assert_eq!(norms.global_norm, vec![0.0; 3]);
        assert_eq!(norms.per_param_sq.len(), 4);
    }

    #[test]
    fn identical_examples_have_identical_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plan = plan_shapes(8, 8, &[2, 4], &[4, 2], 2, 1.0).unwrap();
        let adapter = random_adapter(&plan, &mut rng);
        let one = random(&[1, 3, 8], &mut rng);
        let d1 = random(&[1, 3, 8], &mut rng);
        let x = DenseTensor::new(vec![2, 3, 8], [one.data(), one.data()].concat()).unwrap();
        let delta = DenseTensor::new(vec![2, 3, 8], [d1.data(), d1.data()].concat()).unwrap();
        let (_, cache) = tt_forward(&x, &DenseTensor::zeros(&[8, 8]), &adapter).unwrap();
        let norms = per_example_norms(&cache, &delta, &adapter).unwrap();
        assert_eq!(norms.global_norm[0], norms.global_norm[1]);
        assert!(norms.global_norm[0] > 0.0);
    }

    #[test]
    fn norms_scale_with_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let plan = plan_shapes(6, 4, &[3, 2], &[2, 2], 3, 1.1).unwrap();
        let adapter = random_adapter(&plan, &mut rng);
        let x = random(&[2, 4, 6], &mut rng);
        let delta = random(&[2, 4, 4], &mut rng);
        let (_, cache) = tt_forward(&x, &DenseTensor::zeros(&[4, 6]), &adapter).unwrap();
        let base = per_example_norms(&cache, &delta, &adapter).unwrap();
        let scaled = per_example_norms(&cache, &delta.scale(-3.0), &adapter).unwrap();
        for (a, b) in base.global_norm.iter().zip(&scaled.global_norm) {
            assert!((3.0 * a - b).abs() <= 1e-10 * b);
        }
        let sum_sq: f64 = base.per_param_sq.values().map(|v| v[1]).sum();
        assert!((sum_sq.sqrt() - base.global_norm[1]).abs() <= 1e-12 * base.global_norm[1]);
    }

    #[test]
    fn weighted_grads_are_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let plan = plan_shapes(6, 4, &[3, 2], &[2, 2], 2, 1.0).unwrap();
        let adapter = random_adapter(&plan, &mut rng);
        let x = random(&[3, 2, 6], &mut rng);
        let delta = random(&[3, 2, 4], &mut rng);
        let (_, cache) = tt_forward(&x, &DenseTensor::zeros(&[4, 6]), &adapter).unwrap();
        let w = [0.3, 0.0, 1.7];
        let agg = weighted_core_grads(&cache, &delta, &adapter, &w).unwrap();
        for (i, g) in agg.iter().enumerate() {
            let mut want = DenseTensor::zeros(g.shape());
            for (b, &wb) in w.iter().enumerate() {
                want.axpy(wb, &example_grads(&cache, &delta, &adapter, b).unwrap()[i]).unwrap();
            }
            assert!(g.max_abs_diff(&want) <= 1e-13);
        }
        assert!(weighted_core_grads(&cache, &delta, &adapter, &[1.0]).is_err());
    }
}
