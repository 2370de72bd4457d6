//! Brute-force reference computations for tests.
//!
//! Nothing here shares code with the cached contraction path: `ΔW` entries
//! are formed as explicit products of core slices, per-example gradients come
//! from the chain rule over those products, and finite differences only ever
//! call a loss closure.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::ttcore::TTAdapter;

/// Largest `d_out * d_in` the brute-force routines accept.
pub const ORACLE_LIMIT: usize = 1 << 18;

fn guard(adapter: &TTAdapter) -> Result<()> {
    let plan = &adapter.plan;
    if plan.d_in * plan.d_out > ORACLE_LIMIT {
        return Err(Error::DimTooLarge {
            rows: plan.d_out,
            cols: plan.d_in,
            limit: ORACLE_LIMIT,
        });
    }
    Ok(())
}

/// Row-major multi-index of `flat` over `factors`.
fn unravel(mut flat: usize, factors: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; factors.len()];
    for (slot, &f) in idx.iter_mut().zip(factors).rev() {
        *slot = flat % f;
        flat /= f;
    }
    idx
}

/// Mode index at every chain position for entry `(out, inp)` of `ΔW`.
fn chain_indices(adapter: &TTAdapter, out: usize, inp: usize) -> Vec<usize> {
    let mut idx = unravel(inp, &adapter.plan.input_factors);
    idx.extend(unravel(out, &adapter.plan.output_factors));
    idx
}

/// Slice `core[:, m, :]` as a dense `(r0, r1)` row-major matrix.
fn slice(core: &DenseTensor, m: usize) -> (usize, usize, Vec<f64>) {
    let s = core.shape();
    let (r0, r1) = (s[0], s[2]);
    let mut out = Vec::with_capacity(r0 * r1);
    for a in 0..r0 {
        for c in 0..r1 {
            out.push(core.get(&[a, m, c]));
        }
    }
    (r0, r1, out)
}

/// Row vector times matrix.
fn vec_mat(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &vi) in v.iter().enumerate() {
        for j in 0..cols {
            out[j] += vi * m[i * cols + j];
        }
    }
    out
}

/// Matrix times column vector.
fn mat_vec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `ΔW[out, in]` as the product of one slice per core.
pub fn delta_w_entry(adapter: &TTAdapter, out: usize, inp: usize) -> f64 {
    let idx = chain_indices(adapter, out, inp);
    let mut row = vec![1.0];
    for (core, &m) in adapter.cores().zip(&idx) {
        let (_, r1, s) = slice(core, m);
        row = vec_mat(&row, &s, r1);
    }
    row[0]
}

/// Full `ΔW` by nested loops over every entry.
pub fn delta_w_by_slices(adapter: &TTAdapter) -> Result<DenseTensor> {
    guard(adapter)?;
    let (d_out, d_in) = (adapter.plan.d_out, adapter.plan.d_in);
    let mut data = Vec::with_capacity(d_out * d_in);
    for o in 0..d_out {
        for i in 0..d_in {
            data.push(delta_w_entry(adapter, o, i));
        }
    }
    DenseTensor::new(vec![d_out, d_in], data)
}

/// `y = x·(W + α·ΔW)ᵀ` for `(B, S, d_in)` input via the materialized update.
pub fn materialized_forward(x: &DenseTensor, base_w: &DenseTensor, adapter: &TTAdapter) -> Result<DenseTensor> {
    let dw = delta_w_by_slices(adapter)?;
    let (d_out, d_in) = (adapter.plan.d_out, adapter.plan.d_in);
    if x.shape().last() != Some(&d_in) || base_w.shape() != [d_out, d_in] {
        return Err(Error::ShapeMismatch("oracle forward shapes".into()));
    }
    let alpha = adapter.alpha();
    let mut y = Vec::new();
    for tok in x.data().chunks_exact(d_in) {
        for o in 0..d_out {
            let mut acc = 0.0;
            for (i, &xi) in tok.iter().enumerate() {
                acc += (base_w.get(&[o, i]) + alpha * dw.get(&[o, i])) * xi;
            }
            y.push(acc);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    DenseTensor::new(shape, y)
}

/// Core gradients of `Σ_{o,i} G[o,i]·ΔW[o,i]` for a given `∂ℓ/∂ΔW = G`.
fn chain_rule_through_slices(adapter: &TTAdapter, g: &[f64]) -> Vec<DenseTensor> {
    let (d_out, d_in) = (adapter.plan.d_out, adapter.plan.d_in);
    let n = adapter.num_cores();
    let cores: Vec<&DenseTensor> = adapter.cores().collect();
    let mut grads: Vec<DenseTensor> = cores.iter().map(|c| DenseTensor::zeros(c.shape())).collect();
    for o in 0..d_out {
        for i in 0..d_in {
            let gv = g[o * d_in + i];
            if gv == 0.0 {
                continue;
            }
            let idx = chain_indices(adapter, o, i);
            let slices: Vec<_> = cores.iter().zip(&idx).map(|(c, &m)| slice(c, m)).collect();
            // prefix[k]: product of slices 0..k as a row vector of length r_k
            let mut prefix = vec![vec![1.0]];
            for (_, r1, s) in &slices {
                let next = vec_mat(prefix.last().unwrap(), s, *r1);
                prefix.push(next);
            }
            // suffix[k]: product of slices k..n as a column vector of length r_k
            let mut suffix = vec![vec![1.0]; n + 1];
            for k in (0..n).rev() {
                let (_, r1, s) = &slices[k];
                suffix[k] = mat_vec(s, *r1, &suffix[k + 1]);
            }
            for k in 0..n {
                let shape = cores[k].shape();
                let (r0, r1) = (shape[0], shape[2]);
                let m = idx[k];
                let data = grads[k].data_mut();
                for a in 0..r0 {
                    for c in 0..r1 {
                        data[(a * shape[1] + m) * r1 + c] += gv * prefix[k][a] * suffix[k + 1][c];
                    }
                }
            }
        }
    }
    grads
}

/// Per-example, token-summed core gradients given the layer upstream.
///
/// Example `b` contributes `∂ℓ_b/∂ΔW = α·Σ_t Δ_{b,t} x_{b,t}ᵀ`, which is then
/// pushed through the slice products of every `ΔW` entry.
pub fn naive_per_example_grads(
    adapter: &TTAdapter,
    x: &DenseTensor,
    delta: &DenseTensor,
) -> Result<Vec<Vec<DenseTensor>>> {
    guard(adapter)?;
    let (d_out, d_in) = (adapter.plan.d_out, adapter.plan.d_in);
    let (batch, seq) = match (x.shape(), delta.shape()) {
        (&[b, s, di], &[b2, s2, dout]) if b == b2 && s == s2 && di == d_in && dout == d_out => (b, s),
        _ => return Err(Error::ShapeMismatch("oracle batch shapes".into())),
    };
    let alpha = adapter.alpha();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut g = vec![0.0; d_out * d_in];
        for t in 0..seq {
            let xt = &x.data()[(b * seq + t) * d_in..(b * seq + t + 1) * d_in];
            let dt = &delta.data()[(b * seq + t) * d_out..(b * seq + t + 1) * d_out];
            for o in 0..d_out {
                for i in 0..d_in {
                    g[o * d_in + i] += alpha * dt[o] * xt[i];
                }
            }
        }
        out.push(chain_rule_through_slices(adapter, &g));
    }
    Ok(out)
}

/// `‖g_b‖₂` per example from [`naive_per_example_grads`].
pub fn naive_per_example_norms(adapter: &TTAdapter, x: &DenseTensor, delta: &DenseTensor) -> Result<Vec<f64>> {
    Ok(naive_per_example_grads(adapter, x, delta)?
        .iter()
        .map(|gs| gs.iter().map(DenseTensor::l2_norm_sq).sum::<f64>().sqrt())
        .collect())
}

/// Central differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` for every entry.
pub fn finite_diff_grad(
    mut loss_fn: impl FnMut(&DenseTensor) -> f64,
    param: &DenseTensor,
    step: f64,
) -> DenseTensor {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = param.clone();
    let mut grad = DenseTensor::zeros(param.shape());
    for i in 0..param.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss_fn(&probe);
        probe.data_mut()[i] = orig - step;
        let down = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}
