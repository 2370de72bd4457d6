//! Dense row-major tensors of `f64`.
//!
//! The last index varies fastest, so reshaping never moves data. Mode
//! contraction is realized as permute-to-matrix followed by a plain GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-N array of 64-bit floats with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn product(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        if product(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} entries, got {}",
                product(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; product(shape)],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// One-dimensional tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Row-major matrix from a slice of rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Entry at a full multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(new_shape)
    }

    pub fn into_reshape(self, new_shape: &[usize]) -> Result<Self> {
        if new_shape.contains(&0) || product(new_shape) != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, new_shape
            )));
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(Error::ShapeMismatch(format!(
                "permutation {axes:?} for rank {rank}"
            )));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::AxisOutOfRange { axis: a, rank });
            }
            if std::mem::replace(&mut seen[a], true) {
                return Err(Error::ShapeMismatch(format!("duplicate axis {a}")));
            }
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        // merge runs of output axes that stay contiguous in the source
        let mut dims: Vec<(usize, usize)> = Vec::with_capacity(rank);
        for &a in axes {
            let (n, st) = (self.shape[a], in_strides[a]);
            match dims.last_mut() {
                Some(last) if last.1 == st * n => *last = (last.0 * n, st),
                _ => dims.push((n, st)),
            }
        }
        let (inner_n, inner_st) = dims.pop().unwrap_or((1, 1));
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; dims.len()];
        let mut offset = 0usize;
        for _ in 0..self.data.len() / inner_n.max(1) {
            if inner_st == 1 {
                data.extend_from_slice(&self.data[offset..offset + inner_n]);
            } else {
                data.extend((0..inner_n).map(|i| self.data[offset + i * inner_st]));
            }
            for ax in (0..dims.len()).rev() {
                index[ax] += 1;
                offset += dims[ax].1;
                if index[ax] < dims[ax].0 {
                    break;
                }
                offset -= dims[ax].1 * dims[ax].0;
                index[ax] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Moves the last axis to the front.
    pub fn last_axis_first(&self) -> Result<Self> {
        let rank = self.rank();
        if rank < 2 {
            return Ok(self.clone());
        }
        let mut axes = vec![rank - 1];
        axes.extend(0..rank - 1);
        self.permute(&axes)
    }

    /// Sum of squared entries.
    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Contracts `a` and `b` over paired axes.
///
/// The result keeps the free axes of `a` followed by the free axes of `b`,
/// each in their original order.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<DenseTensor> {
    if axes_a.len() != axes_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} axes paired with {}",
            axes_a.len(),
            axes_b.len()
        )));
    }
    let free_a = free_axes(a.rank(), axes_a)?;
    let free_b = free_axes(b.rank(), axes_b)?;
    for (&i, &j) in axes_a.iter().zip(axes_b) {
        if a.shape[i] != b.shape[j] {
            return Err(Error::DimMismatch {
                left: a.shape[i],
                right: b.shape[j],
            });
        }
    }

    let k: usize = axes_a.iter().map(|&i| a.shape[i]).product();
    let rows: usize = free_a.iter().map(|&i| a.shape[i]).product();
    let cols: usize = free_b.iter().map(|&j| b.shape[j]).product();

    let a_km = is_concat_identity(axes_a, &free_a);
    let b_ck = !is_concat_identity(axes_b, &free_b) && is_concat_identity(&free_b, axes_b);
    let lhs_buf;
    let lhs: &[f64] = if a_km || is_concat_identity(&free_a, axes_a) {
        &a.data
    } else {
        let perm: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
        lhs_buf = a.permute(&perm)?.data;
        &lhs_buf
    };
    let rhs_buf;
    let rhs: &[f64] = if b_ck || is_concat_identity(axes_b, &free_b) {
        &b.data
    } else {
        let perm: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
        rhs_buf = b.permute(&perm)?.data;
        &rhs_buf
    };

    let mut out = vec![0.0; rows * cols];
    match (a_km, b_ck) {
        (false, false) => {
            for (lrow, orow) in lhs.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(cols.max(1))) {
                for (kk, &lv) in lrow.iter().enumerate() {
                    if lv != 0.0 {
                        axpy_slice(lv, &rhs[kk * cols..(kk + 1) * cols], orow);
                    }
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let rrow = &rhs[kk * cols..(kk + 1) * cols];
                for (r, orow) in out.chunks_exact_mut(cols.max(1)).enumerate() {
                    let lv = lhs[kk * rows + r];
                    if lv != 0.0 {
                        axpy_slice(lv, rrow, orow);
                    }
                }
            }
        }
        (false, true) => {
            for (lrow, orow) in lhs.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(cols.max(1))) {
                for (o, rrow) in orow.iter_mut().zip(rhs.chunks_exact(k.max(1))) {
                    *o = dot(lrow, rrow);
                }
            }
        }
        (true, true) => {
            let mut lrow = vec![0.0; k];
            for (r, orow) in out.chunks_exact_mut(cols.max(1)).enumerate() {
                for (kk, l) in lrow.iter_mut().enumerate() {
                    *l = lhs[kk * rows + r];
                }
                for (o, rrow) in orow.iter_mut().zip(rhs.chunks_exact(k.max(1))) {
                    *o = dot(&lrow, rrow);
                }
            }
        }
    }

    let shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape[i])
        .chain(free_b.iter().map(|&j| b.shape[j]))
        .collect();
    DenseTensor::new(shape, out)
}

fn is_concat_identity(first: &[usize], second: &[usize]) -> bool {
    first.iter().chain(second).enumerate().all(|(i, &a)| i == a)
}

fn axpy_slice(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn free_axes(rank: usize, axes: &[usize]) -> Result<Vec<usize>> {
    let mut used = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::AxisOutOfRange { axis: ax, rank });
        }
        if std::mem::replace(&mut used[ax], true) {
            return Err(Error::ShapeMismatch(format!("axis {ax} listed twice")));
        }
    }
    Ok((0..rank).filter(|&i| !used[i]).collect())
}

/// `out = m · v` for a row-major `(rows, cols)` matrix stored flat.
pub(crate) fn matvec(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(v.len(), cols);
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = dot(row, v);
    }
}

/// Dot product with four independent partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += mᵀ · v` for a row-major `(rows, cols)` matrix stored flat.
pub(crate) fn matvec_t_acc(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), cols);
    for (row, &vi) in m.chunks_exact(cols).zip(v) {
        if vi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += vi * a;
        }
    }
}

/// `m += factor · u vᵀ` for a row-major `(u.len(), v.len())` matrix.
pub(crate) fn outer_acc(m: &mut [f64], factor: f64, u: &[f64], v: &[f64]) {
    for (row, &ui) in m.chunks_exact_mut(v.len()).zip(u) {
        let s = factor * ui;
        if s == 0.0 {
            continue;
        }
        for (o, b) in row.iter_mut().zip(v) {
            *o += s * b;
        }
    }
}
