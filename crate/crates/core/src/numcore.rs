//! Dense vector/matrix kernels, activations, softmax and negative log
//! likelihood, the Adam update, and a central-difference gradient oracle.
//!
//! Everything is `f64`. Matrices are row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to a probability before taking its logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    /// One-hot vector with a single 1 at `index`.
    pub fn one_hot(index: usize, dim: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::Index { index, dim });
        }
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Ok(DenseVector(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Index of the single 1.0 entry, if this vector is exactly one-hot.
    pub fn one_hot_index(&self) -> Option<usize> {
        let mut found = None;
        for (i, &x) in self.0.iter().enumerate() {
            if x == 1.0 {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            } else if x != 0.0 {
                return None;
            }
        }
        found
    }

    pub fn add_assign(&mut self, other: &DenseVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|x| *x *= factor);
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(values: Vec<f64>) -> Self {
        DenseVector(values)
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DenseMatrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> DenseVector {
        (0..self.rows).map(|r| self.get(r, c)).collect::<Vec<_>>().into()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · v`.
    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        if v.dim() != self.cols {
            return Err(Error::Shape(format!(
                "matvec of {}x{} matrix with {}-vector",
                self.rows,
                self.cols,
                v.dim()
            )));
        }
        let x = v.as_slice();
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect::<Vec<_>>()
            .into())
    }

    /// `selfᵀ · v`.
    pub fn matvec_transposed(&self, v: &DenseVector) -> Result<DenseVector> {
        if v.dim() != self.rows {
            return Err(Error::Shape(format!(
                "transposed matvec of {}x{} matrix with {}-vector",
                self.rows,
                self.cols,
                v.dim()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &scale) in v.iter().enumerate() {
            if scale == 0.0 {
                continue;
            }
            axpy(scale, self.row(r), &mut out);
        }
        Ok(out.into())
    }

    /// `self += a · bᵀ`.
    pub fn add_outer(&mut self, a: &DenseVector, b: &DenseVector) {
        debug_assert_eq!(a.dim(), self.rows);
        debug_assert_eq!(b.dim(), self.cols);
        let cols = self.cols;
        for (r, &scale) in a.iter().enumerate() {
            if scale == 0.0 {
                continue;
            }
            axpy(scale, b.as_slice(), &mut self.data[r * cols..(r + 1) * cols]);
        }
    }

    /// Adds `v` to column `c`.
    pub fn add_to_column(&mut self, c: usize, v: &DenseVector) {
        debug_assert_eq!(v.dim(), self.rows);
        for (r, &x) in v.iter().enumerate() {
            self.data[r * self.cols + c] += x;
        }
    }
}

/// Free-function form of [`DenseMatrix::matvec`].
pub fn matvec(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    m.matvec(v)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu(v: &DenseVector) -> DenseVector {
    v.iter().map(|&x| x.max(0.0)).collect::<Vec<_>>().into()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A probability vector over the identity vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Wraps raw probabilities after checking they are a valid distribution.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("empty distribution".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("probability outside [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Distribution { probs })
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &DenseVector) -> Distribution {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Distribution { probs }
}

/// `-ln p[target]`, with the probability clamped at [`PROB_FLOOR`].
pub fn nll(dist: &Distribution, target: usize) -> Result<f64> {
    if target >= dist.dim() {
        return Err(Error::Index {
            index: target,
            dim: dist.dim(),
        });
    }
    Ok(-dist.prob(target).max(PROB_FLOOR).ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n || self.second_moment.len() != n {
            return Err(Error::Shape(format!(
                "adam state has {n} slots, got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.step(params, grads)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// `|a - b| / max(1, |a|)`: the error measure used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
