//! Vector and matrix primitives for the shared embedding space.
//!
//! Everything here is double precision. Gradients elsewhere in the crate are
//! hand-derived closed forms; [`central_difference_gradient`] is the oracle
//! they are checked against.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdgError};
use crate::rng::RngStream;

/// Norm at or below which a vector is treated as the zero vector.
pub const EPS_NORM: f64 = 1e-12;

/// A finite real vector in token space or in the shared feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps `values`, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(TdgError::Numeric(format!(
                "embedding entry is not finite ({bad})"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
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

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn scaled(&self, factor: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn gaussian(len: usize, std: f64, rng: &mut RngStream) -> Self {
        Embedding(rng.gaussian_vec(len, std))
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Vec<f64> {
        e.0
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TdgError::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries i.i.d. Gaussian(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        Self {
            rows,
            cols,
            data: rng.gaussian_vec(rows * cols, std),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_transpose(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        Ok(out)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Outer product `u ⊗ v` (rows = len(u), cols = len(v)).
    pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Matrix {
            rows: u.len(),
            cols: v.len(),
            data,
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Row rank by Gram-Schmidt with a relative tolerance.
    pub fn row_rank(&self) -> usize {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let scale = self
            .data
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for r in 0..self.rows {
            let mut v = self.row(r).to_vec();
            for b in &basis {
                let p = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
            let n = norm(&v);
            if n > 1e-10 * scale * (self.cols as f64).sqrt() {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        basis.len()
    }

    /// Moore-Penrose pseudo-inverse of a full-column-rank matrix, `(AᵀA)⁻¹Aᵀ`.
    pub fn left_pseudo_inverse(&self) -> Result<Matrix> {
        let at = self.transpose();
        let gram = at.matmul(self)?;
        let inv = invert_spd(&gram, 0.0)?;
        inv.matmul(&at)
    }
}

/// Inverse of a symmetric positive (semi-)definite matrix with `ridge` added
/// to the diagonal, via Gauss-Jordan elimination with partial pivoting.
pub fn invert_spd(a: &Matrix, ridge: f64) -> Result<Matrix> {
    let n = a.rows();
    check_len(n, a.cols())?;
    let mut work = a.clone();
    for i in 0..n {
        let v = work.get(i, i) + ridge;
        work.set(i, i, v);
    }
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| work.get(x, col).abs().total_cmp(&work.get(y, col).abs()))
            .unwrap_or(col);
        let p = work.get(pivot, col);
        if p.abs() < 1e-300 {
            return Err(TdgError::Numeric("singular matrix".into()));
        }
        if pivot != col {
            for c in 0..n {
                let (x, y) = (work.get(col, c), work.get(pivot, c));
                work.set(col, c, y);
                work.set(pivot, c, x);
                let (x, y) = (inv.get(col, c), inv.get(pivot, c));
                inv.set(col, c, y);
                inv.set(pivot, c, x);
            }
        }
        let p = work.get(col, col);
        for c in 0..n {
            work.set(col, c, work.get(col, c) / p);
            inv.set(col, c, inv.get(col, c) / p);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = work.get(r, col);
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                work.set(r, c, work.get(r, c) - f * work.get(col, c));
                inv.set(r, c, inv.get(r, c) - f * inv.get(col, c));
            }
        }
    }
    Ok(inv)
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(TdgError::Dimension { expected, got })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn nonzero_norm(a: &[f64], what: &str) -> Result<f64> {
    let n = norm(a);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(TdgError::DegenerateInput(format!(
            "{what} has norm {n:e}, cannot normalize"
        )));
    }
    Ok(n)
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let na = nonzero_norm(a, "first vector")?;
    let nb = nonzero_norm(b, "second vector")?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `a / ‖a‖`
pub fn normalize(a: &[f64]) -> Result<Embedding> {
    let n = nonzero_norm(a, "vector")?;
    Ok(Embedding(a.iter().map(|v| v / n).collect()))
}

/// Gradient of `cosine(a, b)` with respect to `a`: `(b̂ − cos·â) / ‖a‖`.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Result<Embedding> {
    check_len(a.len(), b.len())?;
    let na = nonzero_norm(a, "first vector")?;
    let nb = nonzero_norm(b, "second vector")?;
    let c = dot(a, b) / (na * nb);
    Ok(Embedding(
        a.iter()
            .zip(b)
            .map(|(&ai, &bi)| (bi / nb - c * ai / na) / na)
            .collect(),
    ))
}

/// Central-difference estimate of `∇f(x)` with step `h`.
///
/// Component `i` is `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn central_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Embedding>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TdgError::Numeric(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TdgError::Numeric(format!(
                "objective is not finite at component {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Embedding(grad))
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
