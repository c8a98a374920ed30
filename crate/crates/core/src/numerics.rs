//! Softmax primitives and the few dense linear-algebra helpers the rest of
//! the crate needs. Vectors are plain `[f64]`; matrices are row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: format!("{rows}x{cols} (nonempty)"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        m.add_outer(1.0, a, b);
        m
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self · v`, written into `out`.
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks(self.cols)) {
            *o = dot(row, v);
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    /// `selfᵀ · v`.
    pub fn tmatvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.data.chunks(self.cols).zip(v) {
            axpy(vi, row, &mut out);
        }
        out
    }

    /// `self += c · a bᵀ`.
    pub fn add_outer(&mut self, c: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &ai) in self.data.chunks_mut(self.cols).zip(a) {
            axpy(c * ai, b, row);
        }
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, c: f64, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        axpy(c, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(c);
        m
    }

    pub fn frob_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn frob_dot(&self, other: &Matrix) -> f64 {
        debug_assert!(self.same_shape(other));
        dot(&self.data, &other.data)
    }

    /// `aᵀ · self · b`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        self.data
            .chunks(self.cols)
            .zip(a)
            .map(|(row, &ai)| ai * dot(row, b))
            .sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    let s: f64 = a.iter().map(|x| x * x).sum();
    if s.is_normal() && s < 1e300 {
        return s.sqrt();
    }
    // rescale when the plain sum over- or underflows
    let m = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    let inv = 1.0 / m;
    m * a.iter().map(|x| (x * inv) * (x * inv)).sum::<f64>().sqrt()
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Cosine between two flattened arrays; `None` if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / na / nb).clamp(-1.0, 1.0))
}

/// `1 − cos(a, b)` evaluated as `‖â − b̂‖²/2`, which keeps relative
/// accuracy when the two directions nearly coincide.
pub fn cosine_gap(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let (ia, ib) = (1.0 / na, 1.0 / nb);
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x * ia - y * ib).powi(2)).sum();
    Some(0.5 * s)
}

/// `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction.
pub fn stable_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

/// Unchecked softmax for hot loops; inputs must be finite.
#[inline]
pub fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// `diag(s) − s sᵀ` at `s = softmax(v)`.
pub fn softmax_jacobian(v: &[f64]) -> Result<Matrix> {
    let s = stable_softmax(v)?;
    let t = s.len();
    let mut j = Matrix::zeros(t, t);
    for a in 0..t {
        for b in 0..t {
            let d = if a == b { s[a] } else { 0.0 };
            j.set(a, b, d - s[a] * s[b]);
        }
    }
    Ok(j)
}

/// Jacobian-vector product `(diag(s) − s sᵀ) v` given the softmax output `s`.
///
/// Each entry is formed as `s_k Σ_τ s_τ (v_k − v_τ)`, so a saturated softmax
/// (one entry rounding to 1) still yields accurate tiny outputs.
#[inline]
pub fn softmax_jvp(s: &[f64], v: &[f64], out: &mut [f64]) {
    for k in 0..s.len() {
        let mut acc = 0.0;
        for (st, vt) in s.iter().zip(v) {
            acc += st * (v[k] - vt);
        }
        out[k] = s[k] * acc;
    }
}

/// Solves `A x = b` for a small dense square system by Gaussian elimination
/// with partial pivoting. Returns `None` if a pivot falls below `tol`.
pub fn solve_dense(a: &Matrix, b: &[f64], tol: f64) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))?;
        if m.get(piv, col).abs() <= tol {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let (p, c) = (m.get(piv, j), m.get(col, j));
                m.set(piv, j, c);
                m.set(col, j, p);
            }
            x.swap(piv, col);
        }
        for r in col + 1..n {
            let f = m.get(r, col) / m.get(col, col);
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m.set(r, j, m.get(r, j) - f * m.get(col, j));
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let s = x[col] - dot(&m.row(col)[col + 1..], &x[col + 1..]);
        x[col] = s / m.get(col, col);
    }
    Some(x)
}


/// Serde adapter for floats that may be infinite or NaN: finite values stay
/// JSON numbers, the rest become `"inf"`, `"-inf"` or `"NaN"`.
pub mod json_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => t.parse().map_err(|_| de::Error::custom(format!("bad float `{t}`"))),
        }
    }
}
