//! Dense row-major kernels shared by the encoders and the CRF.
//!
//! Everything here is `f64`. Masks are explicit boolean matrices; `-inf`
//! only appears inside [`log_sum_exp`] and [`softmax_masked`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimensions");
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimensions");
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Row-major boolean matrix used as an attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mask {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nested `Vec<Vec<bool>>` view, convenient for serialization.
    pub fn to_nested(&self) -> Vec<Vec<bool>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

/// `log Σ exp(v)` with max-shifting. Returns `-inf` iff every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(log_sum_exp_unchecked(values))
}

/// Same as [`log_sum_exp`] for callers that already know the slice is non-empty.
pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax restricted to `allow`; disallowed entries come out as exactly 0.
pub fn softmax_masked(scores: &Matrix, allow: &Mask) -> Result<Matrix> {
    if scores.rows() != allow.rows() || scores.cols() != allow.cols() {
        return Err(Error::ShapeMismatch(format!(
            "scores {:?} vs mask {}x{}",
            scores.shape(),
            allow.rows(),
            allow.cols()
        )));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let allowed = allow.row(r);
        let max = scores
            .row(r)
            .iter()
            .zip(allowed)
            .filter(|(_, &a)| a)
            .map(|(&s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow(r));
        }
        let mut total = 0.0;
        let out_row = out.row_mut(r);
        for ((o, &s), &a) in out_row.iter_mut().zip(scores.row(r)).zip(allowed) {
            if a {
                *o = (s - max).exp();
                total += *o;
            }
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

/// `W x + b` where `W` is stored as `out × in`.
pub fn affine(x: &[f64], weight: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    if weight.cols() != x.len() || weight.rows() != bias.len() {
        return Err(Error::ShapeMismatch(format!(
            "affine: W {:?}, x {}, b {}",
            weight.shape(),
            x.len(),
            bias.len()
        )));
    }
    Ok((0..weight.rows())
        .map(|i| dot(weight.row(i), x) + bias[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 3.0]).unwrap(), 3.0);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(log_sum_exp(&[]), Err(Error::EmptyInput));
    }

    #[test]
    fn softmax_masked_examples() {
        let uniform = softmax_masked(&Matrix::zeros(1, 3), &Mask::new(1, 3, true)).unwrap();
        for &v in uniform.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let scores = Matrix::row_vector(&[0.0, 5.0, 0.0]);
        let allow = Mask::from_fn(1, 3, |_, c| c != 1);
        let p = softmax_masked(&scores, &allow).unwrap();
        assert_eq!(p.data(), &[0.5, 0.0, 0.5]);

        let p = softmax_masked(&Matrix::row_vector(&[1.0, 2.0]), &Mask::new(1, 2, true)).unwrap();
        assert!((p[(0, 0)] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((p[(0, 1)] - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_rejects_empty_row() {
        let allow = Mask::from_fn(2, 2, |r, _| r == 0);
        assert_eq!(
            softmax_masked(&Matrix::zeros(2, 2), &allow),
            Err(Error::FullyMaskedRow(1))
        );
    }

    #[test]
    fn affine_examples() {
        let x = [0.3, -1.2];
        assert_eq!(affine(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap(), x.to_vec());
        assert_eq!(
            affine(&x, &Matrix::zeros(2, 2), &[1.0, 1.0]).unwrap(),
            vec![1.0, 1.0]
        );
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(affine(&[1.0, 1.0], &w, &[0.0, 0.0]).unwrap(), vec![3.0, 7.0]);
        assert!(matches!(
            affine(&[1.0], &w, &[0.0, 0.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0], [2.0, 1.0], [0.0, -1.0]]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab.data(), &[5.0, -1.0, 14.0, -1.0]);
        assert_eq!(a.matmul_t(&b.transpose()), ab);
        assert_eq!(a.transpose().t_matmul(&b), ab);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
            bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let scores = Matrix::from_vec(3, 4, vals).unwrap();
            // force one allowed entry per row
            let allow = Mask::from_fn(3, 4, |r, c| c == r || bits[r * 4 + c]);
            let p = softmax_masked(&scores, &allow).unwrap();
            for r in 0..3 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for c in 0..4 {
                    if !allow.get(r, c) {
                        prop_assert_eq!(p[(r, c)], 0.0);
                    }
                }
            }
        }

        #[test]
        fn log_sum_exp_shift_invariant(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..10),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&vals).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn affine_is_linear(
            w in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(-2.0f64..2.0, 2),
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            y in proptest::collection::vec(-2.0f64..2.0, 3),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let w = Matrix::from_vec(2, 3, w).unwrap();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, c)| alpha * a + beta * c).collect();
            let lhs = affine(&mix, &w, &b).unwrap();
            let fx = affine(&x, &w, &b).unwrap();
            let fy = affine(&y, &w, &b).unwrap();
            for i in 0..2 {
                let rhs = alpha * fx[i] + beta * fy[i] - (alpha + beta - 1.0) * b[i];
                prop_assert!((lhs[i] - rhs).abs() < 1e-12);
            }
        }
    }
}
