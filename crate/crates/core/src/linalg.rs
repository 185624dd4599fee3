//! Dense row-major matrices and the handful of kernels the pruning code needs.
//!
//! Everything here accumulates in `f64`. Weight files store `f32`, but Hessian
//! conditioning at this scale is only comfortable in double precision.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    /// Largest absolute entrywise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Columns reordered so that output column `p` is input column `perm[p]`.
    pub fn select_columns(&self, perm: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, perm.len(), |i, p| self[(i, perm[p])])
    }

    /// Symmetric reorder `P A Pᵀ` with the same convention as [`select_columns`].
    ///
    /// [`select_columns`]: Matrix::select_columns
    pub fn select_symmetric(&self, perm: &[usize]) -> Matrix {
        Matrix::from_fn(perm.len(), perm.len(), |i, j| self[(perm[i], perm[j])])
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, the natural product for row-major activations against
/// `(out_features × in_features)` weights.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_transb",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn column_l2_norms(x: &Matrix) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("column_l2_norms of an empty matrix"));
    }
    let mut sq = vec![0.0; x.cols];
    for i in 0..x.rows {
        for (s, v) in sq.iter_mut().zip(x.row(i)) {
            *s += v * v;
        }
    }
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// Lower-triangular `L` with `L Lᵀ = h`. Fails on the first non-positive pivot.
pub fn cholesky(h: &Matrix) -> Result<Matrix> {
    if h.rows != h.cols {
        return Err(Error::Shape {
            op: "cholesky",
            left: h.shape(),
            right: h.shape(),
        });
    }
    let n = h.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

fn lower_triangular_inverse(l: &Matrix) -> Matrix {
    let n = l.rows;
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = 1.0 / l[(j, j)];
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[(i, k)] * inv[(k, j)];
            }
            inv[(i, j)] = s / l[(i, i)];
        }
    }
    inv
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(h: &Matrix) -> Result<Matrix> {
    if h.rows != h.cols {
        return Err(Error::invalid(format!(
            "spd_inverse needs a square matrix, got {}x{}",
            h.rows, h.cols
        )));
    }
    if !h.is_symmetric(1e-9) {
        return Err(Error::invalid("spd_inverse input is not symmetric within 1e-9"));
    }
    let l = cholesky(h)?;
    let li = lower_triangular_inverse(&l);
    // h⁻¹ = L⁻ᵀ L⁻¹, only the lower triangle is computed then mirrored.
    let n = h.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += li[(k, i)] * li[(k, j)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
        })
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let x = random(rng, 2 * n, n);
        let mut g = naive_matmul(&x.transpose(), &x);
        for i in 0..n {
            g[(i, i)] += 0.1;
        }
        g
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let id = Matrix::identity(2);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let c = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &c).unwrap(), Matrix::from_rows(&[[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 8, 8);
        let b = random(&mut rng, 8, 8);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        let bt = b.transpose();
        assert!(matmul_transb(&a, &bt).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn column_norms() {
        let x = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(column_l2_norms(&x).unwrap(), vec![5.0]);
        assert_eq!(column_l2_norms(&Matrix::zeros(3, 2)).unwrap(), vec![0.0, 0.0]);
        assert!(column_l2_norms(&Matrix::zeros(0, 0)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 16, 4);
        let got = column_l2_norms(&x).unwrap();
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..16 {
                s += x[(i, j)].powi(2);
            }
            let want = s.sqrt();
            assert!((got[j] - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn spd_inverse_small_cases() {
        assert_eq!(spd_inverse(&Matrix::identity(4)).unwrap(), Matrix::identity(4));
        let h = Matrix::from_rows(&[[2.0, 0.0], [0.0, 4.0]]);
        let inv = spd_inverse(&h).unwrap();
        assert!(inv.max_abs_diff(&Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.25]])) < 1e-15);
    }

    #[test]
    fn spd_inverse_random_product_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_spd(&mut rng, 8);
        let inv = spd_inverse(&h).unwrap();
        let prod = matmul(&h, &inv).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(8)) <= 1e-8);
    }

    #[test]
    fn spd_inverse_errors() {
        assert!(matches!(
            spd_inverse(&Matrix::zeros(2, 3)),
            Err(Error::InvalidInput(_))
        ));
        let indefinite = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        let err = spd_inverse(&indefinite).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
        assert!(err.to_string().contains("damping"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn double_inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let h = random_spd(&mut rng, 6);
            let back = spd_inverse(&spd_inverse(&h).unwrap()).unwrap();
            assert!(back.max_abs_diff(&h) <= 1e-6 * h.max_abs());
        }
    }
}
