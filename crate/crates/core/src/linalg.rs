//! Dense matrix kernel.
//!
//! Everything here works on row-major `f64` storage. Products accumulate in a
//! fixed order (inner index ascending) so that results are reproducible
//! bit-for-bit across runs and thread counts.
//!
//! Two families of low-rank routines live here and deliberately share no
//! iteration code with the compressors:
//!
//! * [`orthogonalize`] is the Gram-Schmidt step used by PowerSGD.
//! * [`best_rank_r`], [`spectrum`] and [`svd`] run subspace iteration on
//!   `MᵀM` from a fixed random start until the reconstruction error stops
//!   moving. They serve as the reference oracle and back the spectral
//!   compressor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, label};

/// Threshold below which a projected Gram-Schmidt column counts as degenerate,
/// relative to `pre-projection norm + 1`.
const DEGENERATE_REL: f64 = 1e-12;
/// Stop when successive subspace-iteration errors differ by less than this
/// fraction of `‖M‖²`.
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_MAX_SWEEPS: usize = 10_000;
const ORACLE_SEED: u64 = 0x0b57_4a11;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(
                "Matrix::new",
                format!("dimensions must be positive, got {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(
                "Matrix::new",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data).expect("non-empty rows")
    }

    /// A column vector.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values).expect("non-empty column")
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn random_normal(rows: usize, cols: usize, std_dev: f64, rng: &mut rng::Stream) -> Self {
        Self::from_fn(rows, cols, |_, _| std_dev * rng::standard_normal(rng))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self.set(i, j, v);
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(
                op,
                format!("shape {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, "zip_with")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Largest entrywise absolute difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Frobenius distance to `other`.
    pub fn distance_sq(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "distance shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// A rank-r factorisation `left · rightᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    pub left: Matrix,
    pub right: Matrix,
}

impl LowRankFactors {
    pub fn new(left: Matrix, right: Matrix) -> Result<Self> {
        if left.cols() != right.cols() {
            return Err(Error::contract(
                "LowRankFactors::new",
                format!("factor ranks differ: {} vs {}", left.cols(), right.cols()),
            ));
        }
        Ok(Self { left, right })
    }

    pub fn rank(&self) -> usize {
        self.left.cols()
    }

    pub fn reconstruct(&self) -> Matrix {
        matmul_nt(&self.left, &self.right).expect("factor ranks agree")
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::contract(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a.row(i).iter().enumerate() {
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::contract(
            "matmul_tn",
            format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..a.rows {
        let b_row = b.row(p);
        for (i, &api) in a.row(p).iter().enumerate() {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += api * bpj;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `a · bᵀ`, the shape of every low-rank decompression.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::contract(
            "matmul_nt",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, m) = (a.rows, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = a.row(i);
        for j in 0..m {
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out[i * m + j] = acc;
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c = dot(v, q);
        for (vi, qi) in v.iter_mut().zip(q) {
            *vi -= c * qi;
        }
    }
}

/// Gram-Schmidt orthonormalisation of the columns of `p`.
///
/// Each column is projected against the accepted ones twice (two passes of
/// modified Gram-Schmidt), which keeps `P̂ᵀP̂ = I` to working precision. A
/// column whose projected norm collapses below `1e-12 · (‖p_j‖ + 1)` is
/// replaced by a unit vector drawn from a stream seeded by its column index
/// and re-projected, so the output always has orthonormal columns.
pub fn orthogonalize(p: &Matrix) -> Result<Matrix> {
    if p.cols > p.rows {
        return Err(Error::contract(
            "orthogonalize",
            format!("{} columns cannot be orthonormal in R^{}", p.cols, p.rows),
        ));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(p.cols);
    for j in 0..p.cols {
        let mut v = p.col(j);
        let before = norm(&v);
        project_out(&mut v, &basis);
        project_out(&mut v, &basis);
        let mut after = norm(&v);
        let mut attempt = 0u64;
        while after < DEGENERATE_REL * (before + 1.0) {
            let mut s = rng::stream(ORACLE_SEED, &[label::GS_FILL, j as u64, attempt]);
            v = (0..p.rows).map(|_| rng::standard_normal(&mut s)).collect();
            let fresh = norm(&v);
            project_out(&mut v, &basis);
            project_out(&mut v, &basis);
            after = norm(&v);
            // A fresh Gaussian draw lands in the span of earlier columns with
            // probability zero; retry anyway if rounding says otherwise.
            if after >= DEGENERATE_REL * (fresh + 1.0) {
                break;
            }
            attempt += 1;
        }
        v.iter_mut().for_each(|x| *x /= after);
        basis.push(v);
    }
    let mut out = Matrix::zeros(p.rows, p.cols);
    for (j, q) in basis.iter().enumerate() {
        out.set_col(j, q);
    }
    Ok(out)
}

/// Right singular subspace estimate: an orthonormal `cols × r` basis from
/// subspace iteration on `MᵀM`, run until the rank-r reconstruction error
/// stops changing.
fn converged_right_subspace(m: &Matrix, r: usize) -> Matrix {
    let total = m.frobenius_sq();
    let tol = ORACLE_TOL * total.max(f64::MIN_POSITIVE);
    let mut start = rng::stream(
        ORACLE_SEED,
        &[label::ORACLE, m.rows as u64, m.cols as u64, r as u64],
    );
    let mut x = orthogonalize(&Matrix::random_normal(m.cols, r, 1.0, &mut start))
        .expect("r <= cols checked by callers");
    let mut prev: Option<f64> = None;
    for _ in 0..ORACLE_MAX_SWEEPS {
        let y = matmul(m, &x).expect("shapes agree");
        let err = total - y.frobenius_sq();
        if let Some(p) = prev {
            if (err - p).abs() < tol {
                break;
            }
        }
        prev = Some(err);
        x = orthogonalize(&matmul_tn(m, &y).expect("shapes agree")).expect("r <= cols");
    }
    x
}

fn check_rank(op: &'static str, m: &Matrix, r: usize) -> Result<()> {
    if r == 0 || r > m.rows.min(m.cols) {
        return Err(Error::contract(
            op,
            format!("rank {r} outside 1..={} for {}x{}", m.rows.min(m.cols), m.rows, m.cols),
        ));
    }
    Ok(())
}

/// Best rank-r approximation of `m` as orthonormal `left` (n×r) and
/// `right = mᵀ·left` (m×r).
pub fn best_rank_r(m: &Matrix, r: usize) -> Result<LowRankFactors> {
    check_rank("best_rank_r", m, r)?;
    let x = converged_right_subspace(m, r);
    let left = orthogonalize(&matmul(m, &x)?)?;
    let right = matmul_tn(m, &left)?;
    LowRankFactors::new(left, right)
}

/// Squared Frobenius error of the best rank-r approximation.
pub fn best_rank_r_error(m: &Matrix, r: usize) -> Result<f64> {
    let f = best_rank_r(m, r)?;
    Ok(m.distance_sq(&f.reconstruct()))
}

/// Thin singular value decomposition, `m = u · diag(sigma) · vᵀ`, singular
/// values in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows, self.u.cols, |i, j| self.u.get(i, j) * self.sigma[j]);
        matmul_nt(&us, &self.v).expect("consistent factors")
    }
}

/// Full thin SVD: the converged subspace iteration at `r = min(rows, cols)`
/// followed by a Rayleigh-Ritz rotation of the basis.
pub fn svd(m: &Matrix) -> Svd {
    let transposed = m.rows < m.cols;
    let a = if transposed { m.transpose() } else { m.clone() };
    let k = a.cols;
    let x = converged_right_subspace(&a, k);
    let ax = matmul(&a, &x).expect("shapes agree");
    let gram = matmul_tn(&ax, &ax).expect("shapes agree");
    let (eigvals, eigvecs) = symmetric_eigen(&gram);
    let v = matmul(&x, &eigvecs).expect("shapes agree");
    let sigma: Vec<f64> = eigvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let u = orthogonalize(&matmul(&a, &v).expect("shapes agree")).expect("k <= rows");
    if transposed {
        Svd { u: v, sigma, v: u }
    } else {
        Svd { u, sigma, v }
    }
}

/// All `min(rows, cols)` singular values, descending.
pub fn spectrum(m: &Matrix) -> Vec<f64> {
    svd(m).sigma
}

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(s: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(s.rows, s.cols, "symmetric_eigen needs a square matrix");
    let n = s.rows;
    let mut a = s.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    (values, vectors)
}

/// Floating-point operation counts for the kernels above, used by the
/// communication simulator's compute accounting.
pub mod flops {
    /// `(n×k)·(k×m)`: one multiply and one add per term.
    pub fn matmul(n: usize, k: usize, m: usize) -> u64 {
        2 * (n * k * m) as u64
    }

    /// Two-pass Gram-Schmidt on an `n×r` matrix.
    pub fn orthogonalize(n: usize, r: usize) -> u64 {
        let (n, r) = (n as u64, r as u64);
        // per column j: 2 passes × j (dot + axpy) of 4n flops, a norm and a scale.
        (0..r).map(|j| 2 * j * 4 * n + 3 * n).sum()
    }

    /// Dense thin SVD of an `n×m` matrix, Golub & Van Loan's
    /// `4·a·b² + 8·b³` estimate with `a ≥ b`.
    pub fn dense_svd(n: usize, m: usize) -> u64 {
        let (a, b) = (n.max(m) as u64, n.min(m) as u64);
        4 * a * b * b + 8 * b * b * b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut rng::stream(seed, &[label::FIXTURE]))
    }

    fn gram_defect(q: &Matrix) -> f64 {
        matmul_tn(q, q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn identity_times_b() {
        let b = rand_matrix(3, 4, 1);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn ones_times_ones_is_twos() {
        let ones = Matrix::from_fn(2, 2, |_, _| 1.0);
        let out = matmul(&ones, &ones).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = rand_matrix(5, 4, 2);
        let b = rand_matrix(4, 3, 3);
        let c = matmul(&a, &b).unwrap();
        let d = naive(&a, &b);
        assert!(c.max_abs_diff(&d) <= 1e-12 * d.max_abs());
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = rand_matrix(2, 3, 1);
        assert!(matches!(matmul(&a, &a), Err(Error::Contract { .. })));
        assert!(matmul_tn(&a, &rand_matrix(3, 3, 1)).is_err());
        assert!(matmul_nt(&a, &rand_matrix(3, 2, 1)).is_err());
    }

    #[test]
    fn transpose_products_agree_with_explicit_transpose() {
        let a = rand_matrix(6, 4, 4);
        let b = rand_matrix(6, 3, 5);
        let tn = matmul_tn(&a, &b).unwrap();
        assert!(tn.max_abs_diff(&naive(&a.transpose(), &b)) <= 1e-12);
        let c = rand_matrix(5, 4, 6);
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.max_abs_diff(&naive(&a, &c.transpose())) <= 1e-12);
    }

    #[test]
    fn orthonormal_input_is_a_fixed_point() {
        let q = orthogonalize(&rand_matrix(7, 3, 7)).unwrap();
        let again = orthogonalize(&q).unwrap();
        assert!(again.max_abs_diff(&q) <= 1e-12);
    }

    #[test]
    fn single_column_is_normalised() {
        let v = Matrix::column(vec![3.0, 0.0, 4.0]);
        let q = orthogonalize(&v).unwrap();
        assert!(q.max_abs_diff(&Matrix::column(vec![0.6, 0.0, 0.8])) <= 1e-15);
    }

    #[test]
    fn orthogonalize_preserves_the_projection() {
        let p = rand_matrix(6, 3, 8);
        let q = orthogonalize(&p).unwrap();
        assert!(gram_defect(&q) <= 1e-10);
        let coeffs = matmul_tn(&q, &p).unwrap();
        let back = matmul(&q, &coeffs).unwrap();
        assert!(back.max_abs_diff(&p) <= 1e-10);
    }

    #[test]
    fn orthogonalize_is_upper_triangular_change_of_basis() {
        // p = P̂·R with R = P̂ᵀp upper triangular.
        let p = rand_matrix(9, 4, 9);
        let q = orthogonalize(&p).unwrap();
        let r = matmul_tn(&q, &p).unwrap();
        for i in 0..4 {
            for j in 0..i {
                assert!(r.get(i, j).abs() <= 1e-12 * p.max_abs(), "R[{i},{j}]");
            }
        }
    }

    #[test]
    fn degenerate_columns_are_replaced() {
        let zero = Matrix::zeros(5, 2);
        let q = orthogonalize(&zero).unwrap();
        assert!(gram_defect(&q) <= 1e-10);

        let mut dup = Matrix::zeros(4, 3);
        let c = [1.0, 2.0, 3.0, 4.0];
        dup.set_col(0, &c);
        dup.set_col(1, &c);
        dup.set_col(2, &[0.0, 1.0, 0.0, 0.0]);
        let q = orthogonalize(&dup).unwrap();
        assert!(gram_defect(&q) <= 1e-10);
        // deterministic replacement
        assert_eq!(q, orthogonalize(&dup).unwrap());
    }

    #[test]
    fn orthogonalize_rejects_wide_input() {
        assert!(orthogonalize(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn rank_one_recovered_exactly() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let m = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let err = best_rank_r_error(&m, 1).unwrap();
        assert!(err <= 1e-10 * m.frobenius_sq());
    }

    #[test]
    fn diagonal_tail_is_forced() {
        let d = [4.0, 3.0, 2.0, 1.0];
        let m = Matrix::from_fn(4, 4, |i, j| if i == j { d[i] } else { 0.0 });
        let err = best_rank_r_error(&m, 2).unwrap();
        assert!((err - 5.0).abs() <= 1e-10, "err = {err}");
        let f = best_rank_r(&m, 2).unwrap();
        assert!(gram_defect(&f.left) <= 1e-10);
    }

    #[test]
    fn best_rank_r_matches_full_spectrum_tail() {
        let m = rand_matrix(20, 15, 10);
        let sigma = spectrum(&m);
        assert_eq!(sigma.len(), 15);
        let tail: f64 = sigma[3..].iter().map(|s| s * s).sum();
        let err = best_rank_r_error(&m, 3).unwrap();
        assert!((err - tail).abs() <= 1e-8 * tail, "err {err} tail {tail}");
    }

    #[test]
    fn best_rank_r_rejects_bad_rank() {
        let m = rand_matrix(3, 2, 1);
        assert!(best_rank_r(&m, 0).is_err());
        assert!(best_rank_r(&m, 3).is_err());
    }

    #[test]
    fn svd_reconstructs_wide_and_tall() {
        for (r, c) in [(7, 4), (4, 7), (5, 5)] {
            let m = rand_matrix(r, c, (r * 10 + c) as u64);
            let s = svd(&m);
            assert!(s.reconstruct().max_abs_diff(&m) <= 1e-10);
            assert!(gram_defect(&s.u) <= 1e-10);
            assert!(gram_defect(&s.v) <= 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn jacobi_diagonalises() {
        let a = rand_matrix(5, 5, 11);
        let s = matmul_tn(&a, &a).unwrap();
        let (vals, vecs) = symmetric_eigen(&s);
        let d = Matrix::from_fn(5, 5, |i, j| if i == j { vals[i] } else { 0.0 });
        let back = matmul_nt(&matmul(&vecs, &d).unwrap(), &vecs).unwrap();
        assert!(back.max_abs_diff(&s) <= 1e-10 * s.max_abs());
    }
}
