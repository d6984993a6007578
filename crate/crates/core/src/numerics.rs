//! Dense linear algebra and seeded randomness.
//!
//! Everything is `f64`, row-major, and allocation-explicit. Kernels that touch
//! an `m x m` matrix are written so that each row is streamed from memory once
//! per call, which is what dominates cost on wide networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y`.
    pub fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "tmatvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self * x_j` for several vectors at once; each row is read once.
    pub fn matvec_many(&self, xs: &[&[f64]]) -> Vec<Vec<f64>> {
        for x in xs {
            assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        }
        let mut out = vec![vec![0.0; self.rows]; xs.len()];
        for r in 0..self.rows {
            let row = self.row(r);
            for (j, x) in xs.iter().enumerate() {
                out[j][r] = dot(row, x);
            }
        }
        out
    }

    /// `self^T * y_j` for several vectors at once; each row is read once.
    pub fn tmatvec_many(&self, ys: &[&[f64]]) -> Vec<Vec<f64>> {
        for y in ys {
            assert_eq!(y.len(), self.rows, "tmatvec dimension mismatch");
        }
        let mut out = vec![vec![0.0; self.cols]; ys.len()];
        for r in 0..self.rows {
            let row = self.row(r);
            for (j, y) in ys.iter().enumerate() {
                if y[r] != 0.0 {
                    axpy(y[r], row, &mut out[j]);
                }
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), orow);
                }
            }
        }
        out
    }

    /// `self += alpha * sum_j a_j b_j^T`, one pass over the matrix.
    pub fn add_outer_sum(&mut self, alpha: f64, left: &[&[f64]], right: &[&[f64]]) {
        assert_eq!(left.len(), right.len());
        for (a, b) in left.iter().zip(right) {
            assert_eq!(a.len(), self.rows);
            assert_eq!(b.len(), self.cols);
        }
        let cols = self.cols;
        for r in 0..self.rows {
            let row = &mut self.data[r * cols..(r + 1) * cols];
            for (a, b) in left.iter().zip(right) {
                let s = alpha * a[r];
                if s != 0.0 {
                    axpy(s, b, row);
                }
            }
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn axpy_assign(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        axpy(s, &other.data, &mut self.data);
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Dot product with four independent accumulators so LLVM can vectorize.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Reproducible random stream: a ChaCha8 key from `seed` and a stream id
/// selecting one of 2^64 independent keystreams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededRng {
    pub seed: u64,
    pub stream_id: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream keyed by a task label.
    pub fn split(&self, label: &str) -> Self {
        let mut h = fnv1a(label.as_bytes());
        h ^= splitmix64(self.stream_id);
        Self {
            seed: self.seed,
            stream_id: splitmix64(h),
        }
    }

    /// Child stream keyed by an index.
    pub fn split_index(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x9e37_79b9))),
        }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream_id);
        r
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Matrix with i.i.d. `N(0, variance)` entries. Zero variance gives zeros.
pub fn gaussian_matrix(rows: usize, cols: usize, variance: f64, rng: &SeededRng) -> Matrix {
    assert!(variance >= 0.0, "variance must be nonnegative");
    if variance == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let mut g = rng.generator();
    Matrix {
        rows,
        cols,
        data: gaussian_vec(&mut g, rows * cols, variance.sqrt()),
    }
}

/// Orthonormal columns in `R^ambient_dim`.
#[derive(Clone, Debug)]
pub struct OrthonormalBasis {
    ambient_dim: usize,
    columns: Vec<Vec<f64>>,
    completions: usize,
}

impl OrthonormalBasis {
    pub fn empty(ambient_dim: usize) -> Self {
        Self {
            ambient_dim,
            columns: Vec::new(),
            completions: 0,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Number of columns filled by arbitrary completion.
    pub fn completions(&self) -> usize {
        self.completions
    }

    fn residual(&self, v: &[f64]) -> Vec<f64> {
        // two passes of modified Gram-Schmidt keep orthogonality near machine precision
        let mut r = v.to_vec();
        for _ in 0..2 {
            for q in &self.columns {
                let c = dot(q, &r);
                axpy(-c, q, &mut r);
            }
        }
        r
    }

    /// Appends the normalized residual of `v`, or a random orthogonal unit
    /// vector when the residual is degenerate.
    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.ambient_dim {
            return Err(Error::Shape(format!(
                "vector of length {} in ambient dimension {}",
                v.len(),
                self.ambient_dim
            )));
        }
        if self.columns.len() >= self.ambient_dim {
            return Err(Error::Infeasible("basis already spans the space".into()));
        }
        let r = self.residual(v);
        let rn = norm(&r);
        if rn >= 1e-10 * (norm(v) + 1.0) {
            self.columns.push(scale(&r, 1.0 / rn));
            return Ok(());
        }
        let stream = SeededRng::with_stream(self.ambient_dim as u64, self.columns.len() as u64);
        let mut g = stream.generator();
        loop {
            let cand = gaussian_vec(&mut g, self.ambient_dim, 1.0);
            let r = self.residual(&cand);
            let rn = norm(&r);
            if rn > 1e-6 {
                self.columns.push(scale(&r, 1.0 / rn));
                self.completions += 1;
                return Ok(());
            }
        }
    }

    /// `(I - U U^T) h`.
    pub fn project_complement(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.ambient_dim {
            return Err(Error::Shape(format!(
                "vector of length {} in ambient dimension {}",
                h.len(),
                self.ambient_dim
            )));
        }
        Ok(self.residual(h))
    }
}

pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Result<OrthonormalBasis> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut basis = OrthonormalBasis::empty(dim);
    for v in vectors {
        basis.push(v)?;
    }
    Ok(basis)
}

pub fn project_complement(basis: &OrthonormalBasis, h: &[f64]) -> Result<Vec<f64>> {
    basis.project_complement(h)
}

/// A linear map known only through its action.
pub trait LinearOperator {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

impl LinearOperator for Matrix {
    fn input_dim(&self) -> usize {
        self.cols
    }
    fn output_dim(&self) -> usize {
        self.rows
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.tmatvec(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Iteration cap: `10 ln(rows * cols)` with a floor of 200 for small shapes.
pub fn power_iteration_cap(rows: usize, cols: usize) -> usize {
    let base = (10.0 * ((rows.max(1) * cols.max(1)) as f64).ln()).ceil() as usize;
    base.max(200)
}

/// Largest singular value by power iteration on `M^T M` with one randomized
/// restart; the better of the two runs is returned.
pub fn spectral_norm_op<O: LinearOperator + ?Sized>(
    op: &O,
    rel_tol: f64,
    rng: &SeededRng,
) -> SpectralEstimate {
    let max_iter = power_iteration_cap(op.output_dim(), op.input_dim());
    spectral_norm_op_capped(op, rel_tol, rng, max_iter)
}

pub fn spectral_norm_op_capped<O: LinearOperator + ?Sized>(
    op: &O,
    rel_tol: f64,
    rng: &SeededRng,
    max_iter: usize,
) -> SpectralEstimate {
    let n = op.input_dim();
    if n == 0 || op.output_dim() == 0 {
        return SpectralEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    let mut best = SpectralEstimate {
        value: 0.0,
        converged: false,
        iterations: 0,
    };
    for restart in 0..2u64 {
        let mut g = rng.split_index(restart).generator();
        let mut v = gaussian_vec(&mut g, n, 1.0);
        let vn = norm(&v);
        v.iter_mut().for_each(|x| *x /= vn);
        let mut est = 0.0;
        let mut converged = false;
        let mut iters = 0;
        for it in 0..max_iter {
            iters = it + 1;
            let y = op.apply(&v);
            let sigma = norm(&y);
            if sigma == 0.0 {
                est = 0.0;
                converged = true;
                break;
            }
            let mut w = op.apply_transpose(&y);
            let wn = norm(&w);
            if wn == 0.0 {
                est = sigma;
                converged = true;
                break;
            }
            w.iter_mut().for_each(|x| *x /= wn);
            let prev = est;
            est = sigma;
            v = w;
            if it > 0 && (est - prev).abs() <= rel_tol * est {
                converged = true;
                break;
            }
        }
        let total = best.iterations + iters;
        if est > best.value || restart == 0 {
            best = SpectralEstimate {
                value: est,
                converged,
                iterations: total,
            };
        } else {
            best.iterations = total;
            best.converged |= converged && (best.value - est).abs() <= rel_tol.sqrt() * best.value;
        }
        if best.value == 0.0 {
            break;
        }
    }
    best
}

pub fn spectral_norm(m: &Matrix, rel_tol: f64) -> SpectralEstimate {
    spectral_norm_op(
        m,
        rel_tol,
        &SeededRng::with_stream(0x5eed, (m.rows * 31 + m.cols) as u64),
    )
}

/// `(sum_i ||row_i||_2^p)^(1/p)`.
pub fn row_lp_norm(m: &Matrix, p: f64) -> f64 {
    assert!(p >= 1.0, "p must be at least 1");
    let s: f64 = (0..m.rows).map(|r| norm(m.row(r)).powf(p)).sum();
    if p == 2.0 {
        return m.frobenius();
    }
    s.powf(1.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_zero_variance_is_zero() {
        let m = gaussian_matrix(3, 4, 0.0, &SeededRng::new(1));
        assert!(m.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gaussian_second_moment() {
        let m = gaussian_matrix(1000, 1000, 1.0, &SeededRng::new(7));
        let ms = m.as_slice().iter().map(|v| v * v).sum::<f64>() / 1e6;
        assert!((0.99..=1.01).contains(&ms), "{ms}");
    }

    #[test]
    fn gaussian_is_reproducible_and_streams_differ() {
        let r = SeededRng::with_stream(3, 9);
        assert_eq!(
            gaussian_matrix(5, 5, 2.0, &r),
            gaussian_matrix(5, 5, 2.0, &r)
        );
        assert_ne!(
            gaussian_matrix(5, 5, 2.0, &r),
            gaussian_matrix(5, 5, 2.0, &r.split("x"))
        );
    }

    #[test]
    fn gram_schmidt_examples() {
        let b = gram_schmidt(&[vec![3.0, 4.0]]).unwrap();
        assert!((b.columns()[0][0] - 0.6).abs() < 1e-15 && (b.columns()[0][1] - 0.8).abs() < 1e-15);
        let b = gram_schmidt(&[vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let c = &b.columns()[1];
        assert!(c[0].abs() < 1e-15 && (c[1] - 1.0).abs() < 1e-15 && c[2].abs() < 1e-15);
        let b = gram_schmidt(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let c = &b.columns()[1];
        assert!(c[0].abs() < 1e-12 && (c[1].abs() - 1.0).abs() < 1e-12);
        assert_eq!(b.completions(), 1);
    }

    #[test]
    fn gram_schmidt_rejects_dimension_mismatch() {
        assert!(gram_schmidt(&[vec![1.0, 0.0], vec![1.0]]).is_err());
    }

    #[test]
    fn projection_examples() {
        let e = OrthonormalBasis::empty(3);
        assert_eq!(
            e.project_complement(&[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        let b = gram_schmidt(&[vec![1.0, 2.0, 2.0]]).unwrap();
        let p = b.project_complement(&b.columns()[0].clone()).unwrap();
        assert!(norm(&p) < 1e-15);
        assert!(b.project_complement(&[1.0]).is_err());
    }

    #[test]
    fn projection_matches_dense_oracle() {
        let mut g = SeededRng::new(11).generator();
        let vecs: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut g, 5, 1.0)).collect();
        let b = gram_schmidt(&vecs).unwrap();
        let mut p = Matrix::identity(5);
        for q in b.columns() {
            for r in 0..5 {
                for c in 0..5 {
                    p.set(r, c, p.get(r, c) - q[r] * q[c]);
                }
            }
        }
        let h = gaussian_vec(&mut g, 5, 1.0);
        let want = p.matvec(&h);
        let got = b.project_complement(&h).unwrap();
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn spectral_norm_simple() {
        assert!((spectral_norm(&Matrix::identity(5), 1e-12).value - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&Matrix::diag(&[3.0, 1.0]), 1e-12).value - 3.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3), 1e-9).value, 0.0);
    }

    #[test]
    fn row_lp_examples() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(row_lp_norm(&m, 1.0), 5.0);
        assert_eq!(row_lp_norm(&Matrix::zeros(3, 2), 3.0), 0.0);
        let g = gaussian_matrix(4, 7, 1.0, &SeededRng::new(2));
        assert_eq!(row_lp_norm(&g, 2.0), g.frobenius());
    }

    #[test]
    fn batched_kernels_match_single() {
        let m = gaussian_matrix(7, 5, 1.0, &SeededRng::new(4));
        let mut g = SeededRng::new(5).generator();
        let xs: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut g, 5, 1.0)).collect();
        let ys: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut g, 7, 1.0)).collect();
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        for (j, out) in m.matvec_many(&xr).iter().enumerate() {
            assert_eq!(out, &m.matvec(&xs[j]));
        }
        for (j, out) in m.tmatvec_many(&yr).iter().enumerate() {
            assert_eq!(out, &m.tmatvec(&ys[j]));
        }
        let t = m.transpose();
        for (a, b) in t.matvec(&ys[0]).iter().zip(m.tmatvec(&ys[0])) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
