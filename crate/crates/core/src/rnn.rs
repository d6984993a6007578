//! The ReLU Elman network: forward pass, objective, backward operators and
//! the analytic gradient with respect to the recurrent matrix `W`.
//!
//! Layer indices follow the usual 1-based convention: `h[i][0] = 0` and
//! layers `1..=L` hold the actual states. Loss vectors exist for `l >= 2`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_matrix, LinearOperator, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub d_x: usize,
    pub d: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub w: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub dims: Dims,
}

impl NetworkParams {
    /// Random initialization: `W, A ~ N(0, 2/m)`, `B ~ N(0, 1/d)`.
    pub fn init(dims: Dims, rng: &SeededRng) -> Self {
        let m = dims.m;
        let w = gaussian_matrix(m, m, 2.0 / m as f64, &rng.split("W"));
        let a = gaussian_matrix(m, dims.d_x, 2.0 / m as f64, &rng.split("A"));
        let b = gaussian_matrix(dims.d, m, 1.0 / dims.d as f64, &rng.split("B"));
        Self { w, a, b, dims }
    }

    pub fn new(w: Matrix, a: Matrix, b: Matrix, dims: Dims) -> Result<Self> {
        let p = Self { w, a, b, dims };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        let Dims { m, d_x, d, .. } = self.dims;
        if self.w.shape() != (m, m) || self.a.shape() != (m, d_x) || self.b.shape() != (d, m) {
            return Err(Error::Shape(format!(
                "W {:?}, A {:?}, B {:?} do not match m={m}, d_x={d_x}, d={d}",
                self.w.shape(),
                self.a.shape(),
                self.b.shape()
            )));
        }
        if !(self.w.is_finite() && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    pub fn with_w(&self, w: Matrix) -> Self {
        Self { w, ..self.clone() }
    }

    fn check_data(&self, ds: &Dataset) -> Result<()> {
        self.check()?;
        ds.check_shapes()?;
        let dd = ds.dims;
        if dd.d_x != self.dims.d_x
            || dd.d != self.dims.d
            || dd.l != self.dims.l
            || dd.n != self.dims.n
        {
            return Err(Error::Shape(format!(
                "dataset dims {dd:?} vs network dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Packed sign pattern `1[g >= 0]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignMask {
    len: usize,
    words: Vec<u64>,
}

impl SignMask {
    pub fn from_preactivation(g: &[f64]) -> Self {
        let mut words = vec![0u64; g.len().div_ceil(64)];
        for (k, v) in g.iter().enumerate() {
            if *v >= 0.0 {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        Self {
            len: g.len(),
            words,
        }
    }

    pub fn ones(len: usize) -> Self {
        Self::from_preactivation(&vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, k: usize) -> bool {
        (self.words[k / 64] >> (k % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Mask of positions where the two patterns differ.
    pub fn xor(&self, other: &SignMask) -> SignMask {
        assert_eq!(self.len, other.len);
        SignMask {
            len: self.len,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a ^ b)
                .collect(),
        }
    }

    pub fn hamming(&self, other: &SignMask) -> usize {
        self.xor(other).count_ones()
    }

    /// `D x` in place.
    pub fn apply_in_place(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            if !self.get(k) {
                *v = 0.0;
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.apply_in_place(&mut y);
        y
    }
}

/// Everything the forward pass produces; indices `[i][l]` with `l` in `0..=L`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub g: Vec<Vec<Vec<f64>>>,
    pub h: Vec<Vec<Vec<f64>>>,
    pub masks: Vec<Vec<SignMask>>,
    pub y: Vec<Vec<Vec<f64>>>,
    pub loss: Vec<Vec<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn n(&self) -> usize {
        self.h.len()
    }

    pub fn l(&self) -> usize {
        self.h.first().map_or(0, |v| v.len() - 1)
    }

    pub fn m(&self) -> usize {
        self.h.first().map_or(0, |v| v[0].len())
    }

    pub fn objective(&self) -> f64 {
        objective(self)
    }

    pub fn max_loss_norm(&self) -> f64 {
        let mut best = 0.0f64;
        for li in &self.loss {
            for v in li.iter().skip(2) {
                best = best.max(dot(v, v).sqrt());
            }
        }
        best
    }

    /// Loss vectors for `l >= 2` as `[i][l-2]`.
    pub fn loss_vectors(&self) -> Vec<Vec<Vec<f64>>> {
        self.loss.iter().map(|li| li[2..].to_vec()).collect()
    }

    /// `argmax ||loss_{i,l}||`, ties to the smallest `(i, l)`.
    pub fn argmax_loss(&self) -> (usize, usize) {
        argmax_loss(&self.loss_vectors())
    }
}

/// `argmax` over `[i][l-2]` indexed loss vectors; returns `(i, l)`.
pub fn argmax_loss(loss: &[Vec<Vec<f64>>]) -> (usize, usize) {
    let mut best = (0, 2);
    let mut bv = -1.0;
    for (i, li) in loss.iter().enumerate() {
        for (j, v) in li.iter().enumerate() {
            let nv = dot(v, v);
            if nv > bv {
                bv = nv;
                best = (i, j + 2);
            }
        }
    }
    best
}

pub fn forward(params: &NetworkParams, ds: &Dataset) -> Result<ForwardTrace> {
    params.check_data(ds)?;
    let Dims { n, l, m, .. } = params.dims;
    let mut g = vec![vec![vec![0.0; m]; l + 1]; n];
    let mut h = vec![vec![vec![0.0; m]; l + 1]; n];
    let mut masks = vec![vec![SignMask::ones(m); l + 1]; n];
    let mut y = vec![vec![vec![0.0; params.dims.d]; l + 1]; n];
    let mut loss = vec![vec![vec![0.0; params.dims.d]; l + 1]; n];
    for ell in 1..=l {
        let wh: Vec<Vec<f64>> = if ell == 1 {
            vec![vec![0.0; m]; n]
        } else {
            let prev: Vec<&[f64]> = (0..n).map(|i| h[i][ell - 1].as_slice()).collect();
            params.w.matvec_many(&prev)
        };
        for i in 0..n {
            let ax = params.a.matvec(ds.token(i, ell));
            let gi: Vec<f64> = wh[i].iter().zip(&ax).map(|(u, v)| u + v).collect();
            let hi: Vec<f64> = gi
                .iter()
                .map(|v| if *v >= 0.0 { *v } else { 0.0 })
                .collect();
            masks[i][ell] = SignMask::from_preactivation(&gi);
            y[i][ell] = params.b.matvec(&hi);
            if ell >= 2 {
                loss[i][ell] = y[i][ell]
                    .iter()
                    .zip(ds.label(i, ell))
                    .map(|(a, b)| a - b)
                    .collect();
            }
            g[i][ell] = gi;
            h[i][ell] = hi;
        }
    }
    Ok(ForwardTrace {
        g,
        h,
        masks,
        y,
        loss,
    })
}

/// `f = sum_i 1/2 sum_{l >= 2} ||loss_{i,l}||^2`.
pub fn objective(trace: &ForwardTrace) -> f64 {
    let mut f = 0.0;
    for li in &trace.loss {
        for v in li.iter().skip(2) {
            f += 0.5 * dot(v, v);
        }
    }
    f
}

/// `Back_{i, l -> a}` as an explicit `d x m` matrix.
pub fn back_operator(
    params: &NetworkParams,
    trace: &ForwardTrace,
    i: usize,
    l: usize,
    a: usize,
) -> Result<Matrix> {
    let big_l = trace.l();
    if i >= trace.n() || l < 1 || l > a || a > big_l {
        return Err(Error::Index(format!(
            "Back_{{{i},{l}->{a}}} with n={}, L={big_l}",
            trace.n()
        )));
    }
    let mut rows: Vec<Vec<f64>> = (0..params.b.rows())
        .map(|r| params.b.row(r).to_vec())
        .collect();
    for layer in (l + 1..=a).rev() {
        for row in rows.iter_mut() {
            trace.masks[i][layer].apply_in_place(row);
            *row = params.w.tmatvec(row);
        }
    }
    Matrix::from_rows(&rows)
}

/// Gradient as a sum of outer products `sum_j left_j right_j^T`.
#[derive(Clone, Debug)]
pub struct GradFactors {
    pub m: usize,
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
}

impl GradFactors {
    pub fn to_matrix(&self) -> Matrix {
        let mut g = Matrix::zeros(self.m, self.m);
        self.add_to(&mut g, 1.0);
        g
    }

    /// `target += alpha * sum_j left_j right_j^T`.
    pub fn add_to(&self, target: &mut Matrix, alpha: f64) {
        let l: Vec<&[f64]> = self.left.iter().map(Vec::as_slice).collect();
        let r: Vec<&[f64]> = self.right.iter().map(Vec::as_slice).collect();
        target.add_outer_sum(alpha, &l, &r);
    }

    /// Squared Frobenius norm from the two Gram matrices.
    pub fn frobenius_sq(&self) -> f64 {
        let k = self.left.len();
        let mut s = 0.0;
        for a in 0..k {
            for b in 0..k {
                s += dot(&self.left[a], &self.left[b]) * dot(&self.right[a], &self.right[b]);
            }
        }
        s.max(0.0)
    }

    /// `<sum_j left_j right_j^T, M>`.
    pub fn inner(&self, mat: &Matrix) -> f64 {
        self.left
            .iter()
            .zip(&self.right)
            .map(|(a, b)| dot(a, &mat.matvec(b)))
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.left {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn extend(&mut self, other: GradFactors) {
        self.left.extend(other.left);
        self.right.extend(other.right);
    }
}

/// Backward vectors `u_{i,l}` for `l = 1..L-1` (index `[i][l]`, `u[i][0]` and
/// `u[i][L]` unused), given loss vectors indexed `[i][l-2]`.
pub fn backward_vectors(
    params: &NetworkParams,
    trace: &ForwardTrace,
    loss: &[Vec<Vec<f64>>],
    samples: &[usize],
) -> Vec<Vec<Vec<f64>>> {
    let Dims { l, m, .. } = params.dims;
    let mut u = vec![vec![vec![0.0; m]; l + 1]; samples.len()];
    if l < 2 {
        return u;
    }
    for (s, &i) in samples.iter().enumerate() {
        u[s][l - 1] = params.b.tmatvec(&loss[i][l - 2]);
    }
    for ell in (1..l - 1).rev() {
        let masked: Vec<Vec<f64>> = samples
            .iter()
            .enumerate()
            .map(|(s, &i)| trace.masks[i][ell + 2].apply(&u[s][ell + 1]))
            .collect();
        let refs: Vec<&[f64]> = masked.iter().map(Vec::as_slice).collect();
        let back = params.w.tmatvec_many(&refs);
        for (s, &i) in samples.iter().enumerate() {
            let bt = params.b.tmatvec(&loss[i][ell - 1]);
            u[s][ell] = back[s].iter().zip(&bt).map(|(a, b)| b + a).collect();
        }
    }
    u
}

/// Factors of `sum_{i in samples} sum_{l=1}^{L-1} D_{i,l+1} u_{i,l} h_{i,l}^T`.
pub fn gradient_factors(
    params: &NetworkParams,
    trace: &ForwardTrace,
    loss: &[Vec<Vec<f64>>],
    samples: &[usize],
) -> GradFactors {
    let l = params.dims.l;
    let u = backward_vectors(params, trace, loss, samples);
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (s, &i) in samples.iter().enumerate() {
        for ell in 1..l {
            left.push(trace.masks[i][ell + 1].apply(&u[s][ell]));
            right.push(trace.h[i][ell].clone());
        }
    }
    GradFactors {
        m: params.dims.m,
        left,
        right,
    }
}

fn check_loss_shape(params: &NetworkParams, loss: &[Vec<Vec<f64>>]) -> Result<()> {
    let Dims { n, l, d, .. } = params.dims;
    let ok = loss.len() == n
        && loss
            .iter()
            .all(|li| li.len() + 1 == l && li.iter().all(|v| v.len() == d));
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "loss vectors must be {n} x {} x {d}",
            l - 1
        )))
    }
}

pub fn gradient(params: &NetworkParams, ds: &Dataset) -> Result<Matrix> {
    let trace = forward(params, ds)?;
    let all: Vec<usize> = (0..params.dims.n).collect();
    Ok(gradient_factors(params, &trace, &trace.loss_vectors(), &all).to_matrix())
}

pub fn gradient_per_sample(params: &NetworkParams, ds: &Dataset, i: usize) -> Result<Matrix> {
    if i >= params.dims.n {
        return Err(Error::Index(format!("sample {i} with n={}", params.dims.n)));
    }
    let trace = forward(params, ds)?;
    Ok(gradient_factors(params, &trace, &trace.loss_vectors(), &[i]).to_matrix())
}

/// Gradient formula with `fixed_loss` (indexed `[i][l-2]`) in place of the
/// true loss vectors.
pub fn fake_gradient(
    params: &NetworkParams,
    ds: &Dataset,
    fixed_loss: &[Vec<Vec<f64>>],
) -> Result<Matrix> {
    check_loss_shape(params, fixed_loss)?;
    let trace = forward(params, ds)?;
    let all: Vec<usize> = (0..params.dims.n).collect();
    Ok(gradient_factors(params, &trace, fixed_loss, &all).to_matrix())
}

pub fn fake_gradient_from_trace(
    params: &NetworkParams,
    trace: &ForwardTrace,
    fixed_loss: &[Vec<Vec<f64>>],
) -> Result<GradFactors> {
    check_loss_shape(params, fixed_loss)?;
    let all: Vec<usize> = (0..params.dims.n).collect();
    Ok(gradient_factors(params, trace, fixed_loss, &all))
}

/// `D_{l2} W ... D_{l1} W` (or with per-layer matrices) as an operator.
pub struct Chain<'a> {
    pub weights: Vec<&'a Matrix>,
    pub masks: Vec<&'a SignMask>,
}

impl<'a> Chain<'a> {
    /// Chain for sample `i` over layers `l1..=l2` of a trace: the mask of
    /// layer `l` multiplies after `W`.
    pub fn from_trace(
        w: &'a Matrix,
        trace: &'a ForwardTrace,
        i: usize,
        l1: usize,
        l2: usize,
    ) -> Self {
        let masks = (l1..=l2).map(|l| &trace.masks[i][l]).collect::<Vec<_>>();
        Self {
            weights: vec![w; masks.len()],
            masks,
        }
    }
}

impl LinearOperator for Chain<'_> {
    fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.cols())
    }
    fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.rows())
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for (w, d) in self.weights.iter().zip(&self.masks) {
            v = w.matvec(&v);
            d.apply_in_place(&mut v);
        }
        v
    }
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut v = y.to_vec();
        for (w, d) in self.weights.iter().zip(&self.masks).rev() {
            d.apply_in_place(&mut v);
            v = w.tmatvec(&v);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataDims};

    fn small(n: usize, l: usize, m: usize, seed: u64) -> (NetworkParams, Dataset) {
        let dims = Dims {
            n,
            l,
            d_x: 3,
            d: 2,
            m,
        };
        let ds = generate_dataset(
            DataDims { n, l, d_x: 3, d: 2 },
            0.1,
            1.0,
            &SeededRng::new(seed),
        )
        .unwrap();
        (NetworkParams::init(dims, &SeededRng::new(seed + 100)), ds)
    }

    #[test]
    fn zero_network() {
        let (mut p, ds) = small(2, 3, 4, 1);
        p.w = Matrix::zeros(4, 4);
        p.a = Matrix::zeros(4, 3);
        let t = forward(&p, &ds).unwrap();
        for i in 0..2 {
            for l in 1..=3 {
                assert!(t.g[i][l]
                    .iter()
                    .chain(&t.h[i][l])
                    .chain(&t.y[i][l])
                    .all(|v| *v == 0.0));
            }
            for l in 2..=3 {
                let want: Vec<f64> = ds.label(i, l).iter().map(|v| -v).collect();
                assert_eq!(t.loss[i][l], want);
            }
        }
        p.b = Matrix::zeros(2, 4);
        let t = forward(&p, &ds).unwrap();
        let want: f64 = ds.labels.iter().flatten().map(|y| 0.5 * dot(y, y)).sum();
        assert!((objective(&t) - want).abs() < 1e-15);
    }

    #[test]
    fn scalar_hand_case() {
        let dims = Dims {
            n: 1,
            l: 2,
            d_x: 1,
            d: 1,
            m: 1,
        };
        let p = NetworkParams::new(
            Matrix::from_rows(&[vec![-1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            dims,
        )
        .unwrap();
        let ds = Dataset {
            dims: DataDims {
                n: 1,
                l: 2,
                d_x: 1,
                d: 1,
            },
            delta: 0.0,
            tokens: vec![vec![vec![1.0], vec![1.0]]],
            labels: vec![vec![vec![0.0]]],
        };
        let t = forward(&p, &ds).unwrap();
        assert_eq!(
            (t.g[0][1][0], t.h[0][1][0], t.g[0][2][0], t.h[0][2][0]),
            (1.0, 1.0, 0.0, 0.0)
        );
        assert!(t.masks[0][2].get(0));
    }

    #[test]
    fn scalar_chain_rule() {
        // m = 1, L = 2: f = 1/2 (b relu(w h1 + a x2) - y)^2, gradient b (b g2 - y) h1 when g2 > 0
        let dims = Dims {
            n: 1,
            l: 2,
            d_x: 1,
            d: 1,
            m: 1,
        };
        let (w, a, b, x1, x2, y) = (0.7, 0.5, 1.3, 0.8, -0.2, 0.3);
        let p = NetworkParams::new(
            Matrix::from_rows(&[vec![w]]).unwrap(),
            Matrix::from_rows(&[vec![a]]).unwrap(),
            Matrix::from_rows(&[vec![b]]).unwrap(),
            dims,
        )
        .unwrap();
        let ds = Dataset {
            dims: DataDims {
                n: 1,
                l: 2,
                d_x: 1,
                d: 1,
            },
            delta: 0.0,
            tokens: vec![vec![vec![x1], vec![x2]]],
            labels: vec![vec![vec![y]]],
        };
        let h1 = a * x1;
        let g2 = w * h1 + a * x2;
        let want = b * (b * g2 - y) * h1;
        let got = gradient(&p, &ds).unwrap().get(0, 0);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn objective_hand_sum() {
        let (p, ds) = small(1, 3, 3, 2);
        let mut t = forward(&p, &ds).unwrap();
        t.loss[0][2] = vec![1.0, 0.0];
        t.loss[0][3] = vec![0.0, 2.0];
        assert_eq!(objective(&t), 2.5);
    }

    #[test]
    fn trace_invariants() {
        let (p, ds) = small(3, 4, 16, 3);
        let t = forward(&p, &ds).unwrap();
        for i in 0..3 {
            assert!(t.h[i][0].iter().all(|v| *v == 0.0));
            for l in 1..=4 {
                for k in 0..16 {
                    let gk = t.g[i][l][k];
                    assert_eq!(t.masks[i][l].get(k), gk >= 0.0);
                    assert_eq!(t.h[i][l][k], if gk >= 0.0 { gk } else { 0.0 });
                }
                let mut rhs = p.w.matvec(&t.h[i][l - 1]);
                let ax = p.a.matvec(ds.token(i, l));
                rhs.iter_mut().zip(&ax).for_each(|(a, b)| *a += b);
                t.masks[i][l].apply_in_place(&mut rhs);
                for (a, b) in rhs.iter().zip(&t.h[i][l]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn back_operator_identities() {
        let (p, ds) = small(2, 3, 2, 4);
        let t = forward(&p, &ds).unwrap();
        assert_eq!(back_operator(&p, &t, 0, 2, 2).unwrap(), p.b);
        assert!(back_operator(&p, &t, 0, 3, 2).is_err());
        assert!(back_operator(&p, &t, 2, 1, 2).is_err());
        let dense = |l: usize| {
            let mut d = Matrix::zeros(2, 2);
            for k in 0..2 {
                d.set(k, k, if t.masks[0][l].get(k) { 1.0 } else { 0.0 });
            }
            d
        };
        let want =
            p.b.matmul(&dense(3))
                .matmul(&p.w)
                .matmul(&dense(2))
                .matmul(&p.w);
        let got = back_operator(&p, &t, 0, 1, 3).unwrap();
        for (a, b) in want.as_slice().iter().zip(got.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        let mut q = p.clone();
        q.w = Matrix::identity(2);
        let mut tt = t.clone();
        tt.masks[0]
            .iter_mut()
            .for_each(|mk| *mk = SignMask::ones(2));
        assert_eq!(back_operator(&q, &tt, 0, 1, 3).unwrap(), q.b);
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let (p, ds) = small(2, 3, 8, 5);
        let t = forward(&p, &ds).unwrap();
        let ds0 = ds
            .with_labels(t.y.iter().map(|yi| yi[2..].to_vec()).collect())
            .unwrap();
        assert!(gradient(&p, &ds0)
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| *v == 0.0));
        let z = vec![vec![vec![0.0; 2]; 2]; 2];
        assert!(fake_gradient(&p, &ds, &z)
            .unwrap()
            .as_slice()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn per_sample_and_fake_gradient() {
        let (p, ds) = small(3, 4, 10, 6);
        let full = gradient(&p, &ds).unwrap();
        let mut sum = Matrix::zeros(10, 10);
        for i in 0..3 {
            sum.axpy_assign(1.0, &gradient_per_sample(&p, &ds, i).unwrap());
        }
        assert!(sum.sub(&full).frobenius() <= 1e-10 * full.frobenius());
        assert!(gradient_per_sample(&p, &ds, 3).is_err());

        let t = forward(&p, &ds).unwrap();
        let lv = t.loss_vectors();
        assert_eq!(fake_gradient(&p, &ds, &lv).unwrap(), full);
        let doubled: Vec<Vec<Vec<f64>>> = lv
            .iter()
            .map(|a| {
                a.iter()
                    .map(|v| v.iter().map(|x| 2.0 * x).collect())
                    .collect()
            })
            .collect();
        assert_eq!(fake_gradient(&p, &ds, &doubled).unwrap(), full.scaled(2.0));
        assert!(fake_gradient(&p, &ds, &lv[..2]).is_err());
    }

    #[test]
    fn factor_norm_matches_dense() {
        let (p, ds) = small(3, 4, 12, 7);
        let t = forward(&p, &ds).unwrap();
        let f = gradient_factors(&p, &t, &t.loss_vectors(), &[0, 1, 2]);
        let g = f.to_matrix();
        assert!((f.frobenius_sq().sqrt() - g.frobenius()).abs() <= 1e-12 * g.frobenius());
        let probe = gaussian_matrix(12, 12, 1.0, &SeededRng::new(1));
        assert!(
            (f.inner(&probe) - g.inner(&probe)).abs() <= 1e-11 * g.frobenius() * probe.frobenius()
        );
    }
}
