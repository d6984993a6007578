//! Gradient lower/upper bounds, semi-smoothness and the exact decomposition
//! of `f(W + W') - f(W)` into a linear part and sign-change corrections.

use serde::{Deserialize, Serialize};

use super::report::{ProbeReport, Record};
use super::TheoryScales;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_vec, norm, spectral_norm_op, sub, Matrix, SeededRng};
use crate::rnn::{
    argmax_loss, backward_vectors, forward, gradient_factors, ForwardTrace, GradFactors,
    NetworkParams,
};
use crate::training::TrainLog;

/// Relative tolerance for the algebraic identities; exceeding it is a bug.
pub const IDENTITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeParams {
    pub beta_plus: f64,
    pub beta_minus: f64,
    pub theta: f64,
    pub n_mcd: f64,
}

impl LandscapeParams {
    /// `beta+ = delta/rho^2`, `beta- = delta/rho^10`, `theta` at the geometric
    /// middle of `[rho^4 beta-, beta+/rho^3]` and `N = rho^22/beta-^2` clamped to `m`.
    pub fn new(scales: TheoryScales, delta: f64, m: usize) -> Result<Self> {
        let rho = scales.rho;
        let beta_plus = delta / rho.powi(2);
        let beta_minus = delta / rho.powi(10);
        let (lo, hi) = (rho.powi(4) * beta_minus, beta_plus / rho.powi(3));
        let n_mcd = (rho.powi(22) / (beta_minus * beta_minus)).min(m as f64);
        let p = Self {
            beta_plus,
            beta_minus,
            theta: (lo * hi).sqrt(),
            n_mcd,
        };
        p.validate(rho)?;
        Ok(p)
    }

    pub fn theta_interval(rho: f64, beta_minus: f64, beta_plus: f64) -> (f64, f64) {
        (rho.powi(4) * beta_minus, beta_plus / rho.powi(3))
    }

    pub fn validate(&self, rho: f64) -> Result<()> {
        let (lo, hi) = Self::theta_interval(rho, self.beta_minus, self.beta_plus);
        let positive = [self.beta_plus, self.beta_minus, self.theta, self.n_mcd]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive
            || self.beta_minus >= self.beta_plus
            || self.theta < lo * (1.0 - 1e-12)
            || self.theta > hi * (1.0 + 1e-12)
        {
            return Err(Error::Invalid(format!(
                "landscape parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Diagonal `D''` with entries in `[-1, 1]` such that
/// `relu(a) - relu(b) = (D + D'')(a - b)` where `D = 1[a >= 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignChangeMatrix {
    pub diag: Vec<f64>,
}

impl SignChangeMatrix {
    pub fn from_pair(a: &[f64], b: &[f64]) -> Self {
        let diag = a
            .iter()
            .zip(b)
            .map(|(&ak, &bk)| match (ak >= 0.0, bk >= 0.0) {
                (true, false) => bk / (ak - bk),
                (false, true) => bk / (bk - ak),
                _ => 0.0,
            })
            .collect();
        Self { diag }
    }

    pub fn nnz(&self) -> usize {
        self.diag.iter().filter(|v| **v != 0.0).count()
    }

    pub fn support(&self) -> Vec<usize> {
        self.diag
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    /// `(D + D'') x` with `D = 1[a >= 0]`.
    pub fn apply_with(&self, a: &[f64], x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| (if a[k] >= 0.0 { 1.0 } else { 0.0 } + self.diag[k]) * v)
            .collect()
    }
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn rel(res: f64, scale: f64) -> f64 {
    if res == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        res / scale
    }
}

/// Row norms `||sum_j left_j[k] right_j||` for every `k`.
fn factor_row_norms(gf: &GradFactors) -> Vec<f64> {
    let kk = gf.right.len();
    let mut gram = vec![0.0; kk * kk];
    for a in 0..kk {
        for b in a..kk {
            let v = dot(&gf.right[a], &gf.right[b]);
            gram[a * kk + b] = v;
            gram[b * kk + a] = v;
        }
    }
    (0..gf.m)
        .map(|k| {
            let mut s = 0.0;
            for a in 0..kk {
                let la = gf.left[a][k];
                if la == 0.0 {
                    continue;
                }
                for b in 0..kk {
                    s += la * gf.left[b][k] * gram[a * kk + b];
                }
            }
            s.max(0.0).sqrt()
        })
        .collect()
}

fn max_norm(loss: &[Vec<Vec<f64>>]) -> f64 {
    loss.iter().flatten().map(|v| norm(v)).fold(0.0, f64::max)
}

/// `r = ||grad f||^2 / (m f)`, per-sample `||grad f_i||^2 / (m f)` and
/// `||grad f||^2 / (m max ||loss||^2)`.
pub fn pl_ratio_probe(params: &NetworkParams, ds: &Dataset) -> Result<ProbeReport> {
    let trace = forward(params, ds)?;
    let loss = trace.loss_vectors();
    let f = trace.objective();
    let m = params.dims.m as f64;
    let all: Vec<usize> = (0..params.dims.n).collect();
    let g2 = gradient_factors(params, &trace, &loss, &all).frobenius_sq();
    let mut recs = vec![Record::new("grad_fro_sq", g2)];
    if f > 0.0 {
        recs.push(Record::new("pl_ratio", g2 / (m * f)));
        for i in 0..params.dims.n {
            let gi = gradient_factors(params, &trace, &loss, &[i]).frobenius_sq();
            recs.push(Record::new("per_sample_ratio", gi / (m * f)).i(i));
        }
        let ml = max_norm(&loss);
        recs.push(Record::new("max_loss_ratio", g2 / (m * ml * ml)));
    }
    Ok(ProbeReport::new("pl_ratio", "gradient-lower-bound", recs)
        .with_extra("objective", f)
        .with_extra("undefined", if f > 0.0 { 0.0 } else { 1.0 }))
}

/// `r(t) = grad_fro(t)^2 / (m f(t))` along a logged run.
pub fn pl_ratio_trajectory(log: &TrainLog, m: usize) -> Vec<f64> {
    log.rows
        .iter()
        .map(|r| {
            if r.f > 0.0 {
                r.grad_fro * r.grad_fro / (m as f64 * r.f)
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Checks `r(t) >= floor_frac * r(0)` at every logged step with `f > eps`.
pub fn pl_floor_probe(log: &TrainLog, m: usize, floor_frac: f64, eps: f64) -> ProbeReport {
    let ratios = pl_ratio_trajectory(log, m);
    let r0 = ratios.first().copied().unwrap_or(f64::NAN);
    let floor = floor_frac * r0;
    let recs = log
        .rows
        .iter()
        .zip(&ratios)
        .filter(|(row, _)| row.f > eps)
        .map(|(row, r)| {
            let mut rec = Record::new("pl_ratio", *r).lower(floor);
            rec.l = Some(row.step);
            rec
        })
        .collect();
    ProbeReport::new("pl_floor", "gradient-lower-bound", recs)
        .with_extra("r0", r0)
        .with_extra(
            "min_ratio_over_r0",
            ratios
                .iter()
                .filter(|v| v.is_finite())
                .fold(f64::INFINITY, |a, b| a.min(*b))
                / r0,
        )
}

/// `count` log-spaced scales from `1e-4/sqrt(m)` to `1e-1/sqrt(m)`.
pub fn smoothness_tau_grid(m: usize, count: usize) -> Vec<f64> {
    let s = (m as f64).sqrt();
    let count = count.max(2);
    (0..count)
        .map(|j| 10f64.powf(-4.0 + 3.0 * j as f64 / (count - 1) as f64) / s)
        .collect()
}

/// Gaussian direction rescaled to spectral norm 1.
pub fn unit_spectral_direction(m: usize, rng: &SeededRng) -> Matrix {
    let g = crate::numerics::gaussian_matrix(m, m, 1.0, rng);
    let s = spectral_norm_op(&g, 1e-9, &rng.split("norm")).value;
    g.scaled(1.0 / s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessFit {
    pub a: f64,
    pub b: f64,
    pub b_envelope: f64,
    pub directional: f64,
    /// `|r(tau_min)| / (tau_min |<grad f, W'>|)`.
    pub first_order_rel: f64,
}

/// `r(tau) = f(W + tau W') - f(W) - tau <grad f(W), W'>` on the grid, with
/// the fit `r/tau = a + b tau` and the smallest `b_env >= b` such that
/// `max(a, 0) tau + b_env tau^2` dominates every sample.
pub fn semi_smoothness_probe(
    params: &NetworkParams,
    ds: &Dataset,
    direction: &Matrix,
    taus: &[f64],
) -> Result<(SmoothnessFit, ProbeReport)> {
    if taus.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::Invalid("scales must be positive".into()));
    }
    let trace = forward(params, ds)?;
    let f0 = trace.objective();
    let all: Vec<usize> = (0..params.dims.n).collect();
    let directional =
        gradient_factors(params, &trace, &trace.loss_vectors(), &all).inner(direction);
    let mut rs = Vec::with_capacity(taus.len());
    for &t in taus {
        let mut w = params.w.clone();
        w.axpy_assign(t, direction);
        let ft = forward(&params.with_w(w), ds)?.objective();
        rs.push(ft - f0 - t * directional);
    }
    let pts: Vec<(f64, f64)> = taus.iter().zip(&rs).map(|(t, r)| (*t, r / t)).collect();
    let (a, b) = if pts.len() >= 3 {
        let fit = crate::runner::fit::scaling_fit(&pts)?;
        (fit.intercept, fit.slope)
    } else {
        (0.0, 0.0)
    };
    let ap = a.max(0.0);
    let b_env = taus
        .iter()
        .zip(&rs)
        .map(|(t, r)| (r - ap * t) / (t * t))
        .fold(b.max(0.0), f64::max);
    let (tmin, rmin) = taus
        .iter()
        .zip(&rs)
        .min_by(|x, y| x.0.total_cmp(y.0))
        .map(|(t, r)| (*t, *r))
        .unwrap_or((1.0, 0.0));
    let first_order_rel = rel(rmin.abs() / tmin, directional.abs());
    let recs = taus
        .iter()
        .zip(&rs)
        .map(|(t, r)| Record::new("residual", *r).upper(ap * t + b_env * t * t * (1.0 + 1e-12)))
        .collect();
    let fit = SmoothnessFit {
        a,
        b,
        b_envelope: b_env,
        directional,
        first_order_rel,
    };
    let rep = ProbeReport::new("semi_smoothness", "semi-smoothness", recs)
        .with_extra("a_fit", a)
        .with_extra("b_fit", b)
        .with_extra("b_envelope", b_env)
        .with_extra("directional", directional)
        .with_extra("first_order_rel", first_order_rel)
        .with_extra("objective", f0);
    Ok((fit, rep))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResiduals {
    pub pointwise: f64,
    pub telescoping: f64,
    pub rearrangement: f64,
    pub max_sign_change_nnz: usize,
}

impl DecompositionResiduals {
    pub fn ok(&self) -> bool {
        self.pointwise <= IDENTITY_TOL
            && self.telescoping <= IDENTITY_TOL
            && self.rearrangement <= IDENTITY_TOL
    }
}

/// Checks the exact identities relating the networks at `W` and `W + W'`:
/// the per-coordinate ReLU difference rule, the sum-over-layers expansion of
/// `h - h_check`, and the rearranged second-order remainder of `f`.
pub fn decomposition_identity_probe(
    params: &NetworkParams,
    w_prime: &Matrix,
    ds: &Dataset,
) -> Result<(DecompositionResiduals, ProbeReport)> {
    let m = params.dims.m;
    if w_prime.shape() != (m, m) {
        return Err(Error::Shape("W' must be m x m".into()));
    }
    let big_l = params.dims.l;
    let check = forward(params, ds)?;
    let moved_params = params.with_w(params.w.add(w_prime));
    let moved = forward(&moved_params, ds)?;
    let mut recs = Vec::new();
    let (mut pw, mut tel) = (0.0f64, 0.0f64);
    let mut max_nnz = 0usize;
    let mut second_order = 0.0;
    for i in 0..params.dims.n {
        let d2: Vec<SignChangeMatrix> = (0..=big_l)
            .map(|l| SignChangeMatrix::from_pair(&check.g[i][l], &moved.g[i][l]))
            .collect();
        for l in 1..=big_l {
            let (a, b) = (&check.g[i][l], &moved.g[i][l]);
            let lhs = sub(&relu(a), &relu(b));
            let diff = sub(a, b);
            let rhs = d2[l].apply_with(a, &diff);
            let r = rel(norm(&sub(&lhs, &rhs)), norm(&diff) + norm(&lhs));
            pw = pw.max(r);
            max_nnz = max_nnz.max(d2[l].nnz());
            recs.push(Record::new("sign_change_nnz", d2[l].nnz() as f64).i(i).l(l));
        }
        // explicit sums over the injection layer a, propagated upward
        let mut s_mixed = vec![vec![0.0; m]; big_l + 1];
        let mut s_lin = vec![vec![0.0; m]; big_l + 1];
        for a in 1..big_l {
            let mut v = d2[a + 1].apply_with(&check.g[i][a + 1], &w_prime.matvec(&moved.h[i][a]));
            let mut q = check.masks[i][a + 1].apply(&w_prime.matvec(&check.h[i][a]));
            for l in a + 1..=big_l {
                if l > a + 1 {
                    v = d2[l].apply_with(&check.g[i][l], &params.w.matvec(&v));
                    q = check.masks[i][l].apply(&params.w.matvec(&q));
                }
                crate::numerics::axpy(1.0, &v, &mut s_mixed[l]);
                crate::numerics::axpy(1.0, &q, &mut s_lin[l]);
            }
        }
        for l in 1..=big_l {
            let dh = sub(&moved.h[i][l], &check.h[i][l]);
            let r = rel(
                norm(&sub(&dh, &s_mixed[l])),
                norm(&dh).max(norm(&s_mixed[l])),
            );
            tel = tel.max(r);
            if l >= 2 {
                let lossb = params.b.tmatvec(&check.loss[i][l]);
                let bdh = params.b.matvec(&dh);
                second_order += dot(&lossb, &sub(&s_mixed[l], &s_lin[l])) + 0.5 * dot(&bdh, &bdh);
            }
        }
    }
    let f_check = check.objective();
    let f_moved = moved.objective();
    let all: Vec<usize> = (0..params.dims.n).collect();
    let lin = gradient_factors(params, &check, &check.loss_vectors(), &all).inner(w_prime);
    let lhs = f_moved - f_check - lin;
    let scale = [f_moved.abs(), f_check.abs(), lin.abs(), second_order.abs()]
        .into_iter()
        .fold(0.0, f64::max);
    let rearr = rel((lhs - second_order).abs(), scale);
    let res = DecompositionResiduals {
        pointwise: pw,
        telescoping: tel,
        rearrangement: rearr,
        max_sign_change_nnz: max_nnz,
    };
    recs.push(Record::new("pointwise_residual", pw).upper(IDENTITY_TOL));
    recs.push(Record::new("telescoping_residual", tel).upper(IDENTITY_TOL));
    recs.push(Record::new("rearrangement_residual", rearr).upper(IDENTITY_TOL));
    let rep = ProbeReport::new("decomposition_identity", "exact-decomposition", recs)
        .with_extra("remainder", lhs)
        .with_extra("max_sign_change_nnz", max_nnz as f64);
    Ok((res, rep))
}

/// Thresholds on `|g_k| sqrt(m)` for the indicator-coordinate count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum IndicatorThresholds {
    /// `beta-` for the small side, `beta+` for the large side.
    Theoretical(LandscapeParams),
    Absolute {
        small: f64,
        large: f64,
    },
    /// Empirical quantiles of the pooled `|g_k| sqrt(m)` values.
    Quantile {
        small: f64,
        large: f64,
    },
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos]
}

/// Counts `k` in `n1` whose pre-activation is tiny at `(i*, l*+1)` and large
/// at `(i, l*+1)` for `i != i*` and at every `(i, l+1)` with `l > l*`.
pub fn indicator_coordinate_probe(
    trace: &ForwardTrace,
    i_star: usize,
    l_star: usize,
    thresholds: IndicatorThresholds,
    n1: &[usize],
) -> Result<ProbeReport> {
    let (n, big_l, m) = (trace.n(), trace.l(), trace.m());
    if n1.is_empty() {
        return Err(Error::Invalid("candidate set must be nonempty".into()));
    }
    if i_star >= n || l_star < 2 || l_star + 1 > big_l {
        return Err(Error::Index(format!(
            "(i*, l*) = ({i_star}, {l_star}) needs l* in 2..L"
        )));
    }
    if n1.iter().any(|k| *k >= m) {
        return Err(Error::Index("candidate coordinate out of range".into()));
    }
    let sm = (m as f64).sqrt();
    let (small, large, bound) = match thresholds {
        IndicatorThresholds::Theoretical(p) => (
            p.beta_minus,
            p.beta_plus,
            p.beta_minus / (64.0 * big_l as f64),
        ),
        IndicatorThresholds::Absolute { small, large } => (small, large, f64::NAN),
        IndicatorThresholds::Quantile { small, large } => {
            let mut pool: Vec<f64> = (0..n)
                .flat_map(|i| {
                    (l_star + 1..=big_l).flat_map(move |l| n1.iter().map(move |k| (i, l, *k)))
                })
                .map(|(i, l, k)| trace.g[i][l][k].abs() * sm)
                .collect();
            pool.sort_by(f64::total_cmp);
            (quantile(&pool, small), quantile(&pool, large), f64::NAN)
        }
    };
    let count = n1
        .iter()
        .filter(|&&k| {
            if trace.g[i_star][l_star + 1][k].abs() * sm > small {
                return false;
            }
            (0..n).all(|i| {
                (l_star..big_l).all(|l| {
                    (i == i_star && l == l_star) || trace.g[i][l + 1][k].abs() * sm >= large
                })
            })
        })
        .count();
    let frac = count as f64 / n1.len() as f64;
    let mut rec = Record::new("n4_fraction", frac);
    if bound.is_finite() {
        rec = rec.lower(bound);
    }
    Ok(ProbeReport::new(
        "indicator_coordinate",
        "indicator-coordinate-bound",
        vec![rec.i(i_star).l(l_star)],
    )
    .with_extra("n4", count as f64)
    .with_extra("n1", n1.len() as f64)
    .with_extra("small_threshold", small)
    .with_extra("large_threshold", large))
}

/// The two denominators of the coordinate threshold, `6 sqrt(d n L)` and
/// `6 n L sqrt(d)`, keyed by record name.
pub fn backward_coordinate_denominators(
    n: usize,
    big_l: usize,
    d: usize,
) -> [(&'static str, f64); 2] {
    [
        ("fraction_sqrt_dnl", 6.0 * ((d * n * big_l) as f64).sqrt()),
        (
            "fraction_nl_sqrt_d",
            6.0 * (n * big_l) as f64 * (d as f64).sqrt(),
        ),
    ]
}

/// Fraction of `k` in `n4` with `|u_k| >= ||loss_{i*,l*}|| / denominator`,
/// where `u = sum_{a >= l*} Back_{i*, l* -> a}^T loss_{i*, a}`, under both
/// `6 sqrt(d n L)` and `6 n L sqrt(d)` denominators.
pub fn backward_coordinate_probe(
    params: &NetworkParams,
    trace: &ForwardTrace,
    fixed_loss: &[Vec<Vec<f64>>],
    n4: &[usize],
) -> Result<ProbeReport> {
    let crate::rnn::Dims {
        n, l: big_l, d, m, ..
    } = params.dims;
    if n4.is_empty() || n4.iter().any(|k| *k >= m) {
        return Err(Error::Index(
            "candidate set must be nonempty and within [m]".into(),
        ));
    }
    let (i_star, l_star) = argmax_loss(fixed_loss);
    let loss_star = norm(&fixed_loss[i_star][l_star - 2]);
    let target = 1.0 - 1.0 / (2.0 * (n * big_l) as f64);
    let degenerate = loss_star == 0.0;
    let u = backward_vectors(params, trace, fixed_loss, &[i_star]);
    let v = &u[0][l_star - 1];
    let recs = backward_coordinate_denominators(n, big_l, d)
        .iter()
        .map(|(name, den)| {
            let thr = loss_star / den;
            let frac = if degenerate {
                1.0
            } else {
                n4.iter().filter(|k| v[**k].abs() >= thr).count() as f64 / n4.len() as f64
            };
            Record::new(name, frac).i(i_star).l(l_star).lower(target)
        })
        .collect();
    Ok(
        ProbeReport::new("backward_coordinate", "backward-coordinate-bound", recs)
            .with_extra("loss_star", loss_star)
            .with_extra("degenerate", if degenerate { 1.0 } else { 0.0 }),
    )
}

/// Independent unit loss vectors indexed `[i][l-2]`.
pub fn random_unit_losses(n: usize, big_l: usize, d: usize, rng: &SeededRng) -> Vec<Vec<Vec<f64>>> {
    let mut g = rng.generator();
    (0..n)
        .map(|_| {
            (2..=big_l)
                .map(|_| {
                    let v = gaussian_vec(&mut g, d, 1.0);
                    let nv = norm(&v);
                    v.iter().map(|x| x / nv).collect()
                })
                .collect()
        })
        .collect()
}

fn gradient_bound_records(
    params: &NetworkParams,
    trace: &ForwardTrace,
    loss: &[Vec<Vec<f64>>],
    recs: &mut Vec<Record>,
) -> f64 {
    let m = params.dims.m as f64;
    let ml = max_norm(loss);
    let all: Vec<usize> = (0..params.dims.n).collect();
    let gf = gradient_factors(params, trace, loss, &all);
    let g2 = gf.frobenius_sq();
    if ml == 0.0 {
        recs.push(Record::new("grad_fro", g2.sqrt()));
        return f64::NAN;
    }
    recs.push(Record::new("lower_ratio", g2 / (m * ml * ml)));
    recs.push(Record::new("fro_ratio", g2.sqrt() / (m.sqrt() * ml)));
    for i in 0..params.dims.n {
        let gi = gradient_factors(params, trace, loss, &[i]).frobenius_sq();
        recs.push(Record::new("per_sample_fro_ratio", gi.sqrt() / (m.sqrt() * ml)).i(i));
    }
    let rows = factor_row_norms(&gf);
    recs.push(Record::new(
        "row_ratio",
        rows.iter().fold(0.0_f64, |a, b| a.max(*b)) / ml,
    ));
    g2 / (m * ml * ml)
}

/// Fake gradient (true gradient formula with `fixed_loss`) against its
/// `m max ||loss||^2` lower scale and `sqrt(m)` / per-row upper scales.
pub fn fake_gradient_bound_probe(
    params: &NetworkParams,
    ds: &Dataset,
    fixed_loss: &[Vec<Vec<f64>>],
) -> Result<ProbeReport> {
    let trace = forward(params, ds)?;
    crate::rnn::fake_gradient_from_trace(params, &trace, fixed_loss)?;
    if max_norm(fixed_loss) == 0.0 {
        return Err(Error::Invalid("fixed loss vectors are all zero".into()));
    }
    let mut recs = Vec::new();
    let ratio = gradient_bound_records(params, &trace, fixed_loss, &mut recs);
    Ok(
        ProbeReport::new("fake_gradient_bound", "fake-gradient-bounds", recs)
            .with_extra("lower_ratio", ratio),
    )
}

/// True-gradient ratios `||grad f||_F / (sqrt(m) max ||loss||)` and
/// `max_k ||grad_k f|| / max ||loss||`.
pub fn gradient_upper_bound_probe(params: &NetworkParams, ds: &Dataset) -> Result<ProbeReport> {
    let trace = forward(params, ds)?;
    let loss = trace.loss_vectors();
    let mut recs = Vec::new();
    let ratio = gradient_bound_records(params, &trace, &loss, &mut recs);
    Ok(
        ProbeReport::new("gradient_upper_bound", "gradient-upper-bounds", recs)
            .with_extra("degenerate", if ratio.is_nan() { 1.0 } else { 0.0 }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataDims};
    use crate::rnn::Dims;

    fn setup(m: usize, seed: u64) -> (NetworkParams, Dataset) {
        let dd = DataDims {
            n: 3,
            l: 4,
            d_x: 4,
            d: 2,
        };
        let ds = generate_dataset(dd, 0.5, 1.0, &SeededRng::new(seed)).unwrap();
        (
            NetworkParams::init(
                Dims {
                    n: 3,
                    l: 4,
                    d_x: 4,
                    d: 2,
                    m,
                },
                &SeededRng::new(seed).split("net"),
            ),
            ds,
        )
    }

    #[test]
    fn sign_change_scalar_cases() {
        let d = SignChangeMatrix::from_pair(&[1.0, -1.0, 2.0, -3.0], &[-1.0, 1.0, 1.0, -1.0]);
        assert_eq!(d.diag, vec![-0.5, 0.5, 0.0, 0.0]);
        // relu(1) - relu(-1) = 1 = (1 - 0.5) * 2
        assert_eq!(d.apply_with(&[1.0], &[2.0])[0], 1.0);
        assert_eq!(d.support(), vec![0, 1]);
    }

    #[test]
    fn reference_landscape_values() {
        let dims = Dims {
            n: 4,
            l: 5,
            d_x: 4,
            d: 2,
            m: 2048,
        };
        let s = TheoryScales::new(dims, 0.5, 1.0);
        assert!((s.rho - 40.0 * 2048f64.ln()).abs() < 1e-9);
        let p = LandscapeParams::new(s, 0.5, 2048).unwrap();
        assert!((p.beta_plus - 0.5 / s.rho.powi(2)).abs() < 1e-18);
        assert!((p.beta_plus / 5.4e-6 - 1.0).abs() < 0.05);
        assert_eq!(p.n_mcd, 2048.0);
        let mut bad = p;
        bad.theta = p.beta_plus;
        assert!(bad.validate(s.rho).is_err());
    }

    #[test]
    fn zero_perturbation_identities() {
        let (p, ds) = setup(32, 1);
        let (res, rep) = decomposition_identity_probe(&p, &Matrix::zeros(32, 32), &ds).unwrap();
        assert!(res.ok());
        assert_eq!(res.max_sign_change_nnz, 0);
        assert_eq!(rep.extra("remainder"), Some(0.0));
    }

    #[test]
    fn identities_hold_for_random_perturbation() {
        let (p, ds) = setup(128, 2);
        let wp = unit_spectral_direction(128, &SeededRng::new(3)).scaled(0.5);
        let (res, _) = decomposition_identity_probe(&p, &wp, &ds).unwrap();
        assert!(res.ok(), "{res:?}");
        assert!(res.max_sign_change_nnz > 0);
    }

    #[test]
    fn pl_ratio_zero_loss_undefined() {
        let (p, ds) = setup(16, 3);
        let t = forward(&p, &ds).unwrap();
        let labels = (0..3)
            .map(|i| (2..=4).map(|l| t.y[i][l].clone()).collect())
            .collect();
        let ds0 = ds.with_labels(labels).unwrap();
        let rep = pl_ratio_probe(&p, &ds0).unwrap();
        assert_eq!(rep.extra("undefined"), Some(1.0));
        assert_eq!(rep.max_of("grad_fro_sq"), Some(0.0));
    }

    #[test]
    fn pl_ratio_label_scaling() {
        let (mut p, ds) = setup(24, 4);
        p.b = Matrix::zeros(2, 24);
        let r1 = pl_ratio_probe(&p, &ds).unwrap().max_of("pl_ratio").unwrap();
        let labels = ds
            .labels
            .iter()
            .map(|li| {
                li.iter()
                    .map(|v| v.iter().map(|x| 2.0 * x).collect())
                    .collect()
            })
            .collect();
        let r2 = pl_ratio_probe(&p, &ds.with_labels(labels).unwrap())
            .unwrap()
            .max_of("pl_ratio")
            .unwrap();
        assert!((r1 - r2).abs() <= 1e-12 * r1.abs().max(1e-300));
    }

    #[test]
    fn fake_gradient_homogeneous() {
        let (p, ds) = setup(24, 5);
        let loss = random_unit_losses(3, 4, 2, &SeededRng::new(9));
        let r1 = fake_gradient_bound_probe(&p, &ds, &loss)
            .unwrap()
            .extra("lower_ratio")
            .unwrap();
        let scaled: Vec<Vec<Vec<f64>>> = loss
            .iter()
            .map(|li| {
                li.iter()
                    .map(|v| v.iter().map(|x| 3.0 * x).collect())
                    .collect()
            })
            .collect();
        let r3 = fake_gradient_bound_probe(&p, &ds, &scaled)
            .unwrap()
            .extra("lower_ratio")
            .unwrap();
        assert!((r1 - r3).abs() <= 1e-12 * r1);
        let zero = vec![vec![vec![0.0; 2]; 3]; 3];
        assert!(fake_gradient_bound_probe(&p, &ds, &zero).is_err());
    }

    #[test]
    fn fake_gradient_with_true_loss_matches_pl_numerator() {
        let (p, ds) = setup(24, 6);
        let t = forward(&p, &ds).unwrap();
        let fake = fake_gradient_bound_probe(&p, &ds, &t.loss_vectors())
            .unwrap()
            .extra("lower_ratio")
            .unwrap();
        let ml = t.max_loss_norm();
        let g2 = pl_ratio_probe(&p, &ds)
            .unwrap()
            .max_of("grad_fro_sq")
            .unwrap();
        assert!((fake - g2 / (24.0 * ml * ml)).abs() <= 1e-12 * fake);
    }

    #[test]
    fn row_norms_match_dense() {
        let (p, ds) = setup(12, 7);
        let t = forward(&p, &ds).unwrap();
        let gf = gradient_factors(&p, &t, &t.loss_vectors(), &[0, 1, 2]);
        let dense = gf.to_matrix();
        for (k, v) in factor_row_norms(&gf).iter().enumerate() {
            assert!((v - norm(dense.row(k))).abs() <= 1e-10 * (1.0 + v));
        }
    }

    #[test]
    fn indicator_impossible_thresholds_empty() {
        let (p, ds) = setup(64, 8);
        let t = forward(&p, &ds).unwrap();
        let all: Vec<usize> = (0..64).collect();
        let rep = indicator_coordinate_probe(
            &t,
            0,
            2,
            IndicatorThresholds::Absolute {
                small: -1.0,
                large: f64::INFINITY,
            },
            &all,
        )
        .unwrap();
        assert_eq!(rep.extra("n4"), Some(0.0));
        assert!(indicator_coordinate_probe(
            &t,
            0,
            4,
            IndicatorThresholds::Absolute {
                small: 1.0,
                large: 1.0
            },
            &all
        )
        .is_err());
    }

    #[test]
    fn backward_coordinate_zero_loss_degenerate() {
        let (p, ds) = setup(32, 9);
        let t = forward(&p, &ds).unwrap();
        let zero = vec![vec![vec![0.0; 2]; 3]; 3];
        let rep = backward_coordinate_probe(&p, &t, &zero, &[0, 1, 2]).unwrap();
        assert_eq!(rep.extra("degenerate"), Some(1.0));
        assert!(rep.all_pass());
    }

    #[test]
    fn smoothness_residual_vanishes_at_zero_scale() {
        let (p, ds) = setup(32, 10);
        let dir = unit_spectral_direction(32, &SeededRng::new(1));
        let (fit, rep) = semi_smoothness_probe(&p, &ds, &dir, &smoothness_tau_grid(32, 8)).unwrap();
        assert!(rep.all_pass());
        assert!(rep.records.iter().all(|r| r.value.is_finite()));
        assert!(fit.b_envelope >= fit.b.max(0.0));
        assert!(semi_smoothness_probe(&p, &ds, &dir, &[0.0]).is_err());
    }
}
