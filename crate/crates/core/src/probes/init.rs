//! Measurements of a freshly initialized network: hidden-state norms, the
//! component of each state orthogonal to earlier states, pairwise
//! separability of those components, and norms of products of layers.

use rand::seq::index::sample;
use rand::Rng;

use super::report::{ProbeReport, Record};
use super::TheoryScales;
use crate::numerics::{
    dot, gaussian_vec, norm, spectral_norm_op_capped, Matrix, OrthonormalBasis, SeededRng,
};
use crate::rnn::{Chain, ForwardTrace, NetworkParams};
use crate::runner::fit::scaling_fit;

pub fn forward_norm_probe(trace: &ForwardTrace, l_total: usize) -> ProbeReport {
    let mut recs = Vec::new();
    let shrink = 1.0 - 1.0 / (4.0 * l_total as f64);
    for i in 0..trace.n() {
        for ell in 0..l_total.min(trace.l()) {
            let hn = norm(&trace.h[i][ell + 1]);
            let gn = norm(&trace.g[i][ell + 1]);
            recs.push(
                Record::new("h_norm_low", hn)
                    .i(i)
                    .l(ell)
                    .lower(shrink.powi(ell as i32)),
            );
            recs.push(
                Record::new("h_norm_high", hn)
                    .i(i)
                    .l(ell)
                    .upper(2.0 * ell as f64 + 4.0),
            );
            recs.push(
                Record::new("g_norm_high", gn)
                    .i(i)
                    .l(ell)
                    .upper(4.0 * ell as f64 + 8.0),
            );
        }
    }
    ProbeReport::new("forward_norm", "forward-norm-bounds", recs)
}

/// Bases `U_l` for `l = 0..L-1`, spanning `h_{1,1}..h_{n,l}` in sample-major
/// order within each layer.
pub fn layer_bases(trace: &ForwardTrace) -> Vec<OrthonormalBasis> {
    let (n, big_l, m) = (trace.n(), trace.l(), trace.m());
    let mut bases = Vec::with_capacity(big_l);
    let mut u = OrthonormalBasis::empty(m);
    bases.push(u.clone());
    for ell in 1..big_l {
        for i in 0..n {
            if u.len() < m {
                u.push(&trace.h[i][ell]).expect("dimensions agree");
            }
        }
        bases.push(u.clone());
    }
    bases
}

/// Norms of `(I - U_l U_l^T) h_{i,l+1}`; passes when above `floor` and
/// strictly positive.
pub fn fresh_randomness_probe(trace: &ForwardTrace, floor: f64) -> ProbeReport {
    let (n, big_l, m) = (trace.n(), trace.l(), trace.m());
    let lm = (m as f64).ln();
    let theory_floor = 1.0 / (2e6 * (big_l * big_l) as f64 * lm.powi(3));
    let bases = layer_bases(trace);
    let mut recs = Vec::new();
    let mut min_ratio = f64::INFINITY;
    let mut completions = 0;
    for (ell, u) in bases.iter().enumerate() {
        completions = completions.max(u.completions());
        for i in 0..n {
            let r = norm(
                &u.project_complement(&trace.h[i][ell + 1])
                    .expect("dimensions agree"),
            );
            min_ratio = min_ratio.min(r / theory_floor);
            let pass = r > 0.0 && r >= floor;
            recs.push(
                Record::new("residual_norm", r)
                    .i(i)
                    .l(ell)
                    .verdict(floor, pass),
            );
        }
    }
    ProbeReport::new("fresh_randomness", "fresh-randomness", recs)
        .with_extra("theory_floor", theory_floor)
        .with_extra("min_ratio_to_theory_floor", min_ratio)
        .with_extra("degenerate_completions", completions as f64)
}

/// `||(I - y y^T/||y||^2) x||`, zero when `y = 0` or `x = 0`.
pub fn one_sided_separation(x: &[f64], y: &[f64]) -> f64 {
    let yy = dot(y, y);
    if yy == 0.0 || dot(x, x) == 0.0 {
        return 0.0;
    }
    let c = dot(x, y) / yy;
    let r: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - c * b).collect();
    norm(&r)
}

/// Both one-sided separations of every ordered pair of projected states,
/// against `delta / 2`.
pub fn separability_probe(trace: &ForwardTrace, delta: f64) -> ProbeReport {
    let n = trace.n();
    let bases = layer_bases(trace);
    let mut recs = Vec::new();
    for (ell, u) in bases.iter().enumerate() {
        let proj: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                u.project_complement(&trace.h[i][ell + 1])
                    .expect("dimensions agree")
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let s = one_sided_separation(&proj[i], &proj[j]);
                    recs.push(
                        Record::new("separation", s)
                            .i(i)
                            .j(j)
                            .l(ell)
                            .lower(delta / 2.0),
                    );
                }
            }
        }
    }
    ProbeReport::new("separability", "layerwise-separability", recs)
}

/// Slope of `log(max chain norm)` against chain length.
fn length_slope(recs: &[Record]) -> Option<f64> {
    let mut by_len = std::collections::BTreeMap::<usize, f64>::new();
    for r in recs {
        if let (Some(a), Some(b)) = (r.l1, r.l2) {
            let e = by_len.entry(b - a + 1).or_insert(0.0);
            *e = e.max(r.value);
        }
    }
    let pts: Vec<(f64, f64)> = by_len
        .iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|(k, v)| (*k as f64, v.ln()))
        .collect();
    if pts.len() >= 3 {
        scaling_fit(&pts).ok().map(|f| f.slope)
    } else if pts.len() == 2 {
        Some((pts[1].1 - pts[0].1) / (pts[1].0 - pts[0].0))
    } else {
        None
    }
}

/// Ceiling on the largest chain norm.
pub const CHAIN_NORM_CAP: f64 = 10.0;
/// Ceiling on the per-layer growth factor of chain norms.
pub const CHAIN_GROWTH_CAP: f64 = 1.2;

/// Spectral norms of `D_{l2} W ... D_{l1} W` for all `1 <= l1 <= l2 <= L`,
/// plus the largest one and the slope of `ln norm` against chain length.
pub fn intermediate_spectral_probe(
    params: &NetworkParams,
    trace: &ForwardTrace,
    i: usize,
    rel_tol: f64,
) -> ProbeReport {
    let big_l = trace.l();
    let m = params.dims.m;
    let cap = crate::numerics::power_iteration_cap(m, m);
    let rng = SeededRng::new(0xc4a1).split_index(i as u64);
    let mut recs = Vec::new();
    let mut unconverged = 0;
    for l1 in 1..=big_l {
        for l2 in l1..=big_l {
            let chain = Chain::from_trace(&params.w, trace, i, l1, l2);
            let est = spectral_norm_op_capped(
                &chain,
                rel_tol,
                &rng.split_index((l1 * 64 + l2) as u64),
                cap,
            );
            if !est.converged {
                unconverged += 1;
            }
            recs.push(Record::new("chain_norm", est.value).i(i).chain(l1, l2));
        }
    }
    let slope = length_slope(&recs).unwrap_or(0.0);
    let max = recs.iter().map(|r| r.value).fold(0.0, f64::max);
    recs.push(
        Record::new("max_chain_norm", max)
            .i(i)
            .upper(CHAIN_NORM_CAP),
    );
    recs.push(
        Record::new("length_slope", slope)
            .i(i)
            .upper(CHAIN_GROWTH_CAP.ln()),
    );
    ProbeReport::new("intermediate_spectral", "chain-spectral-norm", recs)
        .with_extra("length_slope", slope)
        .with_extra("unconverged", unconverged as f64)
}

fn random_sparse_unit<R: Rng>(g: &mut R, m: usize, k: usize) -> Vec<f64> {
    let idx = sample(g, m, k.min(m)).into_vec();
    let vals = gaussian_vec(g, idx.len(), 1.0);
    let nv = norm(&vals).max(f64::MIN_POSITIVE);
    let mut v = vec![0.0; m];
    for (j, k) in idx.iter().enumerate() {
        v[*k] = vals[j] / nv;
    }
    v
}

/// Keeps the `k` largest-magnitude coordinates and normalizes.
fn top_k_unit(v: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*b].abs().total_cmp(&v[*a].abs()));
    let mut out = vec![0.0; v.len()];
    for &j in idx.iter().take(k) {
        out[j] = v[j];
    }
    let n = norm(&out);
    if n > 0.0 {
        out.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Support size `ceil(s^2 m^{2/3})`, at least one.
pub fn sparse_support(s: f64, m: usize) -> usize {
    ((s * s * (m as f64).powf(2.0 / 3.0)).ceil() as usize).clamp(1, m)
}

/// `|z^T W (D_{l2} W ... D_{l1} W) y|` over sparse unit pairs for chains with
/// `l2 < L`. With `s = None` the vectors are 1-sparse.
pub fn sparse_spectral_probe(
    params: &NetworkParams,
    trace: &ForwardTrace,
    i: usize,
    s: Option<f64>,
    trials: usize,
    rng: &SeededRng,
) -> ProbeReport {
    let m = params.dims.m;
    let big_l = trace.l();
    let scales = TheoryScales::new(params.dims, 1.0, 1.0);
    let (k, bound) = match s {
        Some(s) => (
            sparse_support(s, m),
            s * (m as f64).ln() / (m as f64).powf(1.0 / 6.0),
        ),
        None => (1, scales.rho / (m as f64).sqrt()),
    };
    let mut g = rng.generator();
    let mut recs = Vec::new();
    for l1 in 1..big_l {
        for l2 in l1..big_l {
            let chain = Chain::from_trace(&params.w, trace, i, l1, l2);
            let op = |y: &[f64]| {
                params
                    .w
                    .matvec(&crate::numerics::LinearOperator::apply(&chain, y))
            };
            let op_t = |z: &[f64]| {
                crate::numerics::LinearOperator::apply_transpose(&chain, &params.w.tmatvec(z))
            };
            let mut best = 0.0f64;
            for _ in 0..trials {
                let y = random_sparse_unit(&mut g, m, k);
                let z = random_sparse_unit(&mut g, m, k);
                best = best.max(dot(&z, &op(&y)).abs());
            }
            // alternating support-restricted power iteration
            let mut y = random_sparse_unit(&mut g, m, k);
            for _ in 0..8 {
                let z = top_k_unit(&op(&y), k);
                best = best.max(dot(&z, &op(&y)).abs());
                y = top_k_unit(&op_t(&z), k);
            }
            let z = top_k_unit(&op(&y), k);
            best = best.max(dot(&z, &op(&y)).abs());
            recs.push(
                Record::new("sparse_bilinear", best)
                    .i(i)
                    .chain(l1, l2)
                    .upper(bound),
            );
        }
    }
    ProbeReport::new(
        "sparse_spectral",
        if s.is_some() {
            "sparse-chain"
        } else {
            "one-sparse-chain"
        },
        recs,
    )
    .with_extra("support", k as f64)
    .with_extra("trials", trials as f64)
}

/// `|a^T B (D_{l2} W ... D_{l1} W) y|` for unit `a` and sparse unit `y`.
/// The worst `y` for a given `a` is found exactly from the row `a^T B chain`;
/// the worst unit `a` for 1-sparse `y` is the largest column norm of `B chain`.
pub fn backward_sparse_probe(
    params: &NetworkParams,
    trace: &ForwardTrace,
    i: usize,
    s: Option<f64>,
    trials: usize,
    rng: &SeededRng,
) -> ProbeReport {
    let m = params.dims.m;
    let d = params.dims.d;
    let big_l = trace.l();
    let scales = TheoryScales::new(params.dims, 1.0, 1.0);
    let (k, bound) = match s {
        Some(s) => (
            sparse_support(s, m),
            s * (m as f64).cbrt() * (m as f64).ln(),
        ),
        None => (1, scales.rho),
    };
    let mut g = rng.generator();
    let mut recs = Vec::new();
    for l1 in 1..=big_l {
        for l2 in l1..=big_l {
            let chain = Chain::from_trace(&params.w, trace, i, l1, l2);
            let rows: Vec<Vec<f64>> = (0..d)
                .map(|c| crate::numerics::LinearOperator::apply_transpose(&chain, params.b.row(c)))
                .collect();
            let bc = Matrix::from_rows(&rows).expect("rectangular");
            let mut best = 0.0f64;
            for _ in 0..trials {
                let a = gaussian_vec(&mut g, d, 1.0);
                let na = norm(&a).max(f64::MIN_POSITIVE);
                let row = bc.tmatvec(&a.iter().map(|v| v / na).collect::<Vec<_>>());
                let y = random_sparse_unit(&mut g, m, k);
                best = best.max(dot(&row, &y).abs());
                let top = top_k_unit(&row, k);
                best = best.max(dot(&row, &top).abs());
            }
            // worst unit a for the heaviest columns
            let mut cols: Vec<(f64, usize)> = (0..m).map(|c| (norm(&bc.col(c)), c)).collect();
            cols.sort_by(|a, b| b.0.total_cmp(&a.0));
            let sub: Vec<Vec<f64>> = (0..d)
                .map(|r| cols.iter().take(k).map(|(_, c)| bc.get(r, *c)).collect())
                .collect();
            let sub = Matrix::from_rows(&sub).expect("rectangular");
            best = best.max(crate::numerics::spectral_norm(&sub, 1e-9).value);
            recs.push(
                Record::new("backward_sparse", best)
                    .i(i)
                    .chain(l1, l2)
                    .upper(bound),
            );
        }
    }
    ProbeReport::new(
        "backward_sparse",
        if s.is_some() {
            "sparse-backward"
        } else {
            "one-sparse-backward"
        },
        recs,
    )
    .with_extra("support", k as f64)
    .with_extra("trials", trials as f64)
}
