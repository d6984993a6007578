//! How much the forward and backward passes move when `W` is perturbed.
//!
//! Naming: `W~` is the unperturbed matrix, `W = W~ + W'` the perturbed one,
//! with sign masks `D~` and `D`. The backward probes compare rows
//! `a^T B prod D W` for the four mixed combinations of masks and matrices.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::report::{ProbeReport, Record};
use super::TheoryScales;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, gaussian_vec, norm, spectral_norm_op, Matrix, SeededRng};
use crate::rnn::{forward, Chain, ForwardTrace, NetworkParams};

#[derive(Clone, Debug, PartialEq)]
pub enum PerturbationKind {
    /// Gaussian matrix rescaled to spectral norm `tau0 / sqrt(m)`.
    RandomSpectral,
    /// `y z^T` with `||z|| = 1`, `||y||_0 = N` and `||y||_inf <= tau0/sqrt(m)`.
    RankOne { y: Vec<f64>, z: Vec<f64> },
    /// Displacement of a training run, `W_T - W_0`.
    FromTraining { delta: Matrix },
    /// Random spectral part plus a rank-one part that flips the signs of the
    /// smallest pre-activations of `g_{sample, layer}`; both parts get
    /// `tau0 / (2 sqrt(m))` of the budget.
    SignFlip { sample: usize, layer: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub tau0: f64,
}

impl PerturbationSpec {
    pub fn random_spectral(tau0: f64) -> Self {
        Self {
            kind: PerturbationKind::RandomSpectral,
            tau0,
        }
    }

    pub fn sign_flip(tau0: f64, sample: usize, layer: usize) -> Self {
        Self {
            kind: PerturbationKind::SignFlip { sample, layer },
            tau0,
        }
    }

    /// Rank-one spec with a uniformly random support of size `support`,
    /// entries `+-tau0/sqrt(m)` and a random unit `z`.
    pub fn random_rank_one(m: usize, support: usize, tau0: f64, rng: &SeededRng) -> Self {
        let mut g = rng.generator();
        let amp = tau0 / (m as f64).sqrt();
        let mut y = vec![0.0; m];
        for k in sample(&mut g, m, support.min(m)).into_vec() {
            y[k] = if g.random::<bool>() { amp } else { -amp };
        }
        let z = gaussian_vec(&mut g, m, 1.0);
        let nz = norm(&z);
        Self {
            kind: PerturbationKind::RankOne {
                y,
                z: z.iter().map(|v| v / nz).collect(),
            },
            tau0,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.tau0 >= 0.0 && self.tau0.is_finite()) {
            return Err(Error::Invalid("tau0 must be finite and nonnegative".into()));
        }
        match &self.kind {
            PerturbationKind::RankOne { y, z } => {
                if y.len() != m || z.len() != m {
                    return Err(Error::Shape("rank-one factors must have length m".into()));
                }
                if (norm(z) - 1.0).abs() > 1e-12 {
                    return Err(Error::Invalid("z must be a unit vector".into()));
                }
                let cap = self.tau0 / (m as f64).sqrt();
                if y.iter().any(|v| v.abs() > cap * (1.0 + 1e-12)) {
                    return Err(Error::Invalid("y exceeds the entrywise budget".into()));
                }
                Ok(())
            }
            PerturbationKind::FromTraining { delta } if delta.shape() != (m, m) => {
                Err(Error::Shape("training displacement must be m x m".into()))
            }
            _ => Ok(()),
        }
    }
}

fn scaled_gaussian(m: usize, target: f64, rng: &SeededRng) -> Matrix {
    let g = gaussian_matrix(m, m, 1.0, rng);
    let est = spectral_norm_op(&g, 1e-9, &rng.split("norm")).value;
    g.scaled(target / est)
}

/// Returns the perturbed parameters and the realized `W'`.
pub fn perturb(
    params: &NetworkParams,
    ds: &Dataset,
    spec: &PerturbationSpec,
    rng: &SeededRng,
) -> Result<(NetworkParams, Matrix)> {
    let m = params.dims.m;
    spec.validate(m)?;
    if spec.tau0 == 0.0 && !matches!(spec.kind, PerturbationKind::FromTraining { .. }) {
        return Ok((params.clone(), Matrix::zeros(m, m)));
    }
    let budget = spec.tau0 / (m as f64).sqrt();
    let wp = match &spec.kind {
        PerturbationKind::RandomSpectral => scaled_gaussian(m, budget, rng),
        PerturbationKind::RankOne { y, z } => {
            let mut w = Matrix::zeros(m, m);
            w.add_outer_sum(1.0, &[y.as_slice()], &[z.as_slice()]);
            w
        }
        PerturbationKind::FromTraining { delta } => delta.clone(),
        PerturbationKind::SignFlip { sample, layer } => {
            if *sample >= params.dims.n || *layer < 2 || *layer > params.dims.l {
                return Err(Error::Index(format!(
                    "sign-flip target ({sample}, {layer})"
                )));
            }
            let mut w = scaled_gaussian(m, budget / 2.0, rng);
            let mid = params.with_w(params.w.add(&w));
            let trace = forward(&mid, ds)?;
            let (y, z) = flip_factors(&trace, *sample, *layer, budget / 2.0);
            w.add_outer_sum(1.0, &[y.as_slice()], &[z.as_slice()]);
            w
        }
    };
    Ok((params.with_w(params.w.add(&wp)), wp))
}

/// `y z^T` with `z = h_{i,l-1}/||h_{i,l-1}||` and `y_k = -2 g_k / ||h||` on
/// the smallest `|g_{i,l}|` coordinates while `||y|| <= budget`.
fn flip_factors(trace: &ForwardTrace, i: usize, layer: usize, budget: f64) -> (Vec<f64>, Vec<f64>) {
    let h = &trace.h[i][layer - 1];
    let g = &trace.g[i][layer];
    let hn = norm(h);
    let m = g.len();
    let mut y = vec![0.0; m];
    if hn == 0.0 {
        return (y, vec![0.0; m]);
    }
    let z: Vec<f64> = h.iter().map(|v| v / hn).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| g[*a].abs().total_cmp(&g[*b].abs()));
    let mut used = 0.0;
    for k in order {
        // overshoot slightly so an exact zero also changes sign
        let yk = -2.0 * g[k] / hn - if g[k] == 0.0 { f64::EPSILON } else { 0.0 };
        if used + yk * yk > budget * budget {
            break;
        }
        used += yk * yk;
        y[k] = yk;
    }
    (y, z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityDelta {
    pub i: usize,
    pub l: usize,
    pub g_diff: f64,
    pub h_diff: f64,
    pub sign_changes: usize,
    pub masked_g: f64,
}

/// Per `(i, l)`: `||g'||`, `||h'||`, `||D'||_0` and `||D' g||` with `g` the
/// perturbed pre-activation.
pub fn forward_stability_probe(
    before: &ForwardTrace,
    after: &ForwardTrace,
) -> (Vec<StabilityDelta>, ProbeReport) {
    let mut deltas = Vec::new();
    let mut recs = Vec::new();
    for i in 0..before.n() {
        for l in 1..=before.l() {
            let gd = norm(&crate::numerics::sub(&after.g[i][l], &before.g[i][l]));
            let hd = norm(&crate::numerics::sub(&after.h[i][l], &before.h[i][l]));
            let flips = before.masks[i][l].xor(&after.masks[i][l]);
            let mg: f64 = after.g[i][l]
                .iter()
                .enumerate()
                .filter(|(k, _)| flips.get(*k))
                .map(|(_, v)| v * v)
                .sum::<f64>()
                .sqrt();
            let sc = flips.count_ones();
            recs.push(Record::new("g_diff", gd).i(i).l(l));
            recs.push(Record::new("h_diff", hd).i(i).l(l));
            recs.push(Record::new("sign_changes", sc as f64).i(i).l(l));
            recs.push(Record::new("masked_g", mg).i(i).l(l));
            deltas.push(StabilityDelta {
                i,
                l,
                g_diff: gd,
                h_diff: hd,
                sign_changes: sc,
                masked_g: mg,
            });
        }
    }
    (
        deltas,
        ProbeReport::new("forward_stability", "forward-stability", recs),
    )
}

/// Largest relative residual of
/// `g'_l = W' D_{l-1} g_{l-1} + W~ D'_{l-1} g_{l-1} + W~ D~_{l-1} g'_{l-1}`.
pub fn forward_recomputation_residual(
    w_tilde: &Matrix,
    w_prime: &Matrix,
    before: &ForwardTrace,
    after: &ForwardTrace,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..before.n() {
        for l in 2..=before.l() {
            let g_prev = &after.g[i][l - 1];
            let gp_prev = crate::numerics::sub(g_prev, &before.g[i][l - 1]);
            let d_new = &after.masks[i][l - 1];
            let d_old = &before.masks[i][l - 1];
            let dg: Vec<f64> = g_prev
                .iter()
                .enumerate()
                .map(|(k, v)| if d_new.get(k) { *v } else { 0.0 })
                .collect();
            let dprime_g: Vec<f64> = g_prev
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    (f64::from(u8::from(d_new.get(k))) - f64::from(u8::from(d_old.get(k)))) * v
                })
                .collect();
            let dold_gp = d_old.apply(&gp_prev);
            let t1 = w_prime.matvec(&dg);
            let t2 = w_tilde.matvec(&dprime_g);
            let t3 = w_tilde.matvec(&dold_gp);
            let lhs = crate::numerics::sub(&after.g[i][l], &before.g[i][l]);
            let scale = norm(&t1) + norm(&t2) + norm(&t3) + norm(&lhs);
            let res: Vec<f64> = lhs
                .iter()
                .zip(&t1)
                .zip(&t2)
                .zip(&t3)
                .map(|(((a, b), c), d)| a - b - c - d)
                .collect();
            if scale > 0.0 {
                worst = worst.max(norm(&res) / scale);
            }
        }
    }
    worst
}

/// Spectral norms of `prod D W~` and `prod D W` (perturbed masks) for all chains.
pub fn intermediate_stability_probe(
    before: &NetworkParams,
    after: &NetworkParams,
    after_trace: &ForwardTrace,
    i: usize,
    rel_tol: f64,
) -> ProbeReport {
    let big_l = after_trace.l();
    let rng = SeededRng::new(0x1a7e).split_index(i as u64);
    let mut recs = Vec::new();
    for l1 in 1..=big_l {
        for l2 in l1..=big_l {
            let c0 = Chain::from_trace(&before.w, after_trace, i, l1, l2);
            let c1 = Chain::from_trace(&after.w, after_trace, i, l1, l2);
            let r = rng.split_index((l1 * 64 + l2) as u64);
            recs.push(
                Record::new("chain_orig_w", spectral_norm_op(&c0, rel_tol, &r).value)
                    .i(i)
                    .chain(l1, l2),
            );
            recs.push(
                Record::new(
                    "chain_perturbed_w",
                    spectral_norm_op(&c1, rel_tol, &r).value,
                )
                .i(i)
                .chain(l1, l2),
            );
        }
    }
    ProbeReport::new(
        "intermediate_stability",
        "perturbed-chain-spectral-norm",
        recs,
    )
}

/// Rows `a^T B prod_{l=l2}^{l1} D W` for the four (mask, matrix) combinations,
/// in the order (D~,W~), (D,W~), (D~,W), (D,W).
pub struct BackwardRows {
    /// `rows[combo][(l1, l2)]` for one `(i, a)`.
    pub entries: Vec<(usize, usize, [Vec<f64>; 4])>,
}

/// All four row families for sample `i` and direction `a`.
pub fn backward_rows(
    w_tilde: &Matrix,
    w: &Matrix,
    b: &Matrix,
    before: &ForwardTrace,
    after: &ForwardTrace,
    i: usize,
    a: &[f64],
) -> BackwardRows {
    let big_l = before.l();
    let start = b.tmatvec(a);
    let mut entries = Vec::new();
    for l2 in 1..=big_l {
        let mut v: [Vec<f64>; 4] = [start.clone(), start.clone(), start.clone(), start.clone()];
        for l in (1..=l2).rev() {
            let (dt, dn) = (&before.masks[i][l], &after.masks[i][l]);
            let masked: [Vec<f64>; 4] = [
                dt.apply(&v[0]),
                dn.apply(&v[1]),
                dt.apply(&v[2]),
                dn.apply(&v[3]),
            ];
            let t = w_tilde.tmatvec_many(&[&masked[0], &masked[1]]);
            let p = w.tmatvec_many(&[&masked[2], &masked[3]]);
            let [t0, t1]: [Vec<f64>; 2] = t.try_into().expect("two rows");
            let [p0, p1]: [Vec<f64>; 2] = p.try_into().expect("two rows");
            v = [t0, t1, p0, p1];
            entries.push((l, l2, v.clone()));
        }
    }
    BackwardRows { entries }
}

/// Norms of the four backward differences for every chain, sample and
/// direction in `a_vectors`.
pub fn backward_stability_probe(
    before: &NetworkParams,
    after: &NetworkParams,
    before_trace: &ForwardTrace,
    after_trace: &ForwardTrace,
    a_vectors: &[Vec<f64>],
) -> ProbeReport {
    let mut recs = Vec::new();
    for i in 0..before_trace.n() {
        for a in a_vectors {
            let rows = backward_rows(
                &before.w,
                &after.w,
                &before.b,
                before_trace,
                after_trace,
                i,
                a,
            );
            for (l1, l2, r) in &rows.entries {
                let diff = |x: &[f64], y: &[f64]| norm(&crate::numerics::sub(x, y));
                recs.push(
                    Record::new("diff_a", diff(&r[0], &r[1]))
                        .i(i)
                        .chain(*l1, *l2),
                );
                recs.push(
                    Record::new("diff_b", diff(&r[1], &r[3]))
                        .i(i)
                        .chain(*l1, *l2),
                );
                recs.push(
                    Record::new("diff_c", diff(&r[0], &r[2]))
                        .i(i)
                        .chain(*l1, *l2),
                );
                recs.push(
                    Record::new("diff_d", diff(&r[2], &r[3]))
                        .i(i)
                        .chain(*l1, *l2),
                );
            }
        }
    }
    ProbeReport::new("backward_stability", "backward-stability", recs)
}

/// Coordinate-level effects of a rank-one perturbation on the coordinates
/// `k_set`: `|((W~ + W') h'_{i,l})_k|` and the coordinates of the backward
/// differences (D vs D~ with W~) and (W vs W~ with D).
pub fn rank_one_probes(
    before: &NetworkParams,
    ds: &Dataset,
    spec: &PerturbationSpec,
    k_set: &[usize],
    a_vectors: &[Vec<f64>],
) -> Result<ProbeReport> {
    let (y, z) = match &spec.kind {
        PerturbationKind::RankOne { y, z } => (y, z),
        _ => {
            return Err(Error::Invalid(
                "rank-one probes need a rank-one perturbation".into(),
            ))
        }
    };
    let m = before.dims.m;
    spec.validate(m)?;
    let support = y.iter().filter(|v| **v != 0.0).count();
    let (after, wp) = perturb(before, ds, spec, &SeededRng::new(0))?;
    let t0 = forward(before, ds)?;
    let t1 = forward(&after, ds)?;
    let scales = TheoryScales::new(before.dims, ds.delta, 1.0);
    let nf = (support.max(1)) as f64;
    let mf = m as f64;
    let mut recs = Vec::new();
    for i in 0..t0.n() {
        for l in 1..=t0.l() {
            let hp = crate::numerics::sub(&t1.h[i][l], &t0.h[i][l]);
            let v = after.w.matvec(&hp);
            let worst = k_set.iter().map(|&k| v[k].abs()).fold(0.0, f64::max);
            recs.push(Record::new("forward_coord", worst).i(i).l(l));
        }
        for a in a_vectors {
            let rows = backward_rows(&before.w, &after.w, &before.b, &t0, &t1, i, a);
            for (l1, l2, r) in &rows.entries {
                let ca = k_set
                    .iter()
                    .map(|&k| (r[1][k] - r[0][k]).abs())
                    .fold(0.0, f64::max);
                let cb = k_set
                    .iter()
                    .map(|&k| (r[3][k] - r[1][k]).abs())
                    .fold(0.0, f64::max);
                recs.push(Record::new("backward_coord_mask", ca).i(i).chain(*l1, *l2));
                recs.push(
                    Record::new("backward_coord_weight", cb)
                        .i(i)
                        .chain(*l1, *l2),
                );
            }
        }
    }
    let wp_norm = norm(y) * norm(z);
    Ok(
        ProbeReport::new("rank_one", "rank-one-coordinate-stability", recs)
            .with_extra("support", support as f64)
            .with_extra("w_prime_spectral", wp_norm)
            .with_extra("w_prime_frobenius", wp.frobenius())
            .with_extra("rho", scales.rho)
            .with_extra(
                "forward_scale",
                nf.powf(2.0 / 3.0) * spec.tau0.powf(5.0 / 6.0) / mf.powf(2.0 / 3.0),
            ),
    )
}

/// Default coordinate set: `count` uniform coordinates plus the support of `y`.
pub fn default_k_set(
    m: usize,
    count: usize,
    spec: &PerturbationSpec,
    rng: &SeededRng,
) -> Vec<usize> {
    let mut g = rng.generator();
    let mut ks = sample(&mut g, m, count.min(m)).into_vec();
    if let PerturbationKind::RankOne { y, .. } = &spec.kind {
        ks.extend(
            y.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(k, _)| k),
        );
    }
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Per-cell maxima over `(i, l)` and chains, used by the m-sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub m: usize,
    pub seed: u64,
    pub g_diff: f64,
    pub h_diff: f64,
    pub sign_changes: f64,
    pub masked_g: f64,
    pub diff_a: f64,
    pub diff_b: f64,
    pub diff_c: f64,
    pub diff_d: f64,
    pub recomputation_residual: f64,
}

/// One `(m, seed)` cell: initialize, perturb, and reduce every probe to its max.
pub fn stability_cell(
    params: &NetworkParams,
    ds: &Dataset,
    spec: &PerturbationSpec,
    seed: u64,
    a_count: usize,
) -> Result<StabilityCell> {
    let rng = SeededRng::new(seed).split("perturbation");
    let (after, wp) = perturb(params, ds, spec, &rng)?;
    let t0 = forward(params, ds)?;
    let t1 = forward(&after, ds)?;
    let (deltas, _) = forward_stability_probe(&t0, &t1);
    let mut g = SeededRng::new(seed).split("a-vectors").generator();
    let a_vectors: Vec<Vec<f64>> = (0..a_count)
        .map(|_| {
            let a = gaussian_vec(&mut g, params.dims.d, 1.0);
            let na = norm(&a);
            a.iter().map(|v| v / na).collect()
        })
        .collect();
    let back = backward_stability_probe(params, &after, &t0, &t1, &a_vectors);
    let mx = |f: fn(&StabilityDelta) -> f64| deltas.iter().map(f).fold(0.0, f64::max);
    Ok(StabilityCell {
        m: params.dims.m,
        seed,
        g_diff: mx(|d| d.g_diff),
        h_diff: mx(|d| d.h_diff),
        sign_changes: mx(|d| d.sign_changes as f64),
        masked_g: mx(|d| d.masked_g),
        diff_a: back.max_of("diff_a").unwrap_or(0.0),
        diff_b: back.max_of("diff_b").unwrap_or(0.0),
        diff_c: back.max_of("diff_c").unwrap_or(0.0),
        diff_d: back.max_of("diff_d").unwrap_or(0.0),
        recomputation_residual: forward_recomputation_residual(&params.w, &wp, &t0, &t1),
    })
}
