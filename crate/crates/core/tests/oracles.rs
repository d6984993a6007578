//! Independent reference computations checked against the library.

use rand::Rng;
use rnnlab::data::{generate_dataset, DataDims, Dataset};
use rnnlab::mc::{ks_pvalue, ks_statistic, randomness_decompose};
use rnnlab::numerics::{gaussian_matrix, spectral_norm, Matrix, SeededRng};
use rnnlab::probes::stability::{perturb, PerturbationSpec};
use rnnlab::rnn::{back_operator, forward, gradient, Dims, NetworkParams};
use rnnlab::runner::scaling_fit;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Objective from the definition, with plain index loops.
fn naive_objective(p: &NetworkParams, ds: &Dataset) -> f64 {
    let m = p.dims.m;
    let mut f = 0.0;
    for i in 0..p.dims.n {
        let mut h = vec![0.0; m];
        for l in 1..=p.dims.l {
            let x = ds.token(i, l);
            let mut next = vec![0.0; m];
            for r in 0..m {
                let mut s = 0.0;
                for c in 0..m {
                    s += p.w.get(r, c) * h[c];
                }
                for (c, xc) in x.iter().enumerate() {
                    s += p.a.get(r, c) * xc;
                }
                next[r] = relu(s);
            }
            h = next;
            if l >= 2 {
                let y = ds.label(i, l);
                for k in 0..p.dims.d {
                    let mut out = 0.0;
                    for c in 0..m {
                        out += p.b.get(k, c) * h[c];
                    }
                    f += 0.5 * (out - y[k]).powi(2);
                }
            }
        }
    }
    f
}

fn small_net(seed: u64) -> (NetworkParams, Dataset) {
    let rng = SeededRng::new(seed);
    let mut g = rng.split("shape").generator();
    let (n, l, m) = (
        g.random_range(1..=3),
        g.random_range(2..=4),
        g.random_range(3..=16),
    );
    let dd = DataDims { n, l, d_x: 4, d: 2 };
    let ds = generate_dataset(dd, 0.3, 1.0, &rng.split("data")).unwrap();
    (
        NetworkParams::init(
            Dims {
                n,
                l,
                d_x: 4,
                d: 2,
                m,
            },
            &rng.split("net"),
        ),
        ds,
    )
}

#[test]
fn objective_matches_naive_loops() {
    for seed in 0..6 {
        let (p, ds) = small_net(seed);
        let lib = forward(&p, &ds).unwrap().objective();
        let naive = naive_objective(&p, &ds);
        assert!(
            (lib - naive).abs() <= 1e-12 * naive.max(1.0),
            "{lib} vs {naive}"
        );
    }
}

#[test]
fn gradient_matches_central_differences_of_naive_objective() {
    let h = 1e-5;
    for seed in 10..14 {
        let (p, ds) = small_net(seed);
        let g = gradient(&p, &ds).unwrap();
        let m = p.dims.m;
        let mut err = 0.0;
        for r in 0..m {
            for c in 0..m {
                let mut wp = p.w.clone();
                wp.set(r, c, p.w.get(r, c) + h);
                let mut wm = p.w.clone();
                wm.set(r, c, p.w.get(r, c) - h);
                let fd = (naive_objective(&p.with_w(wp), &ds)
                    - naive_objective(&p.with_w(wm), &ds))
                    / (2.0 * h);
                err += (fd - g.get(r, c)).powi(2);
            }
        }
        assert!(
            err.sqrt() <= 1e-6 * g.frobenius(),
            "seed {seed}: {} vs {}",
            err.sqrt(),
            g.frobenius()
        );
    }
}

/// Largest singular value by one-sided Jacobi rotations.
fn jacobi_sigma_max(a: &Matrix) -> f64 {
    let (rows, cols) = a.shape();
    let mut u: Vec<Vec<f64>> = (0..cols).map(|c| a.col(c)).collect();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                if gamma == 0.0 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for k in 0..rows {
                    let (x, y) = (u[p][k], u[q][k]);
                    u[p][k] = cs * x - sn * y;
                    u[q][k] = sn * x + cs * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    u.iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[test]
fn spectral_norm_matches_jacobi_svd() {
    let fixed = Matrix::from_rows(&[
        vec![2.0, -1.0, 0.5, 3.0],
        vec![0.0, 1.5, -2.0, 1.0],
        vec![1.0, 1.0, 1.0, 1.0],
        vec![-0.5, 2.5, 0.0, -1.0],
        vec![3.0, 0.0, -1.5, 0.5],
        vec![0.25, -0.75, 2.0, 1.25],
    ])
    .unwrap();
    let mut cases = vec![fixed];
    for s in 0..5 {
        cases.push(gaussian_matrix(6, 4, 1.0, &SeededRng::new(s)));
    }
    for a in &cases {
        let want = jacobi_sigma_max(a);
        let got = spectral_norm(a, 1e-12).value;
        assert!((got - want).abs() <= 1e-8 * want, "{got} vs {want}");
    }
}

#[test]
fn back_operator_matches_explicit_products() {
    let (p, ds) = small_net(21);
    let t = forward(&p, &ds).unwrap();
    let big_l = p.dims.l;
    for a in 2..=big_l {
        for l in 1..=a {
            let mut prod = p.b.clone();
            for layer in (l + 1..=a).rev() {
                let mask: Vec<f64> = (0..p.dims.m)
                    .map(|k| if t.masks[0][layer].get(k) { 1.0 } else { 0.0 })
                    .collect();
                prod = prod.matmul(&Matrix::diag(&mask)).matmul(&p.w);
            }
            let lib = back_operator(&p, &t, 0, l, a).unwrap();
            assert!(lib.sub(&prod).max_abs() <= 1e-12 * (1.0 + prod.max_abs()));
        }
    }
}

#[test]
fn decomposition_coupling_reconstructs() {
    let m = 64;
    let w = gaussian_matrix(m, m, 2.0 / m as f64, &SeededRng::new(3));
    let mut g = SeededRng::new(4).generator();
    let v: Vec<f64> = (0..m).map(|_| g.random::<f64>() - 0.5).collect();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let v: Vec<f64> = v.iter().map(|x| x / nv).collect();
    let r = randomness_decompose(&w, &v, 0.3, &SeededRng::new(5)).unwrap();
    // W = W2 + u v^T, entrywise
    for row in 0..m {
        for col in 0..m {
            let want = r.w2.get(row, col) + r.u[row] * v[col];
            assert!((w.get(row, col) - want).abs() <= 1e-12);
        }
    }
    let w2v = r.w2.matvec(&v);
    for k in 0..m {
        assert!((w2v[k] - r.g1[k]).abs() <= 1e-12);
    }
}

#[test]
fn ks_pvalue_at_classic_critical_value() {
    // P(sqrt(n) D > 1.3581) = 0.05 asymptotically
    let n = 100_000;
    let p = ks_pvalue(1.3581 / (n as f64).sqrt(), n);
    assert!((p - 0.05).abs() < 1e-3, "{p}");
    // uniform grid against the uniform cdf has D = 1/n
    let xs: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    assert!((ks_statistic(&xs, |x| x.clamp(0.0, 1.0)) - 0.1).abs() < 1e-15);
}

#[test]
fn noisy_two_thirds_regression() {
    let mut g = SeededRng::new(8).generator();
    let noise = rand_distr::Normal::new(0.0, 0.05).unwrap();
    let pts: Vec<(f64, f64)> = (0..8)
        .map(|k| (k as f64, 2.0 / 3.0 * k as f64 + g.sample(noise)))
        .collect();
    assert!((scaling_fit(&pts).unwrap().slope - 2.0 / 3.0).abs() < 0.1);
}

#[test]
fn random_spectral_perturbation_on_budget() {
    let (p, ds) = {
        let dd = DataDims {
            n: 2,
            l: 3,
            d_x: 4,
            d: 2,
        };
        let ds = generate_dataset(dd, 0.5, 1.0, &SeededRng::new(1)).unwrap();
        (
            NetworkParams::init(
                Dims {
                    n: 2,
                    l: 3,
                    d_x: 4,
                    d: 2,
                    m: 6,
                },
                &SeededRng::new(2),
            ),
            ds,
        )
    };
    let (_, wp) = perturb(
        &p,
        &ds,
        &PerturbationSpec::random_spectral(0.5),
        &SeededRng::new(3),
    )
    .unwrap();
    let want = 0.5 / 6f64.sqrt();
    assert!((jacobi_sigma_max(&wp) - want).abs() <= 1e-7 * want);
}
