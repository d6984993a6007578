//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::time::Instant;

use rand::Rng;
use rnnlab::data::{generate_dataset, DataDims, Dataset};
use rnnlab::mc::{coordinate_split, decompose_distribution_check, randomness_decompose};
use rnnlab::numerics::{gaussian_vec, norm, Matrix, SeededRng};
use rnnlab::probes::init::{forward_norm_probe, intermediate_spectral_probe, separability_probe};
use rnnlab::probes::landscape::{
    decomposition_identity_probe, fake_gradient_bound_probe, pl_floor_probe, random_unit_losses,
    semi_smoothness_probe, smoothness_tau_grid, unit_spectral_direction,
};
use rnnlab::probes::stability::{stability_cell, PerturbationSpec, StabilityCell};
use rnnlab::rnn::{forward, gradient, Dims, NetworkParams};
use rnnlab::runner::{log_log_fit, mc_suite, run_cell, scaling_fit, ExperimentConfig};
use rnnlab::training::{
    gd_train, sgd_train, tune_learning_rate, Method, TrainConfig, TrainLog, TrainOutcome,
};

const REF: DataDims = DataDims {
    n: 4,
    l: 5,
    d_x: 4,
    d: 2,
};
const DELTA: f64 = 0.5;

fn setup(dd: DataDims, m: usize, seed: u64) -> (NetworkParams, Dataset) {
    let rng = SeededRng::new(seed);
    let ds = generate_dataset(dd, DELTA, 1.0, &rng.split("data")).unwrap();
    (
        NetworkParams::init(
            Dims {
                n: dd.n,
                l: dd.l,
                d_x: dd.d_x,
                d: dd.d,
                m,
            },
            &rng.split("net"),
        ),
        ds,
    )
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn geo_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.map(|x| x.max(f64::MIN_POSITIVE).ln()).collect();
    (v.iter().sum::<f64>() / v.len() as f64).exp()
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let rng = SeededRng::new(1000 + k);
        let mut g = rng.split("shape").generator();
        let (n, l, m) = (
            g.random_range(1..=3),
            g.random_range(2..=4),
            g.random_range(2..=32),
        );
        let dd = DataDims { n, l, d_x: 4, d: 2 };
        let ds = generate_dataset(dd, 0.3, 1.0, &rng.split("data")).unwrap();
        let p = NetworkParams::init(
            Dims {
                n,
                l,
                d_x: 4,
                d: 2,
                m,
            },
            &rng.split("net"),
        );
        let analytic = gradient(&p, &ds).unwrap();
        let mut fd = Matrix::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                let mut plus = p.w.clone();
                plus.set(r, c, p.w.get(r, c) + h);
                let mut minus = p.w.clone();
                minus.set(r, c, p.w.get(r, c) - h);
                let fp = forward(&p.with_w(plus), &ds).unwrap().objective();
                let fm = forward(&p.with_w(minus), &ds).unwrap().objective();
                fd.set(r, c, (fp - fm) / (2.0 * h));
            }
        }
        worst = worst.max(analytic.sub(&fd).frobenius() / analytic.frobenius().max(1e-300));
    }
    outcome(
        worst <= 1e-6,
        format!("worst relative FD error over 20 nets {worst:.2e} (<= 1e-6)"),
    )
}

fn identities() -> Outcome {
    let m = 1024;
    let (mut worst, mut recon) = (0.0f64, 0.0f64);
    let mut all_ok = true;
    for seed in 0..10u64 {
        let (p, ds) = setup(REF, m, seed);
        let wp = unit_spectral_direction(m, &SeededRng::new(seed).split("direction"))
            .scaled(1.0 / (m as f64).sqrt());
        let (res, _) = decomposition_identity_probe(&p, &wp, &ds).unwrap();
        all_ok &= res.ok();
        worst = worst
            .max(res.pointwise)
            .max(res.telescoping)
            .max(res.rearrangement);

        let v = gaussian_vec(&mut SeededRng::new(seed).split("v").generator(), m, 1.0);
        let v: Vec<f64> = v.iter().map(|x| x / norm(&v)).collect();
        let dec =
            randomness_decompose(&p.w, &v, 0.1, &SeededRng::new(seed).split("decompose")).unwrap();
        recon = recon.max(dec.reconstruct().sub(&p.w).max_abs());
        let support: Vec<usize> = (0..m).step_by(7).collect();
        let split = coordinate_split(&dec, &support).unwrap();
        recon = recon.max(split.w1.add(&split.w_prime_n).sub(&p.w).max_abs());
    }
    outcome(
        all_ok && worst <= 1e-8 && recon <= 1e-12,
        format!("worst identity residual {worst:.2e} (<= 1e-8), worst reconstruction error {recon:.2e} (<= 1e-12)"),
    )
}

fn train(method: Method, batch: usize, eps: f64, m: usize, seed: u64) -> TrainOutcome {
    let (p, ds) = setup(REF, m, seed);
    let tune = tune_learning_rate(&p, &ds, method, batch, 128.0, 20, 12).unwrap();
    let cfg = TrainConfig {
        eta: tune.eta,
        max_steps: 2000,
        target_eps: eps,
        batch_size: batch,
        seed,
        record_wall_time: false,
    };
    match method {
        Method::Gd => gd_train(&p, &ds, &cfg).unwrap(),
        Method::Sgd => sgd_train(&p, &ds, &cfg).unwrap(),
    }
}

fn log_linear_r2(log: &TrainLog) -> f64 {
    let pts: Vec<(f64, f64)> = log.rows.iter().map(|r| (r.step as f64, r.f.ln())).collect();
    scaling_fit(&pts).map_or(0.0, |f| f.r2)
}

fn training(gd_logs: &mut Vec<TrainLog>) -> Outcome {
    let m = 2048;
    let (mut gd_ok, mut sgd_ok) = (0, 0);
    let mut r2_min = f64::INFINITY;
    for seed in 0..10u64 {
        let gd = train(Method::Gd, REF.n, 1e-3, m, seed);
        let r2 = log_linear_r2(&gd.log);
        r2_min = r2_min.min(r2);
        if gd.log.steps_to(1e-3).is_some_and(|s| s <= 2000) && r2 >= 0.9 {
            gd_ok += 1;
        }
        gd_logs.push(gd.log);
        let sgd = train(Method::Sgd, 2, 1e-2, m, seed);
        if sgd.log.steps_to(1e-2).is_some_and(|s| s <= 2000) {
            sgd_ok += 1;
        }
    }
    outcome(
        gd_ok >= 8 && sgd_ok >= 8,
        format!("GD reached 1e-3 with R^2 >= 0.9 in {gd_ok}/10 seeds (min R^2 {r2_min:.3}); SGD |S|=2 reached 1e-2 in {sgd_ok}/10"),
    )
}

fn forward_norms() -> Outcome {
    let (mut checked, mut passed, mut clean) = (0usize, 0usize, 0usize);
    for seed in 0..50u64 {
        let (p, ds) = setup(REF, 1024, seed);
        let rep = forward_norm_probe(&forward(&p, &ds).unwrap(), REF.l);
        checked += rep.records.iter().filter(|r| r.pass.is_some()).count();
        passed += rep.records.iter().filter(|r| r.pass == Some(true)).count();
        clean += usize::from(rep.all_pass());
    }
    let frac = passed as f64 / checked as f64;
    outcome(
        frac >= 0.95,
        format!("pooled bound pass fraction {frac:.4} over 50 seeds (>= 0.95); seeds with every bound holding {clean}/50"),
    )
}

fn separability() -> Outcome {
    let mut ok = 0;
    for seed in 0..50u64 {
        let (p, ds) = setup(REF, 1024, seed);
        ok += usize::from(separability_probe(&forward(&p, &ds).unwrap(), DELTA).all_pass());
    }
    outcome(
        ok as f64 >= 0.95 * 50.0,
        format!("separation >= delta/2 in {ok}/50 seeds (>= 95%)"),
    )
}

fn chain_norms() -> Outcome {
    let dd = DataDims {
        n: 4,
        l: 8,
        d_x: 4,
        d: 2,
    };
    let (mut max_norm, mut max_slope) = (0.0f64, f64::NEG_INFINITY);
    let mut all = true;
    for seed in 0..20u64 {
        let (p, ds) = setup(dd, 1024, seed);
        let t = forward(&p, &ds).unwrap();
        let rep = intermediate_spectral_probe(&p, &t, (seed as usize) % dd.n, 1e-4);
        all &= rep.all_pass();
        max_norm = max_norm.max(rep.max_of("max_chain_norm").unwrap());
        max_slope = max_slope.max(rep.max_of("length_slope").unwrap());
    }
    outcome(
        all,
        format!(
            "max chain norm {max_norm:.3} (<= 10), max log-norm slope {max_slope:.3} (<= {:.3})",
            1.2f64.ln()
        ),
    )
}

fn stability_sweep() -> Vec<(usize, Vec<StabilityCell>)> {
    [512usize, 1024, 2048, 4096]
        .iter()
        .map(|&m| {
            let cells = (0..10u64)
                .map(|seed| {
                    let (p, ds) = setup(REF, m, seed);
                    let spec = PerturbationSpec::sign_flip(1.0, (seed as usize) % REF.n, REF.l);
                    stability_cell(&p, &ds, &spec, seed, 2).unwrap()
                })
                .collect();
            (m, cells)
        })
        .collect()
}

fn slope(sweep: &[(usize, Vec<StabilityCell>)], get: fn(&StabilityCell) -> f64) -> f64 {
    let pts: Vec<(f64, f64)> = sweep
        .iter()
        .map(|(m, cells)| (*m as f64, geo_mean(cells.iter().map(get))))
        .collect();
    log_log_fit(&pts).unwrap().slope
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn forward_scaling(sweep: &[(usize, Vec<StabilityCell>)]) -> Outcome {
    let h = slope(sweep, |c| c.h_diff);
    let d = slope(sweep, |c| c.sign_changes);
    let g = slope(sweep, |c| c.masked_g);
    outcome(
        within(h, -0.5, 0.2) && within(d, 2.0 / 3.0, 0.15) && within(g, -0.5, 0.2),
        format!("slopes: ||h'|| {h:.3} (-0.5 +- 0.2), ||D'||_0 {d:.3} (2/3 +- 0.15), ||D'g|| {g:.3} (-0.5 +- 0.2)"),
    )
}

fn backward_scaling(sweep: &[(usize, Vec<StabilityCell>)]) -> Outcome {
    let s = [
        slope(sweep, |c| c.diff_a),
        slope(sweep, |c| c.diff_b),
        slope(sweep, |c| c.diff_c),
        slope(sweep, |c| c.diff_d),
    ];
    outcome(
        within(s[0], 1.0 / 3.0, 0.15)
            && within(s[3], 1.0 / 3.0, 0.15)
            && within(s[1], 0.0, 0.15)
            && within(s[2], 0.0, 0.15),
        format!(
            "slopes: (a) {:.3}, (d) {:.3} (1/3 +- 0.15); (b) {:.3}, (c) {:.3} (0 +- 0.15)",
            s[0], s[3], s[1], s[2]
        ),
    )
}

fn gradient_lower(gd_logs: &[TrainLog]) -> Outcome {
    let mut floor_ok = 0;
    let mut worst = f64::INFINITY;
    for log in gd_logs {
        let rep = pl_floor_probe(log, 2048, 1e-4, 1e-3);
        floor_ok += usize::from(rep.all_pass());
        worst = worst.min(rep.extra("min_ratio_over_r0").unwrap());
    }
    let mut pts = Vec::new();
    for &m in &[256usize, 512, 1024, 2048] {
        let v = geo_mean((0..5u64).map(|s| {
            let (p, ds) = setup(REF, m, s);
            let loss =
                random_unit_losses(REF.n, REF.l, REF.d, &SeededRng::new(s).split("fixed-loss"));
            fake_gradient_bound_probe(&p, &ds, &loss)
                .unwrap()
                .extra("lower_ratio")
                .unwrap()
        }));
        pts.push((m as f64, v));
    }
    let fake = log_log_fit(&pts).unwrap().slope;
    outcome(
        floor_ok == gd_logs.len() && within(fake, 0.0, 0.25),
        format!(
            "r(t) >= 1e-4 r(0) on {floor_ok}/{} runs (min r/r0 {worst:.3e}); fake-gradient ratio slope {fake:.3} (0 +- 0.25)",
            gd_logs.len()
        ),
    )
}

fn semi_smoothness() -> Outcome {
    let m = 1024;
    let (p, ds) = setup(REF, m, 0);
    let tune = tune_learning_rate(&p, &ds, Method::Gd, REF.n, 128.0, 20, 12).unwrap();
    let mut cfg = TrainConfig {
        eta: tune.eta,
        max_steps: 2000,
        target_eps: 1e-3,
        batch_size: REF.n,
        seed: 0,
        record_wall_time: false,
    };
    let steps = gd_train(&p, &ds, &cfg).unwrap().log.rows.len() - 1;
    cfg.max_steps = steps / 2;
    let mid = gd_train(&p, &ds, &cfg).unwrap().params;
    let taus = smoothness_tau_grid(m, 10);
    let (mut b_min, mut rel_max) = (f64::INFINITY, 0.0f64);
    for k in 0..10u64 {
        let dir = unit_spectral_direction(m, &SeededRng::new(0).split("direction").split_index(k));
        let (fit, _) = semi_smoothness_probe(&mid, &ds, &dir, &taus).unwrap();
        b_min = b_min.min(fit.b);
        rel_max = rel_max.max(fit.first_order_rel);
    }
    outcome(
        b_min >= 0.0 && rel_max <= 0.05,
        format!("checkpoint at step {} of {steps}: min b {b_min:.3e} (>= 0), worst first-order error {rel_max:.2e} (<= 5%)", steps / 2),
    )
}

fn concentration() -> Outcome {
    let reports = mc_suite(100_000, 0).unwrap();
    let families = [
        "chi-square",
        "sum-of-squares-deviation",
        "truncated-square-sum",
        "relu-gaussian-norm",
        "relu-matrix-norm",
        "gaussian-percentile",
        "gaussian-alpha-sigma-good",
        "bounded-differences",
    ];
    let missing: Vec<&str> = families
        .iter()
        .copied()
        .filter(|f| !reports.iter().any(|r| r.lemma.starts_with(f)))
        .collect();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.lemma.as_str())
        .collect();
    let min_trials = reports
        .iter()
        .filter(|r| {
            !r.lemma.starts_with("truncated")
                && !r.lemma.starts_with("gaussian-alpha")
                && !r.lemma.starts_with("heavy")
        })
        .map(|r| r.trials)
        .min()
        .unwrap_or(0);
    outcome(
        missing.is_empty() && failed.is_empty() && min_trials >= 100_000,
        format!(
            "{} checks, failed {:?}, missing {:?}, trials per full-size check >= {min_trials}",
            reports.len(),
            failed,
            missing
        ),
    )
}

fn decomposition_distribution() -> Outcome {
    let s = decompose_distribution_check(1024, 0.1, 1.0, 100, 0.01, 0).unwrap();
    outcome(
        s.ks_pass_fraction >= 0.95 && s.positive_fraction >= 0.24 && s.negative_fraction >= 0.24,
        format!(
            "KS pass fraction {:.2} (>= 0.95); sign probabilities {:.3} / {:.3} (>= 0.24)",
            s.ks_pass_fraction, s.positive_fraction, s.negative_fraction
        ),
    )
}

fn reproducibility() -> Outcome {
    let cfg = ExperimentConfig::from_json(
        r#"{"dims": {"n": 4, "L": 5, "d_x": 4, "d": 2}, "m_grid": [256], "delta": 0.5, "seeds": [3],
            "probes": ["train", "forward_norm", "forward_stability", "pl_ratio", "semi_smoothness"],
            "train": {"method": "gd", "calib": 128, "max_steps": 200, "target_eps": 0.001, "batch_size": 4}}"#,
    )
    .unwrap();
    let read = |dir: &std::path::Path| -> Vec<Vec<u8>> {
        let stem = format!("cell_m256_seed3_{}", cfg.hash());
        ["", "_train"]
            .iter()
            .map(|s| std::fs::read(dir.join("cells").join(format!("{stem}{s}.csv"))).unwrap())
            .collect()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_cell(&cfg, 256, 3, Some(a.path())).unwrap();
    run_cell(&cfg, 256, 3, Some(b.path())).unwrap();
    let (x, y) = (read(a.path()), read(b.path()));
    outcome(
        x == y && !x[0].is_empty(),
        format!(
            "probe CSV {} bytes, train CSV {} bytes, identical: {}",
            x[0].len(),
            x[1].len(),
            x == y
        ),
    )
}

fn check(failures: &mut usize, name: &str, limit: Option<u64>, f: impl FnOnce() -> Outcome) {
    let t0 = Instant::now();
    let out = f();
    let secs = t0.elapsed().as_secs_f64();
    let in_time = limit.is_none_or(|l| secs <= l as f64);
    let pass = out.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {l}s"));
    println!(
        "{} criterion {name}: {} [{secs:.1}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    *failures += usize::from(!pass);
}

fn main() {
    // `cargo test` may pass harness flags; `--list` expects no tests to run.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    let mut gd_logs = Vec::new();
    let mut sweep = Vec::new();
    check(&mut failures, "01 gradient check", Some(60), gradient_check);
    check(&mut failures, "02 exact identities", Some(120), identities);
    check(&mut failures, "03 training convergence", Some(600), || {
        training(&mut gd_logs)
    });
    check(&mut failures, "04 forward norm bounds", None, forward_norms);
    check(&mut failures, "05 separability", None, separability);
    check(&mut failures, "06 chain spectral norms", None, chain_norms);
    check(
        &mut failures,
        "07 forward stability scaling",
        Some(600),
        || {
            sweep = stability_sweep();
            forward_scaling(&sweep)
        },
    );
    check(&mut failures, "08 backward stability scaling", None, || {
        backward_scaling(&sweep)
    });
    check(&mut failures, "09 gradient lower bounds", None, || {
        gradient_lower(&gd_logs)
    });
    check(&mut failures, "10 semi-smoothness", None, semi_smoothness);
    check(
        &mut failures,
        "11 concentration checks",
        Some(300),
        concentration,
    );
    check(
        &mut failures,
        "12 decomposition distribution",
        None,
        decomposition_distribution,
    );
    check(
        &mut failures,
        "13 reproducible cell output",
        None,
        reproducibility,
    );
    println!("acceptance: {} of 13 criteria passed", 13 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
