//! Sweeps the width and fits how the perturbation effects scale with `m`.
//!
//! Each cell perturbs `W` by a random spectral part plus a rank-one part that
//! flips the signs of the smallest pre-activations, then records the largest
//! forward and backward changes. Per-width values are geometric means over
//! seeds; slopes are least-squares fits in log-log space.
//!
//! `cargo run --release --example stability_sweep -- [seeds] [m,m,...]`

use rnnlab::data::{generate_dataset, DataDims};
use rnnlab::numerics::SeededRng;
use rnnlab::probes::stability::{stability_cell, PerturbationSpec, StabilityCell};
use rnnlab::rnn::{Dims, NetworkParams};
use rnnlab::runner::{log_log_fit, parse_list};

fn main() -> rnnlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let grid: Vec<usize> = match args.get(2) {
        Some(s) => parse_list(s)?,
        None => vec![512, 1024, 2048, 4096],
    };
    let dd = DataDims {
        n: 4,
        l: 5,
        d_x: 4,
        d: 2,
    };
    let fields: [(&str, fn(&StabilityCell) -> f64); 8] = [
        ("g_diff", |c| c.g_diff),
        ("h_diff", |c| c.h_diff),
        ("sign_changes", |c| c.sign_changes),
        ("masked_g", |c| c.masked_g),
        ("diff_a", |c| c.diff_a),
        ("diff_b", |c| c.diff_b),
        ("diff_c", |c| c.diff_c),
        ("diff_d", |c| c.diff_d),
    ];
    let mut per_m: Vec<Vec<StabilityCell>> = Vec::new();
    for &m in &grid {
        let t0 = std::time::Instant::now();
        let mut cells = Vec::new();
        for seed in 0..seeds {
            let rng = SeededRng::new(seed);
            let ds = generate_dataset(dd, 0.5, 1.0, &rng.split("data"))?;
            let params = NetworkParams::init(
                Dims {
                    n: dd.n,
                    l: dd.l,
                    d_x: dd.d_x,
                    d: dd.d,
                    m,
                },
                &rng.split("net"),
            );
            let spec = PerturbationSpec::sign_flip(1.0, (seed as usize) % dd.n, dd.l);
            cells.push(stability_cell(&params, &ds, &spec, seed, 2)?);
        }
        println!(
            "m = {m}: {} cells in {:.1}s",
            cells.len(),
            t0.elapsed().as_secs_f64()
        );
        per_m.push(cells);
    }
    println!(
        "{:<14}{}",
        "quantity",
        grid.iter().map(|m| format!("{m:>12}")).collect::<String>() + "       slope     r2"
    );
    for (name, get) in fields {
        let means: Vec<f64> = per_m
            .iter()
            .map(|cells| {
                (cells
                    .iter()
                    .map(|c| get(c).max(f64::MIN_POSITIVE).ln())
                    .sum::<f64>()
                    / cells.len() as f64)
                    .exp()
            })
            .collect();
        let pts: Vec<(f64, f64)> = grid
            .iter()
            .zip(&means)
            .map(|(m, v)| (*m as f64, *v))
            .collect();
        let fit = log_log_fit(&pts).ok();
        println!(
            "{name:<14}{}{:>12}{:>7}",
            means
                .iter()
                .map(|v| format!("{v:>12.4e}"))
                .collect::<String>(),
            fit.as_ref()
                .map_or("-".into(), |f| format!("{:.3}", f.slope)),
            fit.as_ref().map_or("-".into(), |f| format!("{:.3}", f.r2)),
        );
    }
    Ok(())
}
