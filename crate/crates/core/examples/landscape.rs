//! Landscape measurements along a gradient-descent run: the gradient-to-loss
//! ratio, semi-smoothness at a mid-training checkpoint, and how the
//! fake-gradient lower ratio depends on the width.
//!
//! `cargo run --release --example landscape -- [m] [seed]`

use rnnlab::data::{generate_dataset, DataDims};
use rnnlab::numerics::SeededRng;
use rnnlab::probes::landscape::{
    fake_gradient_bound_probe, pl_floor_probe, random_unit_losses, semi_smoothness_probe,
    smoothness_tau_grid, unit_spectral_direction,
};
use rnnlab::rnn::{Dims, NetworkParams};
use rnnlab::runner::log_log_fit;
use rnnlab::training::{gd_train, tune_learning_rate, Method, TrainConfig};

fn main() -> rnnlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let m: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dd = DataDims {
        n: 4,
        l: 5,
        d_x: 4,
        d: 2,
    };
    let dims = |m| Dims {
        n: dd.n,
        l: dd.l,
        d_x: dd.d_x,
        d: dd.d,
        m,
    };
    let rng = SeededRng::new(seed);
    let ds = generate_dataset(dd, 0.5, 1.0, &rng.split("data"))?;
    let params = NetworkParams::init(dims(m), &rng.split("net"));

    let tune = tune_learning_rate(&params, &ds, Method::Gd, dd.n, 128.0, 20, 12)?;
    let mut cfg = TrainConfig {
        eta: tune.eta,
        max_steps: 2000,
        target_eps: 1e-3,
        batch_size: dd.n,
        seed,
        record_wall_time: false,
    };
    let run = gd_train(&params, &ds, &cfg)?;
    let steps = run.log.rows.len() - 1;
    let pl = pl_floor_probe(&run.log, m, 1e-4, cfg.target_eps);
    println!(
        "GD: {steps} steps ({:?}), r0 = {:.4e}, min r(t)/r0 = {:.4}, floor holds: {}",
        run.log.status,
        pl.extra("r0").unwrap(),
        pl.extra("min_ratio_over_r0").unwrap(),
        pl.all_pass()
    );

    cfg.max_steps = steps / 2;
    let mid = gd_train(&params, &ds, &cfg)?.params;
    let taus = smoothness_tau_grid(m, 10);
    println!("semi-smoothness at step {}:", cfg.max_steps);
    for k in 0..10 {
        let dir = unit_spectral_direction(m, &rng.split("direction").split_index(k));
        let (fit, _) = semi_smoothness_probe(&mid, &ds, &dir, &taus)?;
        println!(
            "  dir {k}: a {:+.3e}  b {:+.4e}  b_env {:.4e}  first-order rel {:.2e}",
            fit.a, fit.b, fit.b_envelope, fit.first_order_rel
        );
    }

    let grid = [256usize, 512, 1024, 2048];
    let mut pts = Vec::new();
    for &mm in &grid {
        let mut acc = 0.0;
        for s in 0..5u64 {
            let r = SeededRng::new(s);
            let ds = generate_dataset(dd, 0.5, 1.0, &r.split("data"))?;
            let p = NetworkParams::init(dims(mm), &r.split("net"));
            let loss = random_unit_losses(dd.n, dd.l, dd.d, &r.split("fixed-loss"));
            acc += fake_gradient_bound_probe(&p, &ds, &loss)?
                .extra("lower_ratio")
                .unwrap()
                .ln();
        }
        let v = (acc / 5.0).exp();
        println!("fake-gradient lower ratio at m = {mm}: {v:.4e}");
        pts.push((mm as f64, v));
    }
    println!(
        "log-log slope of the ratio against m: {:.4}",
        log_log_fit(&pts)?.slope
    );
    Ok(())
}
