//! Trains the reference network with tuned full-batch and minibatch descent.
//!
//! `cargo run --release --example train_gd -- [m] [seed]`

use rnnlab::data::{generate_dataset, DataDims};
use rnnlab::numerics::SeededRng;
use rnnlab::rnn::{Dims, NetworkParams};
use rnnlab::training::{gd_train, sgd_train, tune_learning_rate, Method, TrainConfig};

fn main() -> rnnlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let m: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2048);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dd = DataDims {
        n: 4,
        l: 5,
        d_x: 4,
        d: 2,
    };
    let rng = SeededRng::new(seed);
    let ds = generate_dataset(dd, 0.5, 1.0, &rng.split("data"))?;
    let params = NetworkParams::init(
        Dims {
            n: 4,
            l: 5,
            d_x: 4,
            d: 2,
            m,
        },
        &rng.split("net"),
    );

    for (method, bs, eps) in [(Method::Gd, 4, 1e-3), (Method::Sgd, 2, 1e-2)] {
        let start: f64 = std::env::var("CALIB")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(64.0);
        let t0 = std::time::Instant::now();
        let tune = tune_learning_rate(&params, &ds, method, bs, start, 20, 12)?;
        let cfg = TrainConfig {
            eta: tune.eta,
            max_steps: 2000,
            target_eps: eps,
            batch_size: bs,
            seed,
            record_wall_time: true,
        };
        let out = match method {
            Method::Gd => gd_train(&params, &ds, &cfg)?,
            Method::Sgd => sgd_train(&params, &ds, &cfg)?,
        };
        let last = out.log.rows.last().unwrap();
        println!(
            "{method:?}: calib {} eta {:.3e}  f0 {:.4}  final f {:.3e} at step {}  status {:?}  movement {:.4}  ({:.1}s)",
            tune.calib, tune.eta, out.log.rows[0].f, last.f, last.step, out.log.status, last.movement_fro,
            t0.elapsed().as_secs_f64()
        );
        for r in out
            .log
            .rows
            .iter()
            .step_by((out.log.rows.len() / 10).max(1))
        {
            println!(
                "  step {:5}  f {:.4e}  grad {:.4e}",
                r.step, r.f, r.grad_fro
            );
        }
    }
    Ok(())
}
