//! Compares the analytic gradient with central finite differences on small
//! random networks.
//!
//! `cargo run --release --example gradient_check -- [nets]`

use rand::Rng;
use rnnlab::data::{generate_dataset, DataDims};
use rnnlab::numerics::{Matrix, SeededRng};
use rnnlab::rnn::{forward, gradient, Dims, NetworkParams};

fn main() -> rnnlab::Result<()> {
    let nets: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let h = 1e-5;
    for k in 0..nets {
        let rng = SeededRng::new(k);
        let mut g = rng.split("shape").generator();
        let (n, l, m) = (
            g.random_range(1..=3),
            g.random_range(2..=4),
            g.random_range(4..=32),
        );
        let dd = DataDims { n, l, d_x: 4, d: 2 };
        let ds = generate_dataset(dd, 0.3, 1.0, &rng.split("data"))?;
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
        let analytic = gradient(&p, &ds)?;
        let mut fd = Matrix::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                let mut plus = p.w.clone();
                plus.set(r, c, p.w.get(r, c) + h);
                let mut minus = p.w.clone();
                minus.set(r, c, p.w.get(r, c) - h);
                let fp = forward(&p.with_w(plus), &ds)?.objective();
                let fm = forward(&p.with_w(minus), &ds)?.objective();
                fd.set(r, c, (fp - fm) / (2.0 * h));
            }
        }
        let rel = analytic.sub(&fd).frobenius() / analytic.frobenius().max(1e-300);
        println!(
            "net {k}: n={n} L={l} m={m}  ||grad||_F = {:.4e}  relative FD error = {rel:.2e}",
            analytic.frobenius()
        );
    }
    Ok(())
}
