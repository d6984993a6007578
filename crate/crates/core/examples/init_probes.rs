//! Measures a freshly initialized network: hidden-state norms, fresh
//! randomness per layer, separability, and norms of layer products.
//!
//! `cargo run --release --example init_probes -- [m] [seed] [L]`

use rnnlab::data::{generate_dataset, DataDims};
use rnnlab::numerics::SeededRng;
use rnnlab::probes::init::{
    forward_norm_probe, fresh_randomness_probe, intermediate_spectral_probe, separability_probe,
    sparse_spectral_probe,
};
use rnnlab::probes::report::ProbeReport;
use rnnlab::rnn::{forward, Dims, NetworkParams};

fn show(rep: &ProbeReport) {
    let a = &rep.aggregate;
    let frac = a
        .pass_fraction
        .map_or("-".to_string(), |f| format!("{f:.3}"));
    println!(
        "{:<24} records {:>4}  min {:>10.4e}  max {:>10.4e}  pass fraction {frac}",
        rep.probe, a.count, a.min, a.max
    );
    for (k, v) in &a.extra {
        println!("{:<24}   {k} = {v:.4e}", "");
    }
}

fn main() -> rnnlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let m: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let l: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let dd = DataDims {
        n: 4,
        l,
        d_x: 4,
        d: 2,
    };
    let rng = SeededRng::new(seed);
    let ds = generate_dataset(dd, 0.5, 1.0, &rng.split("data"))?;
    let p = NetworkParams::init(
        Dims {
            n: dd.n,
            l,
            d_x: dd.d_x,
            d: dd.d,
            m,
        },
        &rng.split("net"),
    );
    let t = forward(&p, &ds)?;
    show(&forward_norm_probe(&t, l));
    show(&fresh_randomness_probe(&t, 1e-6));
    show(&separability_probe(&t, ds.delta));
    show(&intermediate_spectral_probe(&p, &t, 0, 1e-6));
    show(&sparse_spectral_probe(
        &p,
        &t,
        0,
        None,
        32,
        &rng.split("sparse"),
    ));
    Ok(())
}
