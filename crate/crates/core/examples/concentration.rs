//! Monte-Carlo checks of the concentration inequalities and of the
//! distribution of the randomness decomposition.
//!
//! `cargo run --release --example concentration -- [trials] [seed]`

use rnnlab::mc::decompose_distribution_check;
use rnnlab::runner::mc_suite;

fn main() -> rnnlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let trials: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let t0 = std::time::Instant::now();
    let reports = mc_suite(trials, seed)?;
    println!(
        "{:<40}{:>10}{:>14}{:>14}{:>12}  verdict",
        "check", "trials", "empirical", "bound", "slack"
    );
    for r in &reports {
        println!(
            "{:<40}{:>10}{:>14.5e}{:>14.5e}{:>12.3e}  {:?}",
            r.lemma, r.trials, r.empirical, r.bound, r.slack, r.verdict
        );
    }
    println!("suite finished in {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = std::time::Instant::now();
    let stats = decompose_distribution_check(1024, 0.1, 1.0, 100, 0.01, seed)?;
    println!(
        "decomposition at m = 1024, theta = 0.1: KS pass fraction {:.2}, Pr[u > theta/(2 sqrt m)] = {:.4}, \
         Pr[u < -theta/(2 sqrt m)] = {:.4}, reconstruction error {:.1e} ({:.1}s)",
        stats.ks_pass_fraction,
        stats.positive_fraction,
        stats.negative_fraction,
        stats.max_reconstruction_error,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
