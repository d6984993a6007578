//! Runs a small experiment through the runner and prints the summary:
//! initialization and landscape probes over a width grid, plus training.
//!
//! `cargo run --release --example sweep -- [out-dir]`

use rnnlab::runner::{run_experiment, ExperimentConfig};

const CONFIG: &str = r#"{
  "dims": {"n": 4, "L": 5, "d_x": 4, "d": 2},
  "m_grid": [128, 256, 512],
  "delta": 0.5,
  "seeds": [0, 1, 2],
  "probes": ["forward_norm", "separability", "intermediate_spectral", "forward_stability",
             "decomposition_identity", "fake_gradient", "train"],
  "train": {"method": "gd", "calib": 64, "max_steps": 2000, "target_eps": 0.001, "batch_size": 4}
}"#;

fn main() -> rnnlab::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "sweep-out".into());
    let cfg = ExperimentConfig::from_json(CONFIG)?;
    let run = run_experiment(&cfg, Some(std::path::Path::new(&out)), 1)?;
    for v in &run.summary.verdicts {
        println!(
            "{:<24} {}/{} cells at or above {:.2}",
            v.probe, v.passing_cells, v.cells, v.threshold
        );
    }
    for f in &run.summary.fits {
        println!(
            "{:<24} {:<22} slope {:+.3}  r2 {:.3}",
            f.probe, f.quantity, f.fit.slope, f.fit.r2
        );
    }
    println!(
        "summary written to {}",
        run.summary_path.as_ref().unwrap().display()
    );
    std::process::exit(run.exit_code());
}
