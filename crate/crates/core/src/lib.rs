//! Numerical laboratory for wide ReLU Elman networks.
//!
//! The crate builds the network `h_l = relu(W h_{l-1} + A x_l)`, `y_l = B h_l`,
//! trains `W` by gradient descent, and measures the quantities that govern
//! its training dynamics: hidden-state norms, separability, perturbation
//! stability, gradient lower bounds and semi-smoothness. A Monte-Carlo suite
//! checks the supporting concentration inequalities.
//!
//! Runnable entry points live in `examples/`:
//!
//! ```text
//! cargo run --release --example gradient_check
//! cargo run --release --example train_gd
//! cargo run --release --example init_probes
//! cargo run --release --example stability_sweep
//! cargo run --release --example landscape
//! cargo run --release --example concentration
//! cargo run --release --example sweep
//! ```

pub mod data;
pub mod error;
pub mod mc;
pub mod numerics;
pub mod probes;
pub mod rnn;
pub mod runner;
pub mod training;

pub use error::{Error, Result};
