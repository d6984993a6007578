//! Probes that measure network quantities and compare them with bounds.

pub mod init;
pub mod landscape;
pub mod report;
pub mod stability;

use serde::{Deserialize, Serialize};

use crate::rnn::Dims;

/// `rho = n L d ln m` and `varrho = n L d ln(m / eps) / delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryScales {
    pub rho: f64,
    pub varrho: f64,
}

impl TheoryScales {
    pub fn new(dims: Dims, delta: f64, eps: f64) -> Self {
        let base = (dims.n * dims.l * dims.d) as f64;
        let m = dims.m as f64;
        Self {
            rho: base * m.ln(),
            varrho: base * (m / eps).ln() / delta,
        }
    }
}
