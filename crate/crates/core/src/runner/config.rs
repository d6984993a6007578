use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataDims;
use crate::error::{Error, Result};
use crate::training::Method;

/// Every probe a cell can run.
pub const PROBE_NAMES: &[&str] = &[
    "forward_norm",
    "fresh_randomness",
    "separability",
    "intermediate_spectral",
    "sparse_spectral",
    "backward_sparse",
    "forward_stability",
    "backward_stability",
    "rank_one",
    "pl_ratio",
    "gradient_upper",
    "fake_gradient",
    "semi_smoothness",
    "decomposition_identity",
    "indicator_coordinate",
    "backward_coordinate",
    "train",
];

pub const INIT_PROBES: &[&str] = &[
    "forward_norm",
    "fresh_randomness",
    "separability",
    "intermediate_spectral",
    "sparse_spectral",
    "backward_sparse",
];
pub const STABILITY_PROBES: &[&str] = &["forward_stability", "backward_stability", "rank_one"];
pub const LANDSCAPE_PROBES: &[&str] = &[
    "pl_ratio",
    "gradient_upper",
    "fake_gradient",
    "semi_smoothness",
    "decomposition_identity",
    "indicator_coordinate",
    "backward_coordinate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub method: Method,
    /// Explicit step size. Takes precedence over `calib`.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Multiplier of the default step size. Tuned per cell when both are absent.
    #[serde(default)]
    pub calib: Option<f64>,
    pub max_steps: usize,
    pub target_eps: f64,
    #[serde(default = "one")]
    pub batch_size: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Fraction of cells a probe must pass in to get a passing verdict.
    #[serde(default = "default_pass_fraction")]
    pub pass_fraction: f64,
    /// Floor for the orthogonal-component norms.
    #[serde(default = "default_fresh_floor")]
    pub fresh_floor: f64,
    /// Quantiles of `|g| sqrt(m)` used for the indicator-coordinate count.
    #[serde(default = "default_small_q")]
    pub indicator_small_quantile: f64,
    #[serde(default = "default_large_q")]
    pub indicator_large_quantile: f64,
}

fn default_pass_fraction() -> f64 {
    0.95
}
fn default_fresh_floor() -> f64 {
    1e-6
}
fn default_small_q() -> f64 {
    0.10
}
fn default_large_q() -> f64 {
    0.50
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            pass_fraction: default_pass_fraction(),
            fresh_floor: default_fresh_floor(),
            indicator_small_quantile: default_small_q(),
            indicator_large_quantile: default_large_q(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: DataDims,
    pub m_grid: Vec<usize>,
    pub delta: f64,
    #[serde(default = "unit")]
    pub label_scale: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub probes: Vec<String>,
    #[serde(default)]
    pub train: Option<TrainSettings>,
    #[serde(default = "unit")]
    pub tau0: f64,
    #[serde(default = "default_rank_one_support")]
    pub rank_one_support: usize,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_mc_trials")]
    pub mc_trials: u64,
}

fn unit() -> f64 {
    1.0
}
fn default_rank_one_support() -> usize {
    16
}
fn default_mc_trials() -> u64 {
    100_000
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let DataDims { n, l, d_x, d } = self.dims;
        if n == 0 || l < 2 || d_x < 2 || d == 0 {
            return bad(format!(
                "dims need n >= 1, L >= 2, d_x >= 2, d >= 1; got {:?}",
                self.dims
            ));
        }
        if self.m_grid.is_empty()
            || self.m_grid.windows(2).any(|w| w[0] >= w[1])
            || self.m_grid[0] == 0
        {
            return bad("m_grid must be nonempty, positive and strictly increasing".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.tau0 >= 0.0 && self.tau0.is_finite())
            || !(self.label_scale >= 0.0 && self.label_scale.is_finite())
        {
            return bad("tau0 and label_scale must be finite and nonnegative".into());
        }
        if let Some(p) = self
            .probes
            .iter()
            .find(|p| !PROBE_NAMES.contains(&p.as_str()))
        {
            return bad(format!("unknown probe '{p}'"));
        }
        if self.probes.iter().any(|p| p == "train") && self.train.is_none() {
            return bad("probe 'train' needs a train section".into());
        }
        if let Some(t) = &self.train {
            if t.batch_size == 0 || t.batch_size > n || !(t.target_eps > 0.0) || t.max_steps == 0 {
                return bad(
                    "train needs 1 <= batch_size <= n, target_eps > 0, max_steps >= 1".into(),
                );
            }
            if t.eta.is_some_and(|e| !(e > 0.0 && e.is_finite()))
                || t.calib.is_some_and(|c| !(c > 0.0 && c.is_finite()))
            {
                return bad("eta and calib must be positive".into());
            }
        }
        let th = &self.thresholds;
        let q_ok = |q: f64| (0.0..=1.0).contains(&q);
        if !q_ok(th.pass_fraction)
            || !q_ok(th.indicator_small_quantile)
            || !q_ok(th.indicator_large_quantile)
        {
            return bad("fractions and quantiles must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses `a,b,c`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("cannot parse '{t}' in list '{s}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> &'static str {
        r#"{"dims":{"n":2,"L":3,"d_x":4,"d":2},"m_grid":[32,64],"delta":0.5,"seeds":[0,1],"probes":["forward_norm"]}"#
    }

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json(sample()).unwrap();
        assert_eq!(c.tau0, 1.0);
        assert_eq!(c.thresholds, Thresholds::default());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            sample().replace("[32,64]", "[64,32]"),
            sample().replace("[0,1]", "[]"),
            sample().replace("forward_norm", "nope"),
            sample().replace("\"delta\":0.5", "\"delta\":0.0"),
            sample().replace("\"probes\"", "\"extra\":1,\"probes\""),
            sample().replace("forward_norm", "train"),
        ] {
            assert!(
                matches!(ExperimentConfig::from_json(&bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::from_json(sample()).unwrap();
        let mut b = a.clone();
        b.seeds.push(7);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(
            a.hash(),
            ExperimentConfig::from_json(&a.to_json()).unwrap().hash()
        );
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<u64>("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_list::<u64>("1,x").is_err());
    }
}
