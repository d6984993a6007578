//! Sequence datasets with separated, normalized first tokens.
//!
//! First tokens live on the sphere of radius one with the last coordinate
//! pinned to `1/sqrt(2)`, so their pairwise distances come only from the
//! leading `d_x - 1` coordinates. Later tokens are drawn from the unit ball.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_vec, norm, sub, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub d_x: usize,
    pub d: usize,
}

/// `tokens[i][l-1]` is `x_{i,l}`; `labels[i][l-2]` is `y*_{i,l}` for `l >= 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dims: DataDims,
    pub delta: f64,
    #[serde(serialize_with = "ser_nested3", deserialize_with = "de_nested3")]
    pub tokens: Vec<Vec<Vec<f64>>>,
    #[serde(serialize_with = "ser_nested3", deserialize_with = "de_nested3")]
    pub labels: Vec<Vec<Vec<f64>>>,
}

// Numbers are written with 17 significant digits so a JSON round trip is exact.
fn ser_nested3<S: Serializer>(v: &[Vec<Vec<f64>>], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::Error as _;
    let conv: std::result::Result<Vec<Vec<Vec<serde_json::Number>>>, _> = v
        .iter()
        .map(|a| {
            a.iter()
                .map(|b| {
                    b.iter()
                        .map(|x| exact_number(*x))
                        .collect::<std::result::Result<Vec<_>, _>>()
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect();
    conv.map_err(S::Error::custom)?.serialize(s)
}

fn de_nested3<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<Vec<Vec<Vec<f64>>>, D::Error> {
    Vec::<Vec<Vec<f64>>>::deserialize(d)
}

fn exact_number(x: f64) -> std::result::Result<serde_json::Number, String> {
    if !x.is_finite() {
        return Err(format!("non-finite value {x}"));
    }
    format!("{x:.16e}")
        .parse::<serde_json::Number>()
        .map_err(|e| e.to_string())
}

impl Dataset {
    pub fn token(&self, i: usize, l: usize) -> &[f64] {
        &self.tokens[i][l - 1]
    }

    /// Label for layer `l >= 2`.
    pub fn label(&self, i: usize, l: usize) -> &[f64] {
        &self.labels[i][l - 2]
    }

    pub fn with_labels(&self, labels: Vec<Vec<Vec<f64>>>) -> Result<Dataset> {
        let ok = labels.len() == self.dims.n
            && labels
                .iter()
                .all(|li| li.len() == self.dims.l - 1 && li.iter().all(|y| y.len() == self.dims.d));
        if !ok {
            return Err(Error::Shape("labels must be n x (L-1) x d".into()));
        }
        Ok(Dataset {
            labels,
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Dataset> {
        let ds: Dataset = serde_json::from_str(s)?;
        ds.check_shapes()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let DataDims { n, l, d_x, d } = self.dims;
        let tok_ok = self.tokens.len() == n
            && self
                .tokens
                .iter()
                .all(|s| s.len() == l && s.iter().all(|x| x.len() == d_x));
        let lab_ok = self.labels.len() == n
            && self
                .labels
                .iter()
                .all(|s| s.len() + 1 == l && s.iter().all(|y| y.len() == d));
        if !(tok_ok && lab_ok) || l < 1 {
            return Err(Error::Shape("dataset arrays do not match dims".into()));
        }
        Ok(())
    }
}

fn unit_ball_point<R: Rng>(g: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let dir = gaussian_vec(g, dim, 1.0);
    let dn = norm(&dir);
    let r = radius * g.random::<f64>().powf(1.0 / dim as f64);
    if dn == 0.0 {
        return vec![0.0; dim];
    }
    dir.iter().map(|v| v * r / dn).collect()
}

/// Tokens only; labels are left empty.
pub fn generate_inputs(
    n: usize,
    l: usize,
    d_x: usize,
    delta: f64,
    rng: &SeededRng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if d_x < 3 {
        return Err(Error::Invalid("d_x must be at least 3".into()));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Invalid("delta must lie in [0, 1]".into()));
    }
    if l < 1 {
        return Err(Error::Invalid("L must be at least 1".into()));
    }
    let mut g = rng.split("first-tokens").generator();
    let max_attempts = 10_000 * n.max(1);
    let mut firsts: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while firsts.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Infeasible(format!(
                "could not place {n} first tokens at separation {delta} in dimension {d_x}"
            )));
        }
        let dir = gaussian_vec(&mut g, d_x - 1, 1.0);
        let dn = norm(&dir);
        if dn == 0.0 {
            continue;
        }
        let mut x: Vec<f64> = dir.iter().map(|v| v / dn * FRAC_1_SQRT_2).collect();
        x.push(FRAC_1_SQRT_2);
        if firsts.iter().all(|y| norm(&sub(&x, y)) >= delta) {
            firsts.push(x);
        }
    }
    let mut g = rng.split("later-tokens").generator();
    Ok(firsts
        .into_iter()
        .map(|x1| {
            let mut seq = vec![x1];
            for _ in 1..l {
                seq.push(unit_ball_point(&mut g, d_x, 1.0));
            }
            seq
        })
        .collect())
}

pub fn generate_labels(
    n: usize,
    l: usize,
    d: usize,
    scale: f64,
    rng: &SeededRng,
) -> Vec<Vec<Vec<f64>>> {
    let mut g = rng.split("labels").generator();
    (0..n)
        .map(|_| (2..=l).map(|_| unit_ball_point(&mut g, d, scale)).collect())
        .collect()
}

/// Inputs plus labels of the given scale.
pub fn generate_dataset(
    dims: DataDims,
    delta: f64,
    label_scale: f64,
    rng: &SeededRng,
) -> Result<Dataset> {
    let tokens = generate_inputs(dims.n, dims.l, dims.d_x, delta, rng)?;
    let labels = generate_labels(dims.n, dims.l, dims.d, label_scale, rng);
    Ok(Dataset {
        dims,
        delta,
        tokens,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub min_pairwise_distance: f64,
    pub min_token_norm: f64,
    pub max_token_norm: f64,
    pub max_first_norm_residual: f64,
    pub max_last_coord_residual: f64,
    pub violations: Vec<String>,
}

impl SeparabilityReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn verify_separability(ds: &Dataset) -> SeparabilityReport {
    let n = ds.tokens.len();
    let mut min_dist = f64::INFINITY;
    let mut violations = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let dist = norm(&sub(ds.token(i, 1), ds.token(j, 1)));
            min_dist = min_dist.min(dist);
            if dist < ds.delta {
                violations.push(format!(
                    "first tokens {i},{j} at distance {dist} < {}",
                    ds.delta
                ));
            }
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let (mut r_norm, mut r_last) = (0.0f64, 0.0f64);
    for (i, seq) in ds.tokens.iter().enumerate() {
        for (li, x) in seq.iter().enumerate() {
            let nx = norm(x);
            lo = lo.min(nx);
            hi = hi.max(nx);
            if nx > 1.0 + 1e-12 {
                violations.push(format!("token ({i},{}) has norm {nx} > 1", li + 1));
            }
        }
        if let Some(x1) = seq.first() {
            let rn = (norm(x1) - 1.0).abs();
            let rl = x1
                .last()
                .map_or(f64::INFINITY, |v| (v - FRAC_1_SQRT_2).abs());
            r_norm = r_norm.max(rn);
            r_last = r_last.max(rl);
            if rn > 1e-12 {
                violations.push(format!("first token of sample {i} has norm residual {rn}"));
            }
            if rl > 1e-12 {
                violations.push(format!(
                    "first token of sample {i} has last-coordinate residual {rl}"
                ));
            }
        }
    }
    SeparabilityReport {
        min_pairwise_distance: min_dist,
        min_token_norm: lo,
        max_token_norm: hi,
        max_first_norm_residual: r_norm,
        max_last_coord_residual: r_last,
        violations,
    }
}
