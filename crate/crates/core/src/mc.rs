//! Monte-Carlo checks of Gaussian concentration inequalities and the
//! randomness decompositions used to argue about perturbed weights.
//!
//! Every check compares an empirical frequency with a closed-form bound and
//! allows `bound_slack` standard errors of Monte-Carlo noise. Trials run in
//! fixed-size chunks, each with its own RNG stream, and chunk counts are
//! summed in order, so results do not depend on the thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_vec, norm, Matrix, SeededRng};

const CHUNK: u64 = 2048;
/// Fewer trials than this give an `inconclusive` verdict.
pub const MIN_TRIALS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub trials: u64,
    pub seed: u64,
    pub bound_slack: f64,
}

impl McConfig {
    pub fn new(trials: u64, seed: u64) -> Self {
        Self {
            trials,
            seed,
            bound_slack: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub lemma: String,
    pub trials: u64,
    pub empirical: f64,
    pub bound: f64,
    /// `bound_slack` times the standard error of `empirical`.
    pub slack: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    /// empirical should not exceed the bound
    Upper,
    /// empirical should not fall below the bound
    Lower,
}

impl McReport {
    fn frequency(lemma: &str, cfg: &McConfig, hits: u64, bound: f64, side: Side) -> Self {
        let p = hits as f64 / cfg.trials.max(1) as f64;
        let se = (p * (1.0 - p) / cfg.trials.max(1) as f64).sqrt();
        Self::with_se(lemma, cfg, p, se, bound, side)
    }

    fn with_se(
        lemma: &str,
        cfg: &McConfig,
        empirical: f64,
        se: f64,
        bound: f64,
        side: Side,
    ) -> Self {
        let slack = cfg.bound_slack * se;
        let ok = match side {
            Side::Upper => empirical <= bound + slack,
            Side::Lower => empirical >= bound - slack,
        };
        let verdict = if cfg.trials < MIN_TRIALS {
            Verdict::Inconclusive
        } else if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            lemma: lemma.to_string(),
            trials: cfg.trials,
            empirical,
            bound,
            slack,
            verdict,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

pub fn write_reports_csv<W: std::io::Write>(reports: &[McReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `trials` Bernoulli trials in chunked streams and counts successes.
fn count_events<F>(cfg: &McConfig, label: &str, event: F) -> u64
where
    F: Fn(&mut ChaCha8Rng) -> bool + Sync,
{
    let root = SeededRng::new(cfg.seed).split(label);
    let chunks = cfg.trials.div_ceil(CHUNK);
    let counts: Vec<u64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut g = root.split_index(c).generator();
            let len = CHUNK.min(cfg.trials - c * CHUNK);
            (0..len).filter(|_| event(&mut g)).count() as u64
        })
        .collect();
    counts.iter().sum()
}

/// Like [`count_events`] but collects one real value per trial, in order.
fn sample_values<F>(cfg: &McConfig, label: &str, draw: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let root = SeededRng::new(cfg.seed).split(label);
    let chunks = cfg.trials.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut g = root.split_index(c).generator();
            let len = CHUNK.min(cfg.trials - c * CHUNK);
            (0..len).map(|_| draw(&mut g)).collect()
        })
        .collect();
    parts.concat()
}

fn normal(g: &mut ChaCha8Rng) -> f64 {
    g.sample(StandardNormal)
}

fn chi_square(g: &mut ChaCha8Rng, k: usize) -> f64 {
    (0..k).map(|_| normal(g).powi(2)).sum()
}

/// Upper and lower chi-square tails `Pr[X - k >= 2 sqrt(kt) + 2t]` and
/// `Pr[k - X >= 2 sqrt(kt)]`, each against `exp(-t)`.
pub fn chi_square_tail_mc(k: usize, t: f64, cfg: &McConfig) -> Result<[McReport; 2]> {
    if k == 0 || !(t > 0.0) {
        return Err(Error::Invalid(
            "chi-square tail needs k >= 1 and t > 0".into(),
        ));
    }
    let kf = k as f64;
    let bound = (-t).exp();
    let hi = kf + 2.0 * (kf * t).sqrt() + 2.0 * t;
    let lo = kf - 2.0 * (kf * t).sqrt();
    let xs = sample_values(cfg, "chi-square", |g| chi_square(g, k));
    let up = xs.iter().filter(|x| **x >= hi).count() as u64;
    let down = xs.iter().filter(|x| **x <= lo).count() as u64;
    Ok([
        McReport::frequency("chi-square-upper-tail", cfg, up, bound, Side::Upper),
        McReport::frequency("chi-square-lower-tail", cfg, down, bound, Side::Upper),
    ])
}

/// `Pr[| ||x||^2 - n sigma^2 | >= n sigma^2 / b] <= 2 exp(-n / (8 b^2))`.
pub fn sum_of_squares_mc(n: usize, sigma: f64, b: f64, cfg: &McConfig) -> Result<McReport> {
    if n == 0 || b < 1.0 || !(sigma > 0.0) {
        return Err(Error::Invalid(
            "sum of squares needs n >= 1, b >= 1, sigma > 0".into(),
        ));
    }
    let nf = n as f64;
    let s2 = sigma * sigma;
    let hits = count_events(cfg, "sum-of-squares", |g| {
        (chi_square(g, n) * s2 - nf * s2).abs() >= nf * s2 / b
    });
    Ok(McReport::frequency(
        "sum-of-squares-deviation",
        cfg,
        hits,
        2.0 * (-nf / (8.0 * b * b)).exp(),
        Side::Upper,
    ))
}

/// Exceedance frequency of `sum_i max(x_i^2 - ln m, 0) >= 2 sqrt(m)`.
pub fn truncated_square_sum_frequency(m: usize, std: f64, cfg: &McConfig) -> f64 {
    let lm = (m as f64).ln();
    let thr = 2.0 * (m as f64).sqrt();
    let hits = count_events(cfg, &format!("truncated-square-{m}"), |g| {
        let s: f64 = (0..m)
            .map(|_| ((std * normal(g)).powi(2) - lm).max(0.0))
            .sum();
        s >= thr
    });
    hits as f64 / cfg.trials as f64
}

/// Truncated square sums over an increasing grid of `m`. The bound has no
/// explicit constant, so each grid point is checked against the frequency at
/// the previous (smaller) `m`: the exceedance rate must not increase.
pub fn truncated_square_sum_mc(m_grid: &[usize], cfg: &McConfig) -> Result<Vec<McReport>> {
    if m_grid.iter().any(|m| *m < 16) || m_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(
            "m grid must be increasing with m >= 16".into(),
        ));
    }
    let mut out = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for &m in m_grid {
        let p = truncated_square_sum_frequency(m, 1.0, cfg);
        let se = (p * (1.0 - p) / cfg.trials as f64).sqrt();
        let (bound, bse) = prev.unwrap_or((1.0, 0.0));
        out.push(McReport::with_se(
            &format!("truncated-square-sum-m{m}"),
            cfg,
            p,
            (se * se + bse * bse).sqrt(),
            bound,
            Side::Upper,
        ));
        prev = Some((p, se));
    }
    Ok(out)
}

/// `Pr[ ||relu(x)|| outside (1 +- eps) sqrt(n/2) sigma ] <= 2 exp(-eps^2 n / 100)`.
pub fn relu_gaussian_norm_mc(n: usize, sigma: f64, eps: f64, cfg: &McConfig) -> Result<McReport> {
    if n == 0 || !(eps > 0.0 && eps < 1.0) || !(sigma > 0.0) {
        return Err(Error::Invalid(
            "relu norm check needs n >= 1, eps in (0,1), sigma > 0".into(),
        ));
    }
    let c = (n as f64 / 2.0).sqrt() * sigma;
    let hits = count_events(cfg, "relu-norm", |g| {
        let s: f64 = (0..n).map(|_| (sigma * normal(g)).max(0.0).powi(2)).sum();
        let v = s.sqrt();
        v <= (1.0 - eps) * c || v >= (1.0 + eps) * c
    });
    let bound = 2.0 * (-eps * eps * n as f64 / 100.0).exp();
    Ok(McReport::frequency(
        "relu-gaussian-norm",
        cfg,
        hits,
        bound.min(1.0),
        Side::Upper,
    ))
}

/// Same check for `||relu(A x)||` with a fresh `A` (entries `N(0, 2 sigma^2 / m)`)
/// per trial and a fixed `x`, against the band `(1 +- eps) ||x|| sigma`.
pub fn relu_matrix_norm_mc(
    m: usize,
    x: &[f64],
    sigma: f64,
    eps: f64,
    cfg: &McConfig,
) -> Result<McReport> {
    if m == 0 || x.is_empty() || !(eps > 0.0 && eps < 1.0) || !(sigma > 0.0) {
        return Err(Error::Invalid(
            "relu matrix check needs m >= 1, nonempty x, eps in (0,1)".into(),
        ));
    }
    let c = norm(x) * sigma;
    let std = (2.0 * sigma * sigma / m as f64).sqrt();
    let hits = count_events(cfg, "relu-matrix-norm", |g| {
        let mut s = 0.0;
        for _ in 0..m {
            let row: f64 = x.iter().map(|xi| xi * std * normal(g)).sum();
            s += row.max(0.0).powi(2);
        }
        let v = s.sqrt();
        v <= (1.0 - eps) * c || v >= (1.0 + eps) * c
    });
    let bound = 2.0 * (-eps * eps * m as f64 / 100.0).exp();
    Ok(McReport::frequency(
        "relu-matrix-norm",
        cfg,
        hits,
        bound.min(1.0),
        Side::Upper,
    ))
}

/// `[1/2 (1 - 4t/5), 1/2 (1 - 2t/3)]` for `t` in units of `sigma`.
pub fn gaussian_percentile_interval(t_over_sigma: f64) -> (f64, f64) {
    (
        0.5 * (1.0 - 0.8 * t_over_sigma),
        0.5 * (1.0 - 2.0 * t_over_sigma / 3.0),
    )
}

/// Checks `Pr[x >= t]` against both interval ends.
pub fn gaussian_percentile_check(t_over_sigma: f64, cfg: &McConfig) -> Result<[McReport; 2]> {
    if !(t_over_sigma > 0.0 && t_over_sigma <= 1.0) {
        return Err(Error::Invalid("t / sigma must lie in (0, 1]".into()));
    }
    let (lo, hi) = gaussian_percentile_interval(t_over_sigma);
    let hits = count_events(cfg, "percentile", |g| normal(g) >= t_over_sigma);
    Ok([
        McReport::frequency("gaussian-percentile-lower", cfg, hits, lo, Side::Lower),
        McReport::frequency("gaussian-percentile-upper", cfg, hits, hi, Side::Upper),
    ])
}

/// At least `(1 - alpha)/2` of the coordinates are `>= alpha sigma` and at
/// least as many are `<= -alpha sigma`.
pub fn alpha_sigma_good_test(w: &[f64], alpha: f64, sigma: f64) -> bool {
    if w.is_empty() {
        return false;
    }
    let need = 0.5 * (1.0 - alpha) * w.len() as f64;
    let thr = alpha * sigma;
    let pos = w.iter().filter(|v| **v >= thr).count() as f64;
    let neg = w.iter().filter(|v| **v <= -thr).count() as f64;
    pos >= need && neg >= need
}

/// Failure frequency of `x ~ N(0, sigma^2 I_m)` being `(alpha, sigma/4)`-good,
/// against `exp(-alpha^2 m / 100)`.
pub fn gaussian_good_mc(m: usize, alpha: f64, sigma: f64, cfg: &McConfig) -> Result<McReport> {
    if !(alpha > 0.0 && alpha < 0.5) || m == 0 {
        return Err(Error::Invalid("alpha must lie in (0, 1/2)".into()));
    }
    let fails = count_events(cfg, "alpha-sigma-good", |g| {
        let x = gaussian_vec(g, m, sigma);
        !alpha_sigma_good_test(&x, alpha, sigma / 4.0)
    });
    let bound = (-alpha * alpha * m as f64 / 100.0).exp();
    Ok(McReport::frequency(
        "gaussian-alpha-sigma-good",
        cfg,
        fails,
        bound,
        Side::Upper,
    ))
}

/// `y2 = clamp(y, -beta, beta)` and `y1 = y - y2`.
pub fn heavy_light_decompose(y: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(beta > 0.0) {
        return Err(Error::Invalid("beta must be positive".into()));
    }
    let y2: Vec<f64> = y.iter().map(|v| v.clamp(-beta, beta)).collect();
    let y1 = y.iter().zip(&y2).map(|(a, b)| a - b).collect();
    Ok((y1, y2))
}

/// Draws `y = W x` for Gaussian `W` (`m x n`, entries `N(0, 2/m)`) and unit
/// `x`, splits at `beta = ln m / sqrt(m)` and counts violations of
/// `||y1|| <= sqrt(s) ln^2 m / sqrt(m)`.
pub fn heavy_light_mc(m: usize, n: usize, s: usize, cfg: &McConfig) -> Result<McReport> {
    if m < 2 || n == 0 || s < 1 {
        return Err(Error::Invalid(
            "heavy/light check needs m >= 2, n >= 1, s >= 1".into(),
        ));
    }
    let lm = (m as f64).ln();
    let beta = lm / (m as f64).sqrt();
    let cap = (s as f64).sqrt() * lm * lm / (m as f64).sqrt();
    let std = (2.0 / m as f64).sqrt();
    let hits = count_events(cfg, "heavy-light", |g| {
        let x = gaussian_vec(g, n, 1.0);
        let nx = norm(&x);
        let y: Vec<f64> = (0..m)
            .map(|_| x.iter().map(|xi| xi / nx * std * normal(g)).sum())
            .collect();
        let (y1, _) = heavy_light_decompose(&y, beta).expect("beta > 0");
        norm(&y1) > cap
    });
    Ok(McReport::frequency(
        "heavy-light-split",
        cfg,
        hits,
        0.0,
        Side::Upper,
    ))
}

/// Built-in bounded-difference test functions.
#[derive(Clone, Debug, PartialEq)]
pub enum McDiarmidFunction {
    /// Mean of `n` fair `+-1` signs; `c_i = 2/n`.
    SignMean { n: usize },
    /// `clamp(sum_k a_k w_k / n, -1, 1)` with fixed weights `|a_k| <= 1`
    /// and `w_k` uniform on `[-1, 1]`; `c_k = 2 |a_k| / n`.
    ClippedProjection { weights: Vec<f64> },
    /// Constant zero.
    Constant { n: usize },
}

impl McDiarmidFunction {
    fn constants(&self) -> Vec<f64> {
        match self {
            Self::SignMean { n } => vec![2.0 / *n as f64; *n],
            Self::ClippedProjection { weights } => weights
                .iter()
                .map(|a| 2.0 * a.abs() / weights.len() as f64)
                .collect(),
            Self::Constant { n } => vec![0.0; *n],
        }
    }

    fn mean(&self) -> f64 {
        0.0
    }

    fn sample(&self, g: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::SignMean { n } => {
                (0..*n)
                    .map(|_| if g.random::<bool>() { 1.0 } else { -1.0 })
                    .sum::<f64>()
                    / *n as f64
            }
            Self::ClippedProjection { weights } => {
                let s: f64 = weights.iter().map(|a| a * g.random_range(-1.0..=1.0)).sum();
                (s / weights.len() as f64).clamp(-1.0, 1.0)
            }
            Self::Constant { .. } => 0.0,
        }
    }
}

/// `Pr[f - E f >= t] <= exp(-2 t^2 / sum c_i^2)`.
pub fn mcdiarmid_mc(function: &McDiarmidFunction, t: f64, cfg: &McConfig) -> Result<McReport> {
    if !(t > 0.0) {
        return Err(Error::Invalid("deviation t must be positive".into()));
    }
    let c2: f64 = function.constants().iter().map(|c| c * c).sum();
    let bound = if c2 == 0.0 {
        0.0
    } else {
        (-2.0 * t * t / c2).exp()
    };
    let mu = function.mean();
    let hits = count_events(cfg, "mcdiarmid", |g| function.sample(g) - mu >= t);
    Ok(McReport::frequency(
        "bounded-differences",
        cfg,
        hits,
        bound,
        Side::Upper,
    ))
}

/// `f = mean of n uniforms on [0, 1]`, except that with probability `p`
/// (a rare first coordinate) the value collapses to 0.
fn rare_jump_mean(g: &mut ChaCha8Rng, n: usize, p: f64) -> f64 {
    let trigger = g.random::<f64>() < p;
    let s: f64 = (0..n).map(|_| g.random::<f64>()).sum();
    if trigger {
        0.0
    } else {
        s / n as f64
    }
}

/// Extended bounded-differences check on the rare-jump mean with `mu = (1-p)/2`,
/// `c = 1/n`. The unexposed constant `C` in the floor
/// `1 - n^2 sqrt(p) - exp(-C mu^2 / (n (c^2 + p)))` is calibrated on the
/// `p = 0` function, then the floor is evaluated for the given `p`.
pub fn mcdiarmid_extension_mc(n: usize, p: f64, cfg: &McConfig) -> Result<(McReport, f64)> {
    if n < 2 || !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid("need n >= 2 and p in [0, 1)".into()));
    }
    let c = 1.0 / n as f64;
    let nf = n as f64;
    let mu0 = 0.5;
    let cal_hits = count_events(cfg, "mcdiarmid-ext-cal", |g| {
        rare_jump_mean(g, n, 0.0) >= mu0 / 2.0
    });
    let miss = (1.0 - cal_hits as f64 / cfg.trials as f64).max(1.0 / cfg.trials as f64);
    let x0 = mu0 * mu0 / (nf * c * c);
    let c_fit = -miss.ln() / x0;
    let mu = mu0 * (1.0 - p);
    let floor = 1.0 - nf * nf * p.sqrt() - (-c_fit * mu * mu / (nf * (c * c + p))).exp();
    let hits = count_events(cfg, "mcdiarmid-ext", |g| {
        rare_jump_mean(g, n, p) >= mu / 2.0
    });
    Ok((
        McReport::frequency(
            "bounded-differences-extension",
            cfg,
            hits,
            floor,
            Side::Lower,
        ),
        c_fit,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult {
    pub w2: Matrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl DecompositionResult {
    /// `W2 + u v^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut w = self.w2.clone();
        w.add_outer_sum(1.0, &[self.u.as_slice()], &[self.v.as_slice()]);
        w
    }
}

/// Splits `W = W2 + u v^T` so that `W2 v = g1` is a fresh `N(0, 2/m)` vector
/// and `u = theta g2 - (1 - sqrt(1 - theta^2)) g1`, where `(g1, g2)` are
/// independent and `W v = sqrt(1 - theta^2) g1 + theta g2`.
pub fn randomness_decompose(
    w: &Matrix,
    v: &[f64],
    theta: f64,
    rng: &SeededRng,
) -> Result<DecompositionResult> {
    let m = w.rows();
    if w.cols() != v.len() {
        return Err(Error::Shape("v must have W.cols entries".into()));
    }
    if (norm(v) - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid("v must be a unit vector".into()));
    }
    if !(theta > 0.0 && theta <= 0.5) {
        return Err(Error::Invalid("theta must lie in (0, 1/2]".into()));
    }
    let g = w.matvec(v);
    let c = (1.0 - theta * theta).sqrt();
    let xi = gaussian_vec(&mut rng.generator(), m, (2.0 / m as f64).sqrt());
    let g2: Vec<f64> = g.iter().zip(&xi).map(|(a, b)| theta * a + c * b).collect();
    let g1: Vec<f64> = g.iter().zip(&xi).map(|(a, b)| c * a - theta * b).collect();
    let u: Vec<f64> = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| theta * b - (1.0 - c) * a)
        .collect();
    let mut w2 = w.clone();
    w2.add_outer_sum(-1.0, &[u.as_slice()], &[v]);
    Ok(DecompositionResult {
        w2,
        u,
        v: v.to_vec(),
        theta,
        g1,
        g2,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateSplit {
    /// `W2 + W'_{-N}`.
    pub w1: Matrix,
    pub w_prime_n: Matrix,
    pub w_prime_rest: Matrix,
}

/// Splits `u v^T` by the support `n` of `u`.
pub fn coordinate_split(result: &DecompositionResult, n: &[usize]) -> Result<CoordinateSplit> {
    let m = result.u.len();
    if n.iter().any(|k| *k >= m) {
        return Err(Error::Index("coordinate set exceeds [m]".into()));
    }
    let mut in_n = vec![false; m];
    for &k in n {
        in_n[k] = true;
    }
    let u_n: Vec<f64> = (0..m)
        .map(|k| if in_n[k] { result.u[k] } else { 0.0 })
        .collect();
    let u_rest: Vec<f64> = (0..m)
        .map(|k| if in_n[k] { 0.0 } else { result.u[k] })
        .collect();
    let outer = |u: &[f64]| {
        let mut w = Matrix::zeros(m, result.v.len());
        w.add_outer_sum(1.0, &[u], &[result.v.as_slice()]);
        w
    };
    let w_prime_n = outer(&u_n);
    let w_prime_rest = outer(&u_rest);
    let w1 = result.w2.add(&w_prime_rest);
    Ok(CoordinateSplit {
        w1,
        w_prime_n,
        w_prime_rest,
    })
}

/// `W0 = W - u_k e_k v^T` for a single coordinate `k`.
pub fn single_coordinate_base(
    w: &Matrix,
    result: &DecompositionResult,
    k: usize,
) -> Result<(Matrix, Matrix)> {
    if k >= result.u.len() {
        return Err(Error::Index(format!("coordinate {k}")));
    }
    let mut e = vec![0.0; result.u.len()];
    e[k] = result.u[k];
    let mut wk = Matrix::zeros(w.rows(), w.cols());
    wk.add_outer_sum(1.0, &[e.as_slice()], &[result.v.as_slice()]);
    Ok((w.sub(&wk), wk))
}

/// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a KS statistic `d` with `n` samples, with the
/// small-sample correction `(sqrt(n) + 0.12 + 0.11/sqrt(n)) d`.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut q = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term =
            2.0 * (if k % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * kf * kf * lambda * lambda).exp();
        q += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    q.clamp(0.0, 1.0)
}

/// Per-batch results of the distribution checks on `randomness_decompose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeStats {
    pub batches: usize,
    pub ks_pass_fraction: f64,
    pub positive_fraction: f64,
    pub negative_fraction: f64,
    pub max_reconstruction_error: f64,
    pub u_inf_violations: usize,
}

/// For each batch: fresh `W` (`N(0, 2/m)`), random unit `v`, decompose, and
/// KS-test `W2 v` against `N(0, 2/m)` at level `alpha`. Also pools the sign
/// frequencies `Pr[u_k > theta/(2 sqrt m)]`, `Pr[u_k < -theta/(2 sqrt m)]`
/// and counts `||u||_inf > 3 theta rho / (2 sqrt m)`.
pub fn decompose_distribution_check(
    m: usize,
    theta: f64,
    rho: f64,
    batches: usize,
    alpha: f64,
    seed: u64,
) -> Result<DecomposeStats> {
    let root = SeededRng::new(seed).split("decompose-check");
    let sd = (2.0 / m as f64).sqrt();
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Invalid(e.to_string()))?;
    let thr = theta / (2.0 * (m as f64).sqrt());
    let cap = 3.0 * theta * rho / (2.0 * (m as f64).sqrt());
    let per: Vec<Result<(bool, usize, usize, f64, bool)>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let r = root.split_index(b as u64);
            let w = crate::numerics::gaussian_matrix(m, m, 2.0 / m as f64, &r.split("W"));
            let mut g = r.split("v").generator();
            let v = gaussian_vec(&mut g, m, 1.0);
            let nv = norm(&v);
            let v: Vec<f64> = v.iter().map(|x| x / nv).collect();
            let res = randomness_decompose(&w, &v, theta, &r.split("coupling"))?;
            let w2v = res.w2.matvec(&res.v);
            let d = ks_statistic(&w2v, |x| normal.cdf(x));
            let pos = res.u.iter().filter(|x| **x > thr).count();
            let neg = res.u.iter().filter(|x| **x < -thr).count();
            let err = res.reconstruct().sub(&w).max_abs();
            let uinf = res.u.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            Ok((ks_pvalue(d, m) >= alpha, pos, neg, err, uinf > cap))
        })
        .collect();
    let per: Vec<_> = per.into_iter().collect::<Result<_>>()?;
    let total = (batches * m) as f64;
    Ok(DecomposeStats {
        batches,
        ks_pass_fraction: per.iter().filter(|p| p.0).count() as f64 / batches as f64,
        positive_fraction: per.iter().map(|p| p.1).sum::<usize>() as f64 / total,
        negative_fraction: per.iter().map(|p| p.2).sum::<usize>() as f64 / total,
        max_reconstruction_error: per.iter().map(|p| p.3).fold(0.0, f64::max),
        u_inf_violations: per.iter().filter(|p| p.4).count(),
    })
}
