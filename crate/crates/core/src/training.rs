//! Full-batch and minibatch gradient descent on `W` with per-step logging.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{axpy, Matrix, SeededRng};
use crate::rnn::{forward, gradient_factors, Dims, GradFactors, NetworkParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_steps: usize,
    pub target_eps: f64,
    /// Minibatch size for SGD; ignored by full-batch descent.
    pub batch_size: usize,
    pub seed: u64,
    /// Record elapsed milliseconds per step. Off keeps logs byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be a finite nonnegative number, got {}",
                self.eta
            )));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} not in [1, {n}]",
                self.batch_size
            )));
        }
        if !(self.target_eps > 0.0) {
            return Err(Error::Config("target_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub f: f64,
    pub max_loss_norm: f64,
    pub grad_fro: f64,
    pub movement_fro: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Converged,
    MaxSteps,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    pub status: TrainStatus,
}

impl TrainLog {
    pub fn final_f(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.f)
    }

    /// First step at which `f <= eps`.
    pub fn steps_to(&self, eps: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.f <= eps).map(|r| r.step)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub params: NetworkParams,
}

/// `calib * delta / (m n L^2 d)`.
pub fn default_learning_rate(dims: Dims, delta: f64, calib: f64) -> f64 {
    assert!(calib > 0.0, "calibration constant must be positive");
    calib * delta / (dims.m as f64 * dims.n as f64 * (dims.l * dims.l) as f64 * dims.d as f64)
}

/// `W -= eta * G` fused with the movement computation; returns `||W - W0||_F`.
fn apply_step(w: &mut Matrix, w0: &Matrix, eta: f64, g: &GradFactors) -> f64 {
    let cols = w.cols();
    let mut mv = 0.0;
    for r in 0..w.rows() {
        let row = w.row_mut(r);
        for (a, b) in g.left.iter().zip(&g.right) {
            let s = -eta * a[r];
            if s != 0.0 {
                axpy(s, b, row);
            }
        }
        let r0 = &w0.as_slice()[r * cols..(r + 1) * cols];
        mv += row
            .iter()
            .zip(r0)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    mv.sqrt()
}

fn train_loop<F>(
    params: &NetworkParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut direction: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &NetworkParams, &crate::rnn::ForwardTrace) -> GradFactors,
{
    cfg.validate(params.dims.n)?;
    let start = Instant::now();
    let w0 = params.w.clone();
    let mut p = params.clone();
    let mut rows = Vec::new();
    let mut movement = 0.0;
    let mut status = TrainStatus::MaxSteps;
    for t in 0..=cfg.max_steps {
        let trace = forward(&p, ds)?;
        let f = trace.objective();
        let wall = if cfg.record_wall_time {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        if !f.is_finite() {
            rows.push(TrainRow {
                step: t,
                f,
                max_loss_norm: f64::NAN,
                grad_fro: f64::NAN,
                movement_fro: movement,
                wall_ms: wall,
            });
            status = TrainStatus::Diverged;
            break;
        }
        let dir = direction(t, &p, &trace);
        let grad_fro = dir.frobenius_sq().sqrt();
        rows.push(TrainRow {
            step: t,
            f,
            max_loss_norm: trace.max_loss_norm(),
            grad_fro,
            movement_fro: movement,
            wall_ms: wall,
        });
        if f <= cfg.target_eps {
            status = TrainStatus::Converged;
            break;
        }
        if t == cfg.max_steps {
            break;
        }
        if cfg.eta != 0.0 {
            movement = apply_step(&mut p.w, &w0, cfg.eta, &dir);
        }
        if !movement.is_finite() {
            status = TrainStatus::Diverged;
            rows.push(TrainRow {
                step: t + 1,
                f: f64::NAN,
                max_loss_norm: f64::NAN,
                grad_fro: f64::NAN,
                movement_fro: movement,
                wall_ms: wall,
            });
            break;
        }
    }
    Ok(TrainOutcome {
        log: TrainLog { rows, status },
        params: p,
    })
}

/// Gradient descent `W <- W - eta grad f(W)` until `f <= eps` or `max_steps`.
pub fn gd_train(params: &NetworkParams, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let all: Vec<usize> = (0..params.dims.n).collect();
    train_loop(params, ds, cfg, |_, p, trace| {
        gradient_factors(p, trace, &trace.loss_vectors(), &all)
    })
}

/// Sorted minibatch drawn without replacement for step `t`.
pub fn sgd_batch(n: usize, batch: usize, seed: u64, t: usize) -> Vec<usize> {
    let mut g = SeededRng::new(seed)
        .split("sgd")
        .split_index(t as u64)
        .generator();
    let mut s = sample(&mut g, n, batch).into_vec();
    s.sort_unstable();
    s
}

/// Minibatch SGD with direction `(n/|S|) sum_{i in S} grad f_i(W)`.
pub fn sgd_train(params: &NetworkParams, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let n = params.dims.n;
    let (bs, seed) = (cfg.batch_size, cfg.seed);
    train_loop(params, ds, cfg, |t, p, trace| {
        let s = sgd_batch(n, bs, seed, t);
        let mut dir = gradient_factors(p, trace, &trace.loss_vectors(), &s);
        if bs != n {
            dir.scale(n as f64 / bs as f64);
        }
        dir
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovementCheck {
    pub max_movement: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Compares `max_t ||W_t - W_0||_F` to `tau0 / sqrt(m)`.
pub fn movement_check(log: &TrainLog, tau0: f64, m: usize) -> MovementCheck {
    let max_movement = log.rows.iter().map(|r| r.movement_fro).fold(0.0, f64::max);
    let bound = tau0 / (m as f64).sqrt();
    MovementCheck {
        max_movement,
        bound,
        pass: max_movement <= bound,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gd,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub calib: f64,
    pub eta: f64,
    pub trials: Vec<(f64, bool)>,
}

/// Geometric back-off: start at `calib_start` and halve until a short run
/// of `probe_steps` descends stably. Full-batch runs must decrease `f` at every
/// step; minibatch runs must end below half the starting value and never
/// exceed twice it.
pub fn tune_learning_rate(
    params: &NetworkParams,
    ds: &Dataset,
    method: Method,
    batch_size: usize,
    calib_start: f64,
    probe_steps: usize,
    max_halvings: usize,
) -> Result<TuneResult> {
    let mut calib = calib_start;
    let mut trials = Vec::new();
    for _ in 0..=max_halvings {
        let eta = default_learning_rate(params.dims, ds.delta, calib);
        let cfg = TrainConfig {
            eta,
            max_steps: probe_steps,
            target_eps: 1e-300,
            batch_size,
            seed: 0,
            record_wall_time: false,
        };
        let out = match method {
            Method::Gd => gd_train(params, ds, &cfg)?,
            Method::Sgd => sgd_train(params, ds, &cfg)?,
        };
        let fs: Vec<f64> = out.log.rows.iter().map(|r| r.f).collect();
        let f0 = fs[0];
        let ok = out.log.status != TrainStatus::Diverged
            && match method {
                Method::Gd => fs.windows(2).all(|w| w[1] <= w[0]),
                Method::Sgd => fs.iter().all(|f| *f <= 2.0 * f0) && *fs.last().unwrap() <= 0.5 * f0,
            };
        trials.push((calib, ok));
        if ok {
            return Ok(TuneResult { calib, eta, trials });
        }
        calib /= 2.0;
    }
    Err(Error::Infeasible(format!(
        "no stable learning rate after {max_halvings} halvings"
    )))
}
