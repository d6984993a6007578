//! Experiment orchestration: one cell per `(m, seed)`, per-cell CSV/JSON
//! files, and a summary with pass fractions and log-log scaling fits.

pub mod config;
pub mod fit;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{parse_list, ExperimentConfig, Thresholds, TrainSettings};
pub use fit::{log_log_fit, scaling_fit, ScalingFit};

use crate::data::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::mc::{self, McConfig, McReport};
use crate::numerics::SeededRng;
use crate::probes::init;
use crate::probes::landscape::{self, IndicatorThresholds, LandscapeParams};
use crate::probes::report::{write_records_csv, ProbeReport, Record};
use crate::probes::stability::{self, PerturbationSpec};
use crate::probes::TheoryScales;
use crate::rnn::{forward, Dims, NetworkParams};
use crate::training::{
    default_learning_rate, gd_train, sgd_train, tune_learning_rate, Method, TrainConfig, TrainLog,
};

/// Residual above which a recomputation identity counts as a hard failure.
pub const RECOMPUTATION_TOL: f64 = 1e-9;

/// Everything one `(m, seed)` cell produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub config_hash: String,
    pub m: usize,
    pub seed: u64,
    pub reports: Vec<ProbeReport>,
    pub identity_failure: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCount {
    pub probe: String,
    pub checked: usize,
    pub passed: usize,
    pub pass_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub m: usize,
    pub seed: u64,
    pub probes: Vec<ProbeCount>,
    pub identity_failure: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub probe: String,
    pub quantity: String,
    pub fit: ScalingFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub probe: String,
    pub cells: usize,
    pub passing_cells: usize,
    pub pass_fraction: f64,
    pub threshold: f64,
    pub ok: bool,
    /// `(m, seed)` of cells whose record pass fraction is below the threshold.
    pub flagged: Vec<(usize, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub cells: Vec<CellSummary>,
    pub fits: Vec<FitSummary>,
    pub verdicts: Vec<ProbeVerdict>,
}

impl Summary {
    pub fn identity_failure(&self) -> bool {
        self.cells.iter().any(|c| c.identity_failure)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn dataset_for(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    generate_dataset(
        cfg.dims,
        cfg.delta,
        cfg.label_scale,
        &SeededRng::new(seed).split("data"),
    )
}

pub fn network_for(cfg: &ExperimentConfig, m: usize, seed: u64) -> NetworkParams {
    let d = cfg.dims;
    NetworkParams::init(
        Dims {
            n: d.n,
            l: d.l,
            d_x: d.d_x,
            d: d.d,
            m,
        },
        &SeededRng::new(seed).split("net"),
    )
}

/// Runs the selected training method, tuning the step size when the
/// settings give neither `eta` nor `calib`.
pub fn train_cell(
    params: &NetworkParams,
    ds: &Dataset,
    t: &TrainSettings,
    seed: u64,
) -> Result<(TrainLog, NetworkParams, f64)> {
    let eta = match (t.eta, t.calib) {
        (Some(eta), _) => eta,
        (None, Some(c)) => default_learning_rate(params.dims, ds.delta, c),
        (None, None) => tune_learning_rate(params, ds, t.method, t.batch_size, 1024.0, 20, 12)?.eta,
    };
    let tc = TrainConfig {
        eta,
        max_steps: t.max_steps,
        target_eps: t.target_eps,
        batch_size: t.batch_size,
        seed,
        record_wall_time: false,
    };
    tc.validate(params.dims.n)?;
    let out = match t.method {
        Method::Gd => gd_train(params, ds, &tc)?,
        Method::Sgd => sgd_train(params, ds, &tc)?,
    };
    Ok((out.log, out.params, eta))
}

fn run_probe(
    name: &str,
    cfg: &ExperimentConfig,
    params: &NetworkParams,
    ds: &Dataset,
    seed: u64,
    identity_failure: &mut bool,
) -> Result<Vec<ProbeReport>> {
    let trace = forward(params, ds)?;
    let m = params.dims.m;
    let n = params.dims.n;
    let i = (seed as usize) % n;
    let rng = SeededRng::new(seed).split(name);
    let scales = TheoryScales::new(params.dims, ds.delta, 1.0);
    Ok(match name {
        "forward_norm" => vec![init::forward_norm_probe(&trace, cfg.dims.l)],
        "fresh_randomness" => vec![init::fresh_randomness_probe(
            &trace,
            cfg.thresholds.fresh_floor,
        )],
        "separability" => vec![init::separability_probe(&trace, ds.delta)],
        "intermediate_spectral" => vec![init::intermediate_spectral_probe(params, &trace, i, 1e-4)],
        "sparse_spectral" => vec![init::sparse_spectral_probe(
            params, &trace, i, None, 32, &rng,
        )],
        "backward_sparse" => vec![init::backward_sparse_probe(
            params, &trace, i, None, 32, &rng,
        )],
        "forward_stability" | "backward_stability" => {
            let spec = PerturbationSpec::random_spectral(cfg.tau0);
            let (after, wp) = stability::perturb(params, ds, &spec, &rng)?;
            let t1 = forward(&after, ds)?;
            if name == "forward_stability" {
                let (_, mut rep) = stability::forward_stability_probe(&trace, &t1);
                let res = stability::forward_recomputation_residual(&params.w, &wp, &trace, &t1);
                *identity_failure |= res > RECOMPUTATION_TOL;
                rep.records
                    .push(Record::new("recomputation_residual", res).upper(RECOMPUTATION_TOL));
                rep.recompute();
                vec![rep]
            } else {
                let a = landscape::random_unit_losses(1, 3, params.dims.d, &rng.split("a"));
                vec![stability::backward_stability_probe(
                    params, &after, &trace, &t1, &a[0],
                )]
            }
        }
        "rank_one" => {
            let spec = PerturbationSpec::random_rank_one(
                m,
                cfg.rank_one_support.min(m),
                cfg.tau0.max(f64::MIN_POSITIVE),
                &rng,
            );
            let ks = stability::default_k_set(m, 64, &spec, &rng.split("k"));
            let a = landscape::random_unit_losses(1, 2, params.dims.d, &rng.split("a"));
            vec![stability::rank_one_probes(params, ds, &spec, &ks, &a[0])?]
        }
        "pl_ratio" => vec![landscape::pl_ratio_probe(params, ds)?],
        "gradient_upper" => vec![landscape::gradient_upper_bound_probe(params, ds)?],
        "fake_gradient" => {
            let loss = landscape::random_unit_losses(n, params.dims.l, params.dims.d, &rng);
            vec![landscape::fake_gradient_bound_probe(params, ds, &loss)?]
        }
        "semi_smoothness" => {
            let dir = landscape::unit_spectral_direction(m, &rng);
            let (_, rep) = landscape::semi_smoothness_probe(
                params,
                ds,
                &dir,
                &landscape::smoothness_tau_grid(m, 12),
            )?;
            vec![rep]
        }
        "decomposition_identity" => {
            let wp =
                landscape::unit_spectral_direction(m, &rng).scaled(cfg.tau0 / (m as f64).sqrt());
            let (res, rep) = landscape::decomposition_identity_probe(params, &wp, ds)?;
            *identity_failure |= !res.ok();
            vec![rep]
        }
        "indicator_coordinate" => {
            let (is, ls) = trace.argmax_loss();
            let ls = ls.min(params.dims.l - 1).max(2);
            let all: Vec<usize> = (0..m).collect();
            let mut out = Vec::new();
            if ls < params.dims.l {
                let th = cfg.thresholds.clone();
                let quant = IndicatorThresholds::Quantile {
                    small: th.indicator_small_quantile,
                    large: th.indicator_large_quantile,
                };
                let mut q = landscape::indicator_coordinate_probe(&trace, is, ls, quant, &all)?;
                q.probe = "indicator_coordinate_quantile".into();
                out.push(q);
                let lp = LandscapeParams::new(scales, ds.delta, m)?;
                out.push(landscape::indicator_coordinate_probe(
                    &trace,
                    is,
                    ls,
                    IndicatorThresholds::Theoretical(lp),
                    &all,
                )?);
            }
            out
        }
        "backward_coordinate" => {
            let loss = landscape::random_unit_losses(n, params.dims.l, params.dims.d, &rng);
            let all: Vec<usize> = (0..m).collect();
            vec![landscape::backward_coordinate_probe(
                params, &trace, &loss, &all,
            )?]
        }
        other => return Err(Error::Config(format!("unknown probe '{other}'"))),
    })
}

fn cell_stem(hash: &str, m: usize, seed: u64) -> String {
    format!("cell_m{m}_seed{seed}_{hash}")
}

/// Runs one cell and writes `cells/<stem>.json`, `.csv` and, when training,
/// `_train.csv` under `out`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    m: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<CellRecord> {
    let hash = cfg.hash();
    let mut rec = CellRecord {
        config_hash: hash.clone(),
        m,
        seed,
        reports: Vec::new(),
        identity_failure: false,
        error: None,
    };
    let ds = match dataset_for(cfg, seed) {
        Ok(ds) => ds,
        Err(e) => {
            rec.error = Some(e.to_string());
            return finish_cell(rec, None, out);
        }
    };
    let params = network_for(cfg, m, seed);
    let mut train_log = None;
    for name in &cfg.probes {
        if name == "train" {
            let t = cfg.train.as_ref().expect("validated");
            match train_cell(&params, &ds, t, seed) {
                Ok((log, trained, eta)) => {
                    let mv = crate::training::movement_check(&log, cfg.tau0, m);
                    let rep = landscape::pl_floor_probe(&log, m, 1e-4, t.target_eps)
                        .with_extra("eta", eta)
                        .with_extra("final_f", log.final_f())
                        .with_extra(
                            "steps_to_target",
                            log.steps_to(t.target_eps).map_or(f64::NAN, |s| s as f64),
                        )
                        .with_extra("max_movement", mv.max_movement)
                        .with_extra("movement_bound", mv.bound)
                        .with_extra("trained_w_fro", trained.w.frobenius());
                    rec.reports.push(rep);
                    train_log = Some(log);
                }
                Err(e) => rec.error = Some(format!("train: {e}")),
            }
            continue;
        }
        let mut fail = false;
        match run_probe(name, cfg, &params, &ds, seed, &mut fail) {
            Ok(reps) => rec.reports.extend(reps),
            Err(e) => rec.error = Some(format!("{name}: {e}")),
        }
        rec.identity_failure |= fail;
    }
    finish_cell(rec, train_log.as_ref(), out)
}

fn finish_cell(rec: CellRecord, log: Option<&TrainLog>, out: Option<&Path>) -> Result<CellRecord> {
    if let Some(dir) = out {
        let cells = dir.join("cells");
        fs::create_dir_all(&cells)?;
        let stem = cell_stem(&rec.config_hash, rec.m, rec.seed);
        fs::write(
            cells.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&rec)?,
        )?;
        write_records_csv(
            &rec.reports,
            fs::File::create(cells.join(format!("{stem}.csv")))?,
        )?;
        if let Some(log) = log {
            log.write_csv(fs::File::create(cells.join(format!("{stem}_train.csv")))?)?;
        }
    }
    Ok(rec)
}

fn count_probe(reports: &[&ProbeReport]) -> (usize, usize) {
    let checked = reports
        .iter()
        .flat_map(|r| &r.records)
        .filter(|r| r.pass.is_some())
        .count();
    let passed = reports
        .iter()
        .flat_map(|r| &r.records)
        .filter(|r| r.pass == Some(true))
        .count();
    (checked, passed)
}

/// Builds the summary from cell records, in `(m, seed)` order.
pub fn summarize(cfg_hash: &str, cells: &[CellRecord], thresholds: &Thresholds) -> Summary {
    let mut cells: Vec<&CellRecord> = cells.iter().collect();
    cells.sort_by_key(|c| (c.m, c.seed));
    let mut summaries = Vec::new();
    let mut verdict_counts: BTreeMap<String, (usize, usize, Vec<(usize, u64)>)> = BTreeMap::new();
    let mut maxima: BTreeMap<(String, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for c in &cells {
        let mut names: Vec<&str> = c.reports.iter().map(|r| r.probe.as_str()).collect();
        names.dedup();
        let mut probes = Vec::new();
        for name in names {
            let reps: Vec<&ProbeReport> = c.reports.iter().filter(|r| r.probe == name).collect();
            let (checked, passed) = count_probe(&reps);
            probes.push(ProbeCount {
                probe: name.to_string(),
                checked,
                passed,
                pass_fraction: (checked > 0).then(|| passed as f64 / checked as f64),
            });
            if checked > 0 {
                let e = verdict_counts.entry(name.to_string()).or_default();
                e.0 += 1;
                if passed as f64 >= thresholds.pass_fraction * checked as f64 {
                    e.1 += 1;
                } else {
                    e.2.push((c.m, c.seed));
                }
            }
            for r in &reps {
                let mut per_q: BTreeMap<&str, f64> = BTreeMap::new();
                for rec in &r.records {
                    if rec.value.is_finite() {
                        let v = per_q
                            .entry(rec.quantity.as_str())
                            .or_insert(f64::NEG_INFINITY);
                        *v = v.max(rec.value);
                    }
                }
                for (q, v) in per_q {
                    maxima
                        .entry((name.to_string(), q.to_string()))
                        .or_default()
                        .entry(c.m)
                        .or_default()
                        .push(v);
                }
            }
        }
        summaries.push(CellSummary {
            m: c.m,
            seed: c.seed,
            probes,
            identity_failure: c.identity_failure,
            error: c.error.clone(),
        });
    }
    let mut fits = Vec::new();
    for ((probe, quantity), per_m) in &maxima {
        let pts: Vec<(f64, f64)> = per_m
            .iter()
            .filter_map(|(m, vs)| {
                let pos: Vec<f64> = vs.iter().copied().filter(|v| *v > 0.0).collect();
                (pos.len() == vs.len() && !vs.is_empty()).then(|| {
                    (
                        *m as f64,
                        (pos.iter().map(|v| v.ln()).sum::<f64>() / pos.len() as f64).exp(),
                    )
                })
            })
            .collect();
        if pts.len() >= 3 {
            if let Ok(fit) = log_log_fit(&pts) {
                fits.push(FitSummary {
                    probe: probe.clone(),
                    quantity: quantity.clone(),
                    fit,
                });
            }
        }
    }
    let verdicts = verdict_counts
        .into_iter()
        .map(|(probe, (total, pass, flagged))| {
            let frac = pass as f64 / total as f64;
            ProbeVerdict {
                probe,
                cells: total,
                passing_cells: pass,
                pass_fraction: frac,
                threshold: thresholds.pass_fraction,
                ok: frac >= thresholds.pass_fraction,
                flagged,
            }
        })
        .collect();
    Summary {
        config_hash: cfg_hash.to_string(),
        cells: summaries,
        fits,
        verdicts,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub probe: String,
    pub files: usize,
    pub passing: usize,
    pub pass_fraction: f64,
    /// Indices of reports below the threshold.
    pub flagged: Vec<usize>,
}

/// Pass fraction of a set of reports of the same probe, one per seed.
pub fn aggregate_seeds(reports: &[ProbeReport], threshold: f64) -> Result<SeedAggregate> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("no reports to aggregate".into()))?;
    if reports
        .iter()
        .any(|r| r.probe != first.probe || r.lemma != first.lemma)
    {
        return Err(Error::Invalid("reports come from different probes".into()));
    }
    let mut flagged = Vec::new();
    for (k, r) in reports.iter().enumerate() {
        let frac = r.aggregate.pass_fraction.unwrap_or(1.0);
        if frac < threshold {
            flagged.push(k);
        }
    }
    let passing = reports.len() - flagged.len();
    Ok(SeedAggregate {
        probe: first.probe.clone(),
        files: reports.len(),
        passing,
        pass_fraction: passing as f64 / reports.len() as f64,
        flagged,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub summary_path: Option<PathBuf>,
}

impl RunOutcome {
    /// 0 on success, 1 when an identity check failed.
    pub fn exit_code(&self) -> i32 {
        if self.summary.identity_failure() {
            1
        } else {
            0
        }
    }
}

/// Runs every `(m, seed)` cell on a pool of `threads` workers, then writes
/// `summary_<hash>.json` under `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    threads: usize,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let jobs: Vec<(usize, u64)> = cfg
        .m_grid
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let cells: Vec<Result<CellRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|(m, s)| run_cell(cfg, *m, *s, out))
            .collect()
    });
    let cells: Vec<CellRecord> = cells.into_iter().collect::<Result<_>>()?;
    let summary = summarize(&cfg.hash(), &cells, &cfg.thresholds);
    let summary_path = match out {
        Some(dir) => {
            let p = dir.join(format!("summary_{}.json", summary.config_hash));
            fs::write(&p, summary.to_json()?)?;
            Some(p)
        }
        None => None,
    };
    Ok(RunOutcome {
        summary,
        summary_path,
    })
}

/// Rebuilds the summary from the cell JSON files under `out/cells`.
pub fn summarize_dir(out: &Path, cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let hash = cfg.hash();
    let dir = out.join("cells");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json") && p.to_string_lossy().contains(&hash)
        })
        .collect();
    paths.sort();
    let mut cells = Vec::new();
    for p in paths {
        let rec: CellRecord = serde_json::from_str(&fs::read_to_string(&p)?)?;
        if rec.config_hash != hash {
            return Err(Error::Invalid(format!(
                "{} belongs to a different config",
                p.display()
            )));
        }
        cells.push(rec);
    }
    let summary = summarize(&hash, &cells, &cfg.thresholds);
    let p = out.join(format!("summary_{hash}.json"));
    fs::write(&p, summary.to_json()?)?;
    Ok(RunOutcome {
        summary,
        summary_path: Some(p),
    })
}

/// Writes one dataset per seed as `data_seed<seed>_<hash>.json`.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let mut paths = Vec::new();
    for &seed in &cfg.seeds {
        let ds = dataset_for(cfg, seed)?;
        let p = out.join(format!("data_seed{seed}_{hash}.json"));
        ds.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// The concentration suite: every inequality at one fixed parameter setting.
pub fn mc_suite(trials: u64, seed: u64) -> Result<Vec<McReport>> {
    let cfg = McConfig::new(trials, seed);
    let mut out = Vec::new();
    out.extend(mc::chi_square_tail_mc(10, 1.0, &cfg)?);
    out.extend(mc::chi_square_tail_mc(1, 0.5, &cfg)?);
    out.push(mc::sum_of_squares_mc(100, 1.0, 2.0, &cfg)?);
    out.extend(mc::truncated_square_sum_mc(
        &[64, 256, 1024],
        &McConfig::new(trials.min(20_000).max(trials / 5), seed),
    )?);
    out.push(mc::relu_gaussian_norm_mc(400, 1.0, 0.2, &cfg)?);
    let x: Vec<f64> = (0..8).map(|k| 1.0 + k as f64 / 8.0).collect();
    out.push(mc::relu_matrix_norm_mc(200, &x, 1.0, 0.2, &cfg)?);
    out.extend(mc::gaussian_percentile_check(0.5, &cfg)?);
    out.extend(mc::gaussian_percentile_check(1.0, &cfg)?);
    let reduced = McConfig::new(trials.min(20_000).max(trials / 5), seed);
    out.push(mc::gaussian_good_mc(1024, 0.1, 1.0, &reduced)?);
    out.push(mc::heavy_light_mc(256, 4, 4, &reduced)?);
    out.push(mc::mcdiarmid_mc(
        &mc::McDiarmidFunction::SignMean { n: 100 },
        0.2,
        &cfg,
    )?);
    let weights: Vec<f64> = (0..50)
        .map(|k| ((k * 37 % 50) as f64 + 1.0) / 50.0)
        .collect();
    out.push(mc::mcdiarmid_mc(
        &mc::McDiarmidFunction::ClippedProjection { weights },
        0.1,
        &cfg,
    )?);
    out.push(mc::mcdiarmid_extension_mc(10, 1e-6, &cfg)?.0);
    Ok(out)
}

/// Runs [`mc_suite`] and writes `mc_<hash>.json` and `.csv`.
pub fn run_mc(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<McReport>> {
    fs::create_dir_all(out)?;
    let seed = cfg.seeds[0];
    let reps = mc_suite(cfg.mc_trials, seed)?;
    let hash = cfg.hash();
    fs::write(
        out.join(format!("mc_{hash}.json")),
        serde_json::to_string_pretty(&reps)?,
    )?;
    mc::write_reports_csv(&reps, fs::File::create(out.join(format!("mc_{hash}.csv")))?)?;
    Ok(reps)
}
