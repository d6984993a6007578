use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnnlab::runner::config::{INIT_PROBES, LANDSCAPE_PROBES, STABILITY_PROBES};
use rnnlab::runner::{self, parse_list, ExperimentConfig};
use rnnlab::Error;

#[derive(Parser)]
#[command(
    name = "rnnlab",
    version,
    about = "Training and landscape probes for wide ReLU recurrent networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one dataset per seed.
    GenData(Common),
    /// Train every (m, seed) cell and log the run.
    Train(Common),
    /// Probes of the network at initialization.
    ProbeInit(Common),
    /// Forward and backward perturbation probes.
    ProbeStability(Common),
    /// Gradient and smoothness probes.
    ProbeLandscape(Common),
    /// Monte-Carlo checks of the concentration inequalities.
    McVerify(Common),
    /// Rebuild the summary from the cell files in the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $RNNLAB_OUT, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "m-grid")]
    m_grid: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    probes: Option<String>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl Common {
    fn load(&self) -> rnnlab::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_list(s)?;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(g) = &self.m_grid {
            cfg.m_grid = parse_list(g)?;
        }
        if let Some(m) = self.m {
            cfg.m_grid = vec![m];
        }
        if let Some(p) = &self.probes {
            cfg.probes = parse_list(p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("RNNLAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Keeps the configured probes of one family, or the whole family when none are selected.
fn select_family(
    cfg: &mut ExperimentConfig,
    family: &[&str],
    explicit: bool,
) -> rnnlab::Result<()> {
    if explicit {
        if let Some(p) = cfg.probes.iter().find(|p| !family.contains(&p.as_str())) {
            return Err(Error::Config(format!(
                "probe '{p}' does not belong to this subcommand"
            )));
        }
        return Ok(());
    }
    let picked: Vec<String> = cfg
        .probes
        .iter()
        .filter(|p| family.contains(&p.as_str()))
        .cloned()
        .collect();
    cfg.probes = if picked.is_empty() {
        family.iter().map(|s| s.to_string()).collect()
    } else {
        picked
    };
    Ok(())
}

fn run(cli: Cli) -> rnnlab::Result<i32> {
    let (common, family): (&Common, Option<&[&str]>) = match &cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            for p in runner::generate_data(&cfg, &c.out_dir())? {
                println!("{}", p.display());
            }
            return Ok(0);
        }
        Command::McVerify(c) => {
            let cfg = c.load()?;
            let reps = runner::run_mc(&cfg, &c.out_dir())?;
            for r in &reps {
                println!(
                    "{:<36} empirical {:.4e}  bound {:.4e}  {:?}",
                    r.lemma, r.empirical, r.bound, r.verdict
                );
            }
            return Ok(0);
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            let out = runner::summarize_dir(&c.out_dir(), &cfg)?;
            print_summary(&out);
            return Ok(out.exit_code());
        }
        Command::Train(c) => (c, Some(&["train"][..])),
        Command::ProbeInit(c) => (c, Some(INIT_PROBES)),
        Command::ProbeStability(c) => (c, Some(STABILITY_PROBES)),
        Command::ProbeLandscape(c) => (c, Some(LANDSCAPE_PROBES)),
    };
    let mut cfg = common.load()?;
    if let Some(f) = family {
        select_family(&mut cfg, f, common.probes.is_some())?;
        cfg.validate()?;
    }
    let out_dir = common.out_dir();
    let out = runner::run_experiment(&cfg, Some(&out_dir), common.threads)?;
    print_summary(&out);
    Ok(out.exit_code())
}

fn print_summary(out: &runner::RunOutcome) {
    for v in &out.summary.verdicts {
        println!(
            "{:<28} {}/{} cells pass ({})",
            v.probe,
            v.passing_cells,
            v.cells,
            if v.ok { "ok" } else { "below threshold" }
        );
    }
    for f in &out.summary.fits {
        println!(
            "fit {}/{}: slope {:.3} (r2 {:.3})",
            f.probe, f.quantity, f.fit.slope, f.fit.r2
        );
    }
    for c in out.summary.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell m={} seed={}: {}",
            c.m,
            c.seed,
            c.error.as_deref().unwrap_or("")
        );
    }
    if let Some(p) = &out.summary_path {
        println!("summary: {}", p.display());
    }
    if out.summary.identity_failure() {
        eprintln!("identity check failed");
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
