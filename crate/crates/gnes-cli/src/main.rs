//! Command-line driver: generate benchmark instances, validate step-size
//! certificates, run experiments, and compare two runs.
//!
//! Exit codes: 0 success, 2 certificate failure, 3 non-convergence within
//! the iteration budget, 1 any other error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gnes::config::{ConfigError, ExecMode, ExperimentConfig, Resolved};
use gnes::game::{TaskAllocationParams, TaskTopology};
use gnes::metrics::Trajectory;
use gnes::solvers::threaded::{threaded_run, ThreadedSpec};
use gnes::solvers::{run, RunResult};

const EXIT_CERTIFICATE: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "gnes",
    about = "Distributed generalized Nash equilibrium seeking over networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task-allocation benchmark instance file
    Generate {
        #[arg(long)]
        seed: u64,
        /// "figure-one" (default) or "random"
        #[arg(long, default_value = "figure-one")]
        topology: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolve a config and report the step-size certificate
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute a run and write trajectory CSV plus metadata JSON
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config/env output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run two configs and write a joint comparison report
    Compare {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Generate {
            seed,
            topology,
            out,
        } => cmd_generate(seed, &topology, &out),
        Command::Validate { config } => cmd_validate(&config),
        Command::Run { config, out_dir } => cmd_run(&config, out_dir),
        Command::Compare {
            config_a,
            config_b,
            out,
        } => cmd_compare(&config_a, &config_b, out),
    }
}

fn cmd_generate(seed: u64, topology: &str, out: &Path) -> Result<ExitCode> {
    let topo = match topology {
        "figure-one" => TaskTopology::FigureOne,
        "random" => TaskTopology::Random,
        other => anyhow::bail!("unknown topology {other:?} (figure-one | random)"),
    };
    let params = TaskAllocationParams::sample(seed, topo);
    params
        .validate()
        .context("sampled instance failed validation")?;
    let json = serde_json::to_string_pretty(&params)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "instance seed={} topology={:?}: {} players, {} coupling rows, player dim {}",
        seed,
        params.topology,
        gnes::game::WORKER_COUNT,
        gnes::game::TASK_COUNT,
        gnes::game::PLAYER_DIM,
    );
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn resolve(config_path: &Path) -> Result<(ExperimentConfig, Result<Resolved, ConfigError>)> {
    let cfg = ExperimentConfig::from_path(config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    let resolved = cfg.resolve();
    Ok((cfg, resolved))
}

fn cmd_validate(config_path: &Path) -> Result<ExitCode> {
    let (_, resolved) = resolve(config_path)?;
    match resolved {
        Ok(r) => {
            println!("certificate: PASS");
            println!("  delta      = {:.6}", r.certificate.delta);
            println!("  lambda_min(Phi - delta I) = {:.3e}", r.certificate.lambda_min);
            println!("  eta_max    = {:.6}", r.certificate.eta_max);
            println!("  eta        = {:.6}", r.steps.eta);
            println!("  alpha      = {:.6}", r.certificate.alpha);
            println!(
                "  sigma = {:.3e}, gamma = {:.3e}, tau = {:.3e}, psi = {}",
                r.steps.sigma, r.steps.gamma, r.steps.tau, r.steps.psi
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(ConfigError::Steps(e)) => {
            eprintln!("certificate: FAIL");
            eprintln!("  {e}");
            Ok(ExitCode::from(EXIT_CERTIFICATE))
        }
        Err(e) => Err(e.into()),
    }
}

fn write_outputs(
    dir: &Path,
    prefix: &str,
    trajectory: &Trajectory,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{prefix}.csv"));
    let meta_path = dir.join(format!("{prefix}.meta.json"));
    std::fs::write(&csv_path, trajectory.to_csv())?;
    std::fs::write(&meta_path, trajectory.metadata_json())?;
    Ok((csv_path, meta_path))
}

fn execute(cfg: &ExperimentConfig, resolved: &Resolved) -> Result<(Trajectory, bool)> {
    match resolved.execution {
        ExecMode::Deterministic => {
            let r = run(&resolved.ops, &resolved.steps, &resolved.run)?;
            let mut t = r.trajectory;
            annotate(&mut t, cfg);
            Ok((t, r.converged))
        }
        ExecMode::Threaded => {
            let n = resolved.ops.player_count();
            let spec = ThreadedSpec {
                rounds: (resolved.run.max_steps / n).max(1),
                tol: resolved.run.tol,
                psi: resolved.steps.psi,
                seed_init: resolved.run.seed_init,
                poll_ms: 2,
                reference: None,
            };
            let out = threaded_run(&resolved.ops, &resolved.steps, &spec)?;
            let mut t = out.trajectory;
            annotate(&mut t, cfg);
            Ok((t, out.converged))
        }
    }
}

fn annotate(t: &mut Trajectory, cfg: &ExperimentConfig) {
    t.meta.seed_game = cfg.game.seed;
    t.meta.config_echo = toml_echo(cfg);
}

fn toml_echo(cfg: &ExperimentConfig) -> Option<String> {
    toml::to_string_pretty(cfg).ok()
}

fn cmd_run(config_path: &Path, out_dir: Option<PathBuf>) -> Result<ExitCode> {
    let (cfg, resolved) = resolve(config_path)?;
    let resolved = match resolved {
        Ok(r) => r,
        Err(ConfigError::Steps(e)) => {
            eprintln!("certificate: FAIL\n  {e}");
            return Ok(ExitCode::from(EXIT_CERTIFICATE));
        }
        Err(e) => return Err(e.into()),
    };
    let (trajectory, converged) = execute(&cfg, &resolved)?;
    let dir = out_dir.unwrap_or_else(|| cfg.output_dir());
    let (csv_path, meta_path) = write_outputs(&dir, &cfg.output.prefix, &trajectory)?;
    let last = trajectory.rows.last().expect("at least one recorded row");
    println!(
        "{}: {} steps, kkt_total = {:.3e}, converged = {}",
        resolved.algorithm, trajectory.meta.steps_taken, last.kkt_total, converged
    );
    println!("wrote {} and {}", csv_path.display(), meta_path.display());
    if converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "no convergence: tol {:e} not reached in {} steps",
            resolved.run.tol, resolved.run.max_steps
        );
        Ok(ExitCode::from(EXIT_NO_CONVERGENCE))
    }
}

#[derive(serde::Serialize)]
struct CompareReport {
    final_profile_rel_diff: f64,
    kkt_total_diff: f64,
    kkt_feas_diff: f64,
    kkt_cons_diff: f64,
    kkt_stat_diff: f64,
    converged_a: bool,
    converged_b: bool,
    steps_a: usize,
    steps_b: usize,
    /// Per-agent total iteration counts for efficiency comparisons.
    activations_a: Vec<usize>,
    activations_b: Vec<usize>,
}

fn run_deterministic(config_path: &Path) -> Result<(ExperimentConfig, Resolved, RunResult)> {
    let (cfg, resolved) = resolve(config_path)?;
    let resolved = resolved.map_err(anyhow::Error::from)?;
    anyhow::ensure!(
        resolved.execution == ExecMode::Deterministic,
        "compare supports deterministic mode only"
    );
    let result = run(&resolved.ops, &resolved.steps, &resolved.run)?;
    Ok((cfg, resolved, result))
}

fn cmd_compare(path_a: &Path, path_b: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let (cfg_a, _res_a, a) = run_deterministic(path_a)?;
    let (_cfg_b, _res_b, b) = run_deterministic(path_b)?;

    let denom = a.x.norm().max(1e-300);
    let rel_diff = (&a.x - &b.x).norm() / denom;
    let la = a.trajectory.rows.last().expect("rows");
    let lb = b.trajectory.rows.last().expect("rows");
    let report = CompareReport {
        final_profile_rel_diff: rel_diff,
        kkt_total_diff: (la.kkt_total - lb.kkt_total).abs(),
        kkt_feas_diff: (la.kkt_feas - lb.kkt_feas).abs(),
        kkt_cons_diff: (la.kkt_cons - lb.kkt_cons).abs(),
        kkt_stat_diff: (la.kkt_stat - lb.kkt_stat).abs(),
        converged_a: a.converged,
        converged_b: b.converged,
        steps_a: a.steps_taken,
        steps_b: b.steps_taken,
        activations_a: a.activations,
        activations_b: b.activations,
    };
    let json = serde_json::to_string_pretty(&report)?;
    let out = out.unwrap_or_else(|| cfg_a.output_dir().join("compare.json"));
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&out, &json)?;
    println!(
        "final profile rel. difference: {:.3e} (steps: {} vs {})",
        report.final_profile_rel_diff, report.steps_a, report.steps_b
    );
    println!("wrote {}", out.display());
    if report.converged_a && report.converged_b {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_NO_CONVERGENCE))
    }
}
