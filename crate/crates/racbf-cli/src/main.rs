//! Experiment harness for the adaptive-safety simulations: single runs,
//! parameter-bound sweeps, summary comparison and config validation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use racbf_cli::config::{load, FileConfig, Resolved, ScenarioId};
use racbf::scenarios::{build_gap, build_overtake, ControllerKind};
use racbf::sim::SimRun;
use racbf_cli::report::{self, exit_code_for, RunSummary, SweepRow};

#[derive(Parser)]
#[command(
    name = "racbf",
    about = "Fixed-time adaptive estimation with robust-adaptive CBF-QP control",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML configuration file; unspecified fields use scenario defaults.
    #[arg(long)]
    config: Option<String>,
    /// Dotted-path overrides, e.g. --set estimator.c1e=50
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Scenario: gap | overtake
    #[arg(long)]
    scenario: Option<String>,
    /// Controller: proposed | robust-baseline | certainty-equivalent
    #[arg(long)]
    controller: Option<String>,
    /// Parameter bound of the admissible box
    #[arg(long)]
    theta_bar: Option<f64>,
    /// Integration step (s)
    #[arg(long)]
    dt: Option<f64>,
    /// Simulation horizon (s)
    #[arg(long)]
    t_final: Option<f64>,
    /// Seed for the randomized initial parameter estimate
    #[arg(long)]
    seed: Option<u64>,
    /// Keep every k-th trace row
    #[arg(long)]
    decimate: Option<usize>,
    /// Output directory (joined under RACBF_OUTPUT_ROOT when relative)
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, writing trace.csv, summary.json and effective.toml
    Run(CommonOpts),
    /// Run the parameter-bound sweep for both controllers and emit sweep.csv
    Sweep(CommonOpts),
    /// Join two summary JSON files into a comparison table on stdout
    Compare { left: PathBuf, right: PathBuf },
    /// Check that a configuration resolves, printing the outcome
    ValidateConfig(CommonOpts),
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch() -> Result<u8> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(opts) => {
            let (resolved, echo) = resolve_opts(&opts)?;
            run_single(&resolved, &echo)
        }
        Command::Sweep(opts) => {
            let (resolved, echo) = resolve_opts(&opts)?;
            run_sweep(&resolved, &echo)
        }
        Command::Compare { left, right } => compare(&left, &right),
        Command::ValidateConfig(opts) => {
            let (resolved, _) = resolve_opts(&opts)?;
            println!(
                "ok: scenario={} controller={} theta_bar={} dt={} t_final={}",
                resolved.scenario,
                resolved.controller,
                resolved.theta_bar,
                resolved.dt(),
                resolved.t_final()
            );
            Ok(0)
        }
    }
}

fn resolve_opts(opts: &CommonOpts) -> Result<(Resolved, FileConfig)> {
    let flags: Vec<(&str, Option<String>)> = vec![
        ("experiment.scenario", opts.scenario.clone()),
        ("experiment.controller", opts.controller.clone()),
        ("experiment.theta_bar", opts.theta_bar.map(|v| v.to_string())),
        ("experiment.dt", opts.dt.map(|v| v.to_string())),
        ("experiment.t_final", opts.t_final.map(|v| v.to_string())),
        ("experiment.seed", opts.seed.map(|v| v.to_string())),
        ("experiment.decimate", opts.decimate.map(|v| v.to_string())),
        ("experiment.out_dir", opts.out.clone()),
    ];
    load(opts.config.as_deref(), &opts.sets, &flags)
}

fn output_dir(resolved: &Resolved) -> PathBuf {
    let dir = PathBuf::from(&resolved.out_dir);
    if dir.is_relative() {
        if let Ok(root) = std::env::var("RACBF_OUTPUT_ROOT") {
            return PathBuf::from(root).join(dir);
        }
    }
    dir
}

/// Draws the initial estimate uniformly from the admissible box.
fn draw_theta_hat0(seed: u64, theta_bar: f64) -> [f64; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        if theta_bar > 0.0 {
            rng.random_range(-theta_bar..theta_bar)
        } else {
            0.0
        }
    };
    [draw(), draw()]
}

fn execute(resolved: &Resolved, kind: ControllerKind, theta_bar: f64) -> Result<(SimRun, DVector<f64>)> {
    let theta_hat0 = Some(draw_theta_hat0(resolved.seed, theta_bar));
    match resolved.scenario {
        ScenarioId::Gap => {
            let cfg = racbf::scenarios::GapConfig {
                theta_bar,
                theta_hat0,
                ..resolved.gap.clone()
            };
            let mut sim = build_gap(&cfg, kind)?;
            let theta = sim.model.theta_true.clone();
            Ok((sim.run()?, theta))
        }
        ScenarioId::Overtake => {
            let cfg = racbf::scenarios::OvertakeConfig {
                theta_bar,
                theta_hat0,
                ..resolved.overtake.clone()
            };
            let mut build = build_overtake(&cfg, kind)?;
            let theta = build.sim.model.theta_true.clone();
            Ok((build.sim.run()?, theta))
        }
    }
}

fn write_echo(echo: &FileConfig, dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(echo).context("serializing effective config")?;
    std::fs::write(dir.join("effective.toml"), text).context("writing effective.toml")
}

fn run_single(resolved: &Resolved, echo: &FileConfig) -> Result<u8> {
    let dir = output_dir(resolved);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    write_echo(echo, &dir)?;

    let (run, theta_true) = execute(resolved, resolved.controller, resolved.theta_bar)?;
    report::emit_trace(&run.trace, &dir.join("trace.csv"), resolved.decimate)?;
    let summary = report::summarize(resolved, &run, &theta_true);
    let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    std::fs::write(dir.join("summary.json"), &json).context("writing summary.json")?;
    println!("{json}");
    Ok(exit_code_for(&summary))
}

fn run_sweep(resolved: &Resolved, echo: &FileConfig) -> Result<u8> {
    let dir = output_dir(resolved);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    write_echo(echo, &dir)?;

    let mut rows = Vec::new();
    for &theta_bar in &resolved.sweep {
        let mut row = SweepRow {
            theta_bar,
            t_proposed: None,
            t_baseline: None,
            decision_proposed: None,
            decision_baseline: None,
            error: None,
        };
        for kind in [ControllerKind::Proposed, ControllerKind::RobustBaseline] {
            match execute(resolved, kind, theta_bar) {
                Ok((run, theta_true)) => {
                    let summary = report::summarize(
                        &Resolved { theta_bar, controller: kind, ..resolved.clone() },
                        &run,
                        &theta_true,
                    );
                    // The timing decision only applies to the overtake.
                    let decision = match resolved.scenario {
                        ScenarioId::Overtake => Some(racbf::scenarios::overtake_decision(
                            run.completion_time,
                            resolved.overtake.oncoming_first,
                            resolved.overtake.oncoming_interval,
                        )),
                        ScenarioId::Gap => None,
                    };
                    match kind {
                        ControllerKind::Proposed => {
                            row.t_proposed = summary.completion_time;
                            row.decision_proposed = decision;
                        }
                        _ => {
                            row.t_baseline = summary.completion_time;
                            row.decision_baseline = decision;
                        }
                    }
                }
                Err(err) => {
                    // Record and continue with the rest of the grid.
                    row.error = Some(format!("error: {err}"));
                }
            }
        }
        rows.push(row);
    }
    let csv = report::sweep_csv(&rows);
    std::fs::write(dir.join("sweep.csv"), &csv).context("writing sweep.csv")?;
    print!("{csv}");
    Ok(0)
}

fn compare(left: &Path, right: &Path) -> Result<u8> {
    let read = |p: &Path| -> Result<RunSummary> {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("reading summary {}", p.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow!("parsing {}: {e}", p.display()))
    };
    let a = read(left)?;
    let b = read(right)?;
    let av = serde_json::to_value(&a)?;
    let bv = serde_json::to_value(&b)?;
    println!("field,left,right");
    if let (serde_json::Value::Object(ao), serde_json::Value::Object(bo)) = (av, bv) {
        for (key, val) in ao {
            let other = bo.get(&key).cloned().unwrap_or(serde_json::Value::Null);
            println!("{key},{val},{other}");
        }
    }
    Ok(0)
}
