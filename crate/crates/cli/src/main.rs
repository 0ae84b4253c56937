//! `sddjd`: synthetic data generation, single runs, and Monte Carlo sweeps
//! for soft decision-directed joint diagonalization.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sddjd::codec::{run_result_to_json, target_set_from_json, target_set_to_json};
use sddjd::experiment::{
    summarize, sweep, trajectory, write_final_weights, write_rows, write_summary, write_trajectory, Design,
    Execution, SummaryRow, SweepRow, TrajectoryReport,
};
use sddjd::matrixset::synthesize;
use sddjd::metrics::mixing_grl;
use sddjd::TargetSet;

use config::{usage, CommonArgs, Resolved, UsageError};

#[derive(Parser, Debug)]
#[command(name = "sddjd", version, about = "Robust non-unitary joint diagonalization benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic target set and write it as JSON.
    Synth(SynthCmd),
    /// Fit one target set with each selected algorithm.
    Run(RunCmd),
    /// Monte Carlo sweep over noise level or outlier fraction.
    Sweep(SweepCmd),
    /// Per-iteration weight trajectories of the soft solver.
    Trajectory(TrajectoryCmd),
}

#[derive(Args, Debug)]
struct SynthCmd {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct RunCmd {
    #[command(flatten)]
    common: CommonArgs,
    /// Target set JSON; synthesized from the problem flags when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Args, Debug)]
struct TableArgs {
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    /// Run cells one at a time instead of in parallel. Output is identical.
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Debug)]
struct SweepCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    table: TableArgs,
    /// ner_sweep, outlier_sweep or single; defaults to the config file's design.
    #[arg(long)]
    design: Option<Design>,
    /// Fill the wall_seconds column. Timings make output non-reproducible.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct TrajectoryCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    table: TableArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Synth(cmd) => cmd_synth(cmd),
        Command::Run(cmd) => cmd_run(cmd),
        Command::Sweep(cmd) => cmd_sweep(cmd),
        Command::Trajectory(cmd) => cmd_trajectory(cmd),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Context messages down to the first library error, whose text already
/// includes its causes.
fn describe(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.is::<sddjd::Error>() {
            break;
        }
    }
    parts.join(": ")
}

/// 1 usage, 2 solver degeneracy, 3 I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 3;
    }
    match e.downcast_ref::<sddjd::Error>().map(sddjd::Error::root) {
        Some(sddjd::Error::Io(_) | sddjd::Error::Json(_)) => 3,
        Some(err) if err.is_degeneracy() => 2,
        _ => 1,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|()| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

/// `dir/stem.ext` becomes `dir/stem_suffix.ext`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    path.with_file_name(name)
}

fn synthesize_single(resolved: &Resolved) -> Result<TargetSet> {
    let mut spec = resolved.spec.base.clone();
    spec.seed = resolved.spec.seed;
    Ok(synthesize(&spec)?)
}

fn cmd_synth(cmd: SynthCmd) -> Result<()> {
    let resolved = cmd.common.resolve(Some(Design::Single))?;
    let ts = synthesize_single(&resolved)?;
    let out = resolved.out.unwrap_or_else(|| PathBuf::from("dataset.json"));
    write_text(&out, &target_set_to_json(&ts)?)?;
    println!(
        "M={} N={} K={} outliers={} -> {}",
        ts.m(),
        ts.n(),
        ts.k(),
        ts.outlier_count(),
        out.display()
    );
    Ok(())
}

fn cmd_run(cmd: RunCmd) -> Result<()> {
    let resolved = cmd.common.resolve(Some(Design::Single))?;
    let ts = match &cmd.data {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
            target_set_from_json(&text).with_context(|| format!("parsing dataset {}", path.display()))?
        }
        None => synthesize_single(&resolved)?,
    };
    let spec = &resolved.spec;
    spec.solver.validate()?;
    let out = resolved.out.clone().unwrap_or_else(|| PathBuf::from("result.json"));
    for &algo in &spec.algorithms {
        let path = if spec.algorithms.len() == 1 {
            out.clone()
        } else {
            sibling(&out, algo.name())
        };
        let start = Instant::now();
        let res = algo.run(&ts, &spec.solver).with_context(|| format!("{algo} failed"))?;
        let seconds = start.elapsed().as_secs_f64();
        write_text(&path, &run_result_to_json(&res)?)?;
        let grl = match ts.truth() {
            Some(truth) => format!("grl={:.3e} ", mixing_grl(&res.a_hat, &truth.a)?),
            None => String::new(),
        };
        println!(
            "{algo}: {grl}iterations={} converged={} seconds={seconds:.3} -> {}",
            res.iterations,
            res.converged,
            path.display()
        );
    }
    Ok(())
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn row_json(r: &SweepRow) -> Value {
    json!({
        "design": r.design.name(),
        "grid_value": num(r.grid_value),
        "trial": r.trial,
        "seed": r.seed,
        "algorithm": r.algorithm.name(),
        "grl": r.grl.map(num),
        "iterations": r.iterations,
        "converged": r.converged,
        "wall_seconds": r.wall_seconds.map(num),
        "final_sigma2": r.final_sigma2.map(num),
        "error": r.error,
    })
}

fn summary_json(s: &SummaryRow) -> Value {
    json!({
        "design": s.design.name(),
        "grid_value": num(s.grid_value),
        "algorithm": s.algorithm.name(),
        "trials": s.trials,
        "failures": s.failures,
        "converged_fraction": num(s.converged_fraction),
        "grl_median": num(s.grl_median),
        "grl_q1": num(s.grl_q1),
        "grl_q3": num(s.grl_q3),
        "grl_iqr": num(s.grl_q3 - s.grl_q1),
        "grl_mean": num(s.grl_mean),
        "iterations_median": num(s.iterations_median),
        "iterations_iqr": num(s.iterations_iqr),
        "iterations_mean": num(s.iterations_mean),
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn table_paths(out: Option<PathBuf>, default_stem: &str, companion: &str, format: Format) -> (PathBuf, PathBuf) {
    let main = out.unwrap_or_else(|| PathBuf::from(format!("{default_stem}.{}", format.extension())));
    let other = sibling(&main, companion);
    (main, other)
}

fn cmd_sweep(cmd: SweepCmd) -> Result<()> {
    let resolved = cmd.common.resolve(cmd.design)?;
    let spec = &resolved.spec;
    if spec.design == Design::Trajectory {
        return usage("use the trajectory subcommand for the trajectory design");
    }
    let exec = Execution {
        parallel: !cmd.table.serial,
        timing: cmd.timing,
    };
    let rows = sweep(spec, exec)?;
    let summary = summarize(&rows);
    let (rows_path, summary_path) = table_paths(resolved.out.clone(), "sweep", "summary", cmd.table.format);
    match cmd.table.format {
        Format::Csv => {
            write_rows(create(&rows_path)?, &rows).with_context(|| format!("writing {}", rows_path.display()))?;
            write_summary(create(&summary_path)?, &summary)
                .with_context(|| format!("writing {}", summary_path.display()))?;
        }
        Format::Json => {
            write_json(&rows_path, &Value::Array(rows.iter().map(row_json).collect()))?;
            write_json(&summary_path, &Value::Array(summary.iter().map(summary_json).collect()))?;
        }
    }
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} rows ({failures} failed) -> {}; summary -> {}",
        rows.len(),
        rows_path.display(),
        summary_path.display()
    );
    for s in &summary {
        println!(
            "{} {}={} {}: median grl={:.3e} iqr={:.3e} median iterations={}",
            s.design, grid_label(s.design), s.grid_value, s.algorithm, s.grl_median, s.grl_q3 - s.grl_q1, s.iterations_median
        );
    }
    Ok(())
}

fn grid_label(design: Design) -> &'static str {
    match design {
        Design::NerSweep => "ner_db",
        Design::OutlierSweep => "outlier_fraction",
        Design::Trajectory | Design::Single => "grid",
    }
}

fn trajectory_json(report: &TrajectoryReport) -> Value {
    let records = report.first_run.trajectory.as_deref().unwrap_or_default();
    Value::Array(
        records
            .iter()
            .map(|r| {
                json!({
                    "t": r.t,
                    "sigma2": num(r.sigma2),
                    "cost": num(r.cost),
                    "mu": r.weights.iter().copied().map(num).collect::<Vec<_>>(),
                })
            })
            .collect(),
    )
}

fn final_weights_json(report: &TrajectoryReport) -> Value {
    Value::Array(
        report
            .deltas
            .iter()
            .zip(report.mean_final_weights())
            .enumerate()
            .map(|(i, (&delta, mu))| json!({"k": i + 1, "delta": num(delta), "mean_final_mu": num(mu)}))
            .collect(),
    )
}

fn cmd_trajectory(cmd: TrajectoryCmd) -> Result<()> {
    let resolved = cmd.common.resolve(Some(Design::Trajectory))?;
    let exec = Execution {
        parallel: !cmd.table.serial,
        timing: false,
    };
    let report = trajectory(&resolved.spec, exec)?;
    let (traj_path, final_path) = table_paths(resolved.out.clone(), "trajectory", "final_weights", cmd.table.format);
    match cmd.table.format {
        Format::Csv => {
            write_trajectory(create(&traj_path)?, &report.first_run)
                .with_context(|| format!("writing {}", traj_path.display()))?;
            write_final_weights(create(&final_path)?, &report)
                .with_context(|| format!("writing {}", final_path.display()))?;
        }
        Format::Json => {
            write_json(&traj_path, &trajectory_json(&report))?;
            write_json(&final_path, &final_weights_json(&report))?;
        }
    }
    println!(
        "{} iterations in first trial, {} trials ({} failed) -> {}; final weights -> {}",
        report.first_run.iterations,
        report.final_weights.len() + report.failures,
        report.failures,
        traj_path.display(),
        final_path.display()
    );
    Ok(())
}
