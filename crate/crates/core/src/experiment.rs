//! Seeded Monte Carlo experiment drivers: parameter sweeps and weight trajectories.
//!
//! Every (grid point, trial) cell draws a fresh target set from its own seed,
//! derived from the experiment seed and the cell coordinates, so serial and
//! parallel execution produce identical rows. All algorithms in a cell see the
//! same target set.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{run_ls, BaselineConfig};
use crate::error::{Error, Result};
use crate::matrixset::{ner_to_delta, synthesize, SynthSpec, TargetSet};
use crate::metrics::mixing_grl;
use crate::solver::{self, RunResult, SolverConfig, Weighting};

pub const ROW_COLUMNS: [&str; 11] = [
    "design",
    "grid_value",
    "trial",
    "seed",
    "algorithm",
    "grl",
    "iterations",
    "converged",
    "wall_seconds",
    "final_sigma2",
    "error",
];

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "design",
    "grid_value",
    "algorithm",
    "trials",
    "failures",
    "converged_fraction",
    "grl_median",
    "grl_q1",
    "grl_q3",
    "grl_iqr",
    "grl_mean",
    "iterations_median",
    "iterations_iqr",
    "iterations_mean",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    NerSweep,
    OutlierSweep,
    Trajectory,
    Single,
}

impl Design {
    pub fn name(self) -> &'static str {
        match self {
            Design::NerSweep => "ner_sweep",
            Design::OutlierSweep => "outlier_sweep",
            Design::Trajectory => "trajectory",
            Design::Single => "single",
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ner_sweep" => Ok(Design::NerSweep),
            "outlier_sweep" => Ok(Design::OutlierSweep),
            "trajectory" => Ok(Design::Trajectory),
            "single" => Ok(Design::Single),
            other => Err(Error::Spec(format!("unknown design {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sddjd,
    Ls,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sddjd => "sddjd",
            Algorithm::Ls => "ls",
        }
    }

    pub fn run(self, targets: &TargetSet, config: &SolverConfig) -> Result<RunResult> {
        match self {
            Algorithm::Sddjd => solver::run(
                targets,
                &SolverConfig {
                    weighting: Weighting::Soft,
                    ..config.clone()
                },
            ),
            Algorithm::Ls => run_ls(
                targets,
                &BaselineConfig {
                    omega: None,
                    solver: config.clone(),
                },
            ),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sddjd" => Ok(Algorithm::Sddjd),
            "ls" => Ok(Algorithm::Ls),
            other => Err(Error::Spec(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// Parses a comma-separated algorithm list such as `sddjd,ls`.
pub fn parse_algorithms(list: &str) -> Result<Vec<Algorithm>> {
    let mut algos = list.split(',').map(Algorithm::from_str).collect::<Result<Vec<_>>>()?;
    algos.dedup();
    if algos.is_empty() {
        return Err(Error::Spec("no algorithm selected".into()));
    }
    Ok(algos)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub design: Design,
    /// NER values in dB, outlier fractions, or the per-matrix `δ_k` for trajectories.
    pub grid: Vec<f64>,
    pub trials: usize,
    pub base: SynthSpec,
    pub solver: SolverConfig,
    pub algorithms: Vec<Algorithm>,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Spec("experiment grid is empty".into()));
        }
        if self.trials < 1 {
            return Err(Error::Spec("trials must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Spec("no algorithm selected".into()));
        }
        if let Some(g) = self.grid.iter().find(|g| !g.is_finite()) {
            return Err(Error::Spec(format!("grid value {g} is not finite")));
        }
        self.solver.validate()?;
        for gi in 0..self.grid.len() {
            self.cell_spec(gi, 0)?.validate()?;
        }
        Ok(())
    }

    /// Synthetic problem for one cell.
    pub fn cell_spec(&self, grid_index: usize, trial: usize) -> Result<SynthSpec> {
        let mut spec = self.base.clone();
        spec.seed = cell_seed(self.seed, grid_index, trial);
        let value = self.grid[grid_index];
        match self.design {
            Design::NerSweep => spec.noise_levels = vec![ner_to_delta(value)],
            Design::OutlierSweep => spec.outlier_fraction = value,
            Design::Trajectory => {
                spec.noise_levels = self.grid.clone();
                spec.k = self.grid.len();
            }
            Design::Single => {}
        }
        Ok(spec)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of cell `(grid_index, trial)`.
pub fn cell_seed(seed: u64, grid_index: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ grid_index as u64) ^ trial as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Execution {
    pub parallel: bool,
    /// Fill `wall_seconds`; when off the column is left empty so output is reproducible.
    pub timing: bool,
}

impl Default for Execution {
    fn default() -> Self {
        Self {
            parallel: true,
            timing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub design: Design,
    pub grid_index: usize,
    pub grid_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub grl: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_seconds: Option<f64>,
    pub final_sigma2: Option<f64>,
    pub error: Option<String>,
}

fn evaluate(targets: &TargetSet, algo: Algorithm, config: &SolverConfig) -> Result<(RunResult, f64)> {
    let res = algo.run(targets, config)?;
    let truth = targets
        .truth()
        .ok_or_else(|| Error::Spec("target set has no ground truth".into()))?;
    let grl = mixing_grl(&res.a_hat, &truth.a)?;
    Ok((res, grl))
}

fn run_cell(spec: &ExperimentSpec, grid_index: usize, trial: usize, exec: Execution) -> Vec<SweepRow> {
    let template = |algorithm| SweepRow {
        design: spec.design,
        grid_index,
        grid_value: spec.grid[grid_index],
        trial,
        seed: cell_seed(spec.seed, grid_index, trial),
        algorithm,
        grl: None,
        iterations: 0,
        converged: false,
        wall_seconds: None,
        final_sigma2: None,
        error: None,
    };
    let targets = spec.cell_spec(grid_index, trial).and_then(|s| synthesize(&s));
    spec.algorithms
        .iter()
        .map(|&algo| {
            let mut row = template(algo);
            let targets = match &targets {
                Ok(t) => t,
                Err(e) => {
                    row.error = Some(e.to_string());
                    return row;
                }
            };
            let start = Instant::now();
            let outcome = evaluate(targets, algo, &spec.solver);
            if exec.timing {
                row.wall_seconds = Some(start.elapsed().as_secs_f64());
            }
            match outcome {
                Ok((res, grl)) => {
                    row.grl = Some(grl);
                    row.iterations = res.iterations;
                    row.converged = res.converged;
                    row.final_sigma2 = Some(res.final_state.sigma2);
                }
                Err(e) => {
                    if let Error::AtIteration { iteration, .. } = &e {
                        row.iterations = *iteration;
                    }
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect()
}

/// Runs every (grid point, trial, algorithm) combination. Failures become rows
/// with `converged = false` and an error note; the sweep continues.
pub fn sweep(spec: &ExperimentSpec, exec: Execution) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> = (0..spec.grid.len())
        .flat_map(|g| (0..spec.trials).map(move |t| (g, t)))
        .collect();
    let mut rows: Vec<SweepRow> = if exec.parallel {
        cells
            .par_iter()
            .flat_map_iter(|&(g, t)| run_cell(spec, g, t, exec))
            .collect()
    } else {
        cells.iter().flat_map(|&(g, t)| run_cell(spec, g, t, exec)).collect()
    };
    rows.sort_by_key(|r| (r.grid_index, r.trial, r.algorithm));
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rows<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROW_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.design.name().to_string(),
            r.grid_value.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.algorithm.name().to_string(),
            fmt_opt(r.grl),
            r.iterations.to_string(),
            r.converged.to_string(),
            fmt_opt(r.wall_seconds),
            fmt_opt(r.final_sigma2),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub design: Design,
    pub grid_value: f64,
    pub algorithm: Algorithm,
    pub trials: usize,
    pub failures: usize,
    pub converged_fraction: f64,
    pub grl_median: f64,
    pub grl_q1: f64,
    pub grl_q3: f64,
    pub grl_mean: f64,
    pub iterations_median: f64,
    pub iterations_iqr: f64,
    pub iterations_mean: f64,
}

/// Per-(grid point, algorithm) medians, quartiles and means. Failed runs count
/// in `failures` and are left out of the GRL and iteration statistics.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, Algorithm)> = rows.iter().map(|r| (r.grid_index, r.algorithm)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(gi, algo)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.grid_index == gi && r.algorithm == algo)
                .collect();
            let ok: Vec<&SweepRow> = group.iter().copied().filter(|r| r.grl.is_some()).collect();
            let mut grl: Vec<f64> = ok.iter().filter_map(|r| r.grl).collect();
            grl.sort_by(f64::total_cmp);
            let mut iters: Vec<f64> = ok.iter().map(|r| r.iterations as f64).collect();
            iters.sort_by(f64::total_cmp);
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            SummaryRow {
                design: group[0].design,
                grid_value: group[0].grid_value,
                algorithm: algo,
                trials: group.len(),
                failures: group.len() - ok.len(),
                converged_fraction: group.iter().filter(|r| r.converged).count() as f64 / group.len() as f64,
                grl_median: quantile(&grl, 0.5),
                grl_q1: quantile(&grl, 0.25),
                grl_q3: quantile(&grl, 0.75),
                grl_mean: mean(&grl),
                iterations_median: quantile(&iters, 0.5),
                iterations_iqr: quantile(&iters, 0.75) - quantile(&iters, 0.25),
                iterations_mean: mean(&iters),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(out: W, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for s in summary {
        w.write_record([
            s.design.name().to_string(),
            s.grid_value.to_string(),
            s.algorithm.name().to_string(),
            s.trials.to_string(),
            s.failures.to_string(),
            s.converged_fraction.to_string(),
            s.grl_median.to_string(),
            s.grl_q1.to_string(),
            s.grl_q3.to_string(),
            (s.grl_q3 - s.grl_q1).to_string(),
            s.grl_mean.to_string(),
            s.iterations_median.to_string(),
            s.iterations_iqr.to_string(),
            s.iterations_mean.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Output of the weight-trajectory experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryReport {
    pub deltas: Vec<f64>,
    /// Full history of the first trial.
    pub first_run: RunResult,
    /// Final `μ_k` of every successful trial.
    pub final_weights: Vec<Vec<f64>>,
    pub failures: usize,
}

impl TrajectoryReport {
    /// Final weights averaged over trials.
    pub fn mean_final_weights(&self) -> Vec<f64> {
        let k = self.deltas.len();
        let n = self.final_weights.len() as f64;
        (0..k)
            .map(|i| self.final_weights.iter().map(|w| w[i]).sum::<f64>() / n)
            .collect()
    }
}

/// Runs the soft solver with trajectory logging on `trials` independent draws
/// of the per-matrix noise design `spec.grid` (`δ_k`).
pub fn trajectory(spec: &ExperimentSpec, exec: Execution) -> Result<TrajectoryReport> {
    let spec = ExperimentSpec {
        design: Design::Trajectory,
        ..spec.clone()
    };
    spec.validate()?;
    let config = SolverConfig {
        record_trajectory: true,
        weighting: Weighting::Soft,
        ..spec.solver.clone()
    };
    let one = |trial: usize| -> Result<RunResult> {
        let targets = synthesize(&spec.cell_spec(0, trial)?)?;
        let mut res = solver::run(&targets, &config)?;
        if trial > 0 {
            res.trajectory = None;
        }
        Ok(res)
    };
    let runs: Vec<Result<RunResult>> = if exec.parallel {
        (0..spec.trials).into_par_iter().map(one).collect()
    } else {
        (0..spec.trials).map(one).collect()
    };
    let mut runs = runs.into_iter();
    let first_run = runs.next().expect("trials >= 1")?;
    let mut final_weights = vec![first_run.final_state.weights.clone()];
    let mut failures = 0;
    for r in runs {
        match r {
            Ok(res) => final_weights.push(res.final_state.weights),
            Err(_) => failures += 1,
        }
    }
    Ok(TrajectoryReport {
        deltas: spec.grid.clone(),
        first_run,
        final_weights,
        failures,
    })
}

pub fn trajectory_columns(k: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "sigma2".to_string(), "cost".to_string()];
    cols.extend((1..=k).map(|i| format!("mu_{i}")));
    cols
}

pub fn write_trajectory<W: Write>(out: W, run: &RunResult) -> Result<()> {
    let records = run
        .trajectory
        .as_ref()
        .ok_or_else(|| Error::Spec("run has no recorded trajectory".into()))?;
    let k = run.final_state.weights.len();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_columns(k)).map_err(csv_err)?;
    for rec in records {
        let mut row = vec![rec.t.to_string(), rec.sigma2.to_string(), rec.cost.to_string()];
        row.extend(rec.weights.iter().map(f64::to_string));
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const FINAL_WEIGHT_COLUMNS: [&str; 3] = ["k", "delta", "mean_final_mu"];

pub fn write_final_weights<W: Write>(out: W, report: &TrajectoryReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FINAL_WEIGHT_COLUMNS).map_err(csv_err)?;
    for (k, (delta, mu)) in report.deltas.iter().zip(report.mean_final_weights()).enumerate() {
        w.write_record([(k + 1).to_string(), delta.to_string(), mu.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// The 13-matrix noise design: five matrices at `δ = 0.01`, five at `0.02`,
/// then `δ = 1, 2, 3`.
pub fn thirteen_matrix_deltas() -> Vec<f64> {
    let mut d = vec![0.01; 5];
    d.extend([0.02; 5]);
    d.extend([1.0, 2.0, 3.0]);
    d
}
