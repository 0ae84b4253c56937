//! Weighted least-squares baseline: the same alternating scheme with the
//! per-matrix weights frozen to user-supplied `ω_k` instead of softmax weights.

use crate::error::{Error, Result};
use crate::matrixset::TargetSet;
use crate::solver::{run_with_rule, RunResult, SolverConfig, WeightRule};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineConfig {
    /// Positive weights, normalized to sum 1. `None` means uniform.
    pub omega: Option<Vec<f64>>,
    /// Solver settings; `weighting` is ignored.
    pub solver: SolverConfig,
}

impl BaselineConfig {
    pub fn normalized_omega(&self, k: usize) -> Result<Vec<f64>> {
        let Some(omega) = &self.omega else {
            return Ok(vec![1.0 / k as f64; k]);
        };
        if omega.len() != k {
            return Err(Error::Dimension(format!("{} weights for {k} matrices", omega.len())));
        }
        if let Some(w) = omega.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Spec(format!("weight {w} must be positive and finite")));
        }
        let total: f64 = omega.iter().sum();
        Ok(omega.iter().map(|w| w / total).collect())
    }
}

pub fn run_ls(targets: &TargetSet, config: &BaselineConfig) -> Result<RunResult> {
    let omega = config.normalized_omega(targets.k())?;
    run_with_rule(targets, &config.solver, &WeightRule::Fixed(omega))
}
