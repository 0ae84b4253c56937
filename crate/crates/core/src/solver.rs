//! Soft decision-directed joint diagonalization.
//!
//! Fits `R_k ≈ A·Diag(d_k)·Aᴴ` by maximizing `J = log Σ_k exp(−e_k / 2σ²)`, where
//! `e_k` is the squared Frobenius residual of matrix `k`. The fit alternates two
//! stages: a mixing-matrix step that zeroes a linearization of the conjugate
//! gradient (`A·C = B`, with softmax weights `μ_k`), and an exact least-squares
//! step for the diagonals given `A`. `σ²` tracks the `μ`-weighted mean residual.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matrixset::{CMatrix, DiagonalSet, TargetSet};

/// Reciprocal condition below which `C` is regularized before solving.
const RIDGE_TRIGGER_RCOND: f64 = 1e-12;
/// Reciprocal condition below which `H` is treated as singular.
const SINGULAR_H_RCOND: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Soft,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Stop once `‖A_t − A_{t−1}‖_F` drops below this.
    pub epsilon: f64,
    pub t_max: usize,
    /// Mixing updates per outer iteration before the diagonals are refit.
    pub inner_a_updates: usize,
    /// `σ²` never drops below this fraction of the mean `‖R_k‖²_F`.
    pub sigma2_floor_rel: f64,
    /// Tikhonov ridge, relative to `trace(C)/N`, applied when `C` is near singular.
    pub ridge_rel: f64,
    pub weighting: Weighting,
    pub rebalance_columns: bool,
    pub record_trajectory: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            t_max: 1500,
            inner_a_updates: 1,
            sigma2_floor_rel: 1e-12,
            ridge_rel: 1e-10,
            weighting: Weighting::Soft,
            rebalance_columns: true,
            record_trajectory: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Spec(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.t_max < 1 {
            return Err(Error::Spec("t_max must be at least 1".into()));
        }
        if self.inner_a_updates < 1 {
            return Err(Error::Spec("inner_a_updates must be at least 1".into()));
        }
        if !(self.sigma2_floor_rel > 0.0) || !(self.ridge_rel > 0.0) {
            return Err(Error::Spec("sigma2_floor_rel and ridge_rel must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub residuals: Vec<f64>,
    pub weights: Vec<f64>,
    pub sigma2: f64,
    pub iteration: usize,
}

/// One row of the optimization history. Row 0 is the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    /// Weights used for the first mixing update of this iteration.
    pub weights: Vec<f64>,
    pub sigma2: f64,
    /// `J` at the end of the iteration.
    pub cost: f64,
    pub step: f64,
    /// `Σ μ_k e_k` just before and just after the diagonal refit.
    pub d_step_objective: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub a_hat: CMatrix,
    pub d_hat: DiagonalSet,
    pub converged: bool,
    pub iterations: usize,
    pub final_state: SolverState,
    pub trajectory: Option<Vec<IterationRecord>>,
}

fn check_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::Dimension(format!("{} weights for {k} matrices", weights.len())));
    }
    Ok(())
}

fn check_mixing(a: &CMatrix, targets: &TargetSet, d: &DiagonalSet) -> Result<()> {
    if a.shape() != (targets.m(), d.n()) {
        return Err(Error::Dimension(format!(
            "mixing matrix is {:?}, expected ({}, {})",
            a.shape(),
            targets.m(),
            d.n()
        )));
    }
    if d.k() != targets.k() {
        return Err(Error::Dimension(format!("{} diagonals for {} matrices", d.k(), targets.k())));
    }
    Ok(())
}

/// `A` with column `n` multiplied by `d[n]`.
fn scale_columns(a: &CMatrix, d: &[Complex64]) -> CMatrix {
    let mut out = a.clone();
    for (mut col, lambda) in out.column_iter_mut().zip(d) {
        col *= *lambda;
    }
    out
}

/// `‖R − A·Diag(d)·Aᴴ‖²_F`.
pub fn residual(r: &CMatrix, a: &CMatrix, d: &[Complex64]) -> Result<f64> {
    if r.nrows() != r.ncols() || r.nrows() != a.nrows() || a.ncols() != d.len() {
        return Err(Error::Dimension(format!(
            "residual: R {:?}, A {:?}, d {}",
            r.shape(),
            a.shape(),
            d.len()
        )));
    }
    let model = scale_columns(a, d) * a.adjoint();
    Ok((r - model).norm_squared())
}

pub fn residuals(a: &CMatrix, d: &DiagonalSet, targets: &TargetSet) -> Result<Vec<f64>> {
    check_mixing(a, targets, d)?;
    targets
        .matrices()
        .iter()
        .enumerate()
        .map(|(k, r)| residual(r, a, d.d(k).as_slice()))
        .collect()
}

/// Softmax weights `μ_k ∝ exp(−e_k / 2σ²)`, shifted by `min e` so nothing overflows.
pub fn compute_weights(residuals: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Numeric(format!("sigma2 = {sigma2} must be positive and finite")));
    }
    if let Some(bad) = residuals.iter().find(|e| !e.is_finite()) {
        return Err(Error::Numeric(format!("residual {bad}")));
    }
    let e_min = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = residuals
        .iter()
        .map(|e| (-(e - e_min) / (2.0 * sigma2)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `max(Σ μ_k e_k, floor)`.
pub fn update_sigma2(weights: &[f64], residuals: &[f64], floor: f64) -> f64 {
    weighted_sum(weights, residuals).max(floor)
}

fn weighted_sum(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

/// `σ²` floor: `rel` times the mean squared Frobenius norm of the targets.
pub fn sigma2_floor(targets: &TargetSet, rel: f64) -> f64 {
    let mean = targets.matrices().iter().map(|r| r.norm_squared()).sum::<f64>() / targets.k() as f64;
    let floor = rel * mean;
    if floor > 0.0 {
        floor
    } else {
        f64::MIN_POSITIVE
    }
}

/// `C(A) = Σ μ_k (D_k* AᴴA D_k + D_k AᴴA D_k*)`.
///
/// Entry `(i, j)` is `(AᴴA)_ij · 2 Σ_k μ_k Re(conj(λ_ki) λ_kj)`, so `C` is a
/// Hadamard product of the Gram matrix with a real symmetric weight matrix.
pub fn build_c(a: &CMatrix, d: &DiagonalSet, weights: &[f64]) -> Result<CMatrix> {
    check_weights(weights, d.k())?;
    if a.ncols() != d.n() {
        return Err(Error::Dimension(format!("A has {} columns, d has {}", a.ncols(), d.n())));
    }
    let n = d.n();
    let lam = d.as_matrix();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for (k, mu) in weights.iter().enumerate() {
        for j in 0..n {
            for i in 0..n {
                w[(i, j)] += 2.0 * mu * (lam[(i, k)].conj() * lam[(j, k)]).re;
            }
        }
    }
    let gram = a.adjoint() * a;
    Ok(gram.zip_map(&w, |g, w| g * w))
}

/// `B(A) = Σ μ_k (R_kᴴ A D_k + R_k A D_k*)`.
pub fn build_b(a: &CMatrix, targets: &TargetSet, d: &DiagonalSet, weights: &[f64]) -> Result<CMatrix> {
    check_mixing(a, targets, d)?;
    check_weights(weights, targets.k())?;
    let mut b = CMatrix::zeros(a.nrows(), a.ncols());
    for (k, (r, mu)) in targets.matrices().iter().zip(weights).enumerate() {
        if *mu == 0.0 {
            continue;
        }
        let dk = d.d(k);
        let dk_conj: Vec<Complex64> = dk.iter().map(|z| z.conj()).collect();
        let term = scale_columns(&(r.adjoint() * a), dk.as_slice()) + scale_columns(&(r * a), &dk_conj);
        b += term * Complex64::from(*mu);
    }
    Ok(b)
}

fn hermitian_rcond(c: &CMatrix) -> (f64, f64) {
    let eig = SymmetricEigen::new(c.clone()).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    (min.max(0.0) / max, max)
}

/// Linearized stationary-point step: solves `A·C(A_prev) = B(A_prev)` for `A`.
///
/// `C` is Hermitian positive semidefinite, so the system is solved as
/// `C·Aᴴ = Bᴴ` by Cholesky. When the reciprocal condition of `C` falls below
/// `1e-12`, `ridge_rel · trace(C)/N` is added to its diagonal first.
pub fn update_mixing(
    a_prev: &CMatrix,
    targets: &TargetSet,
    d: &DiagonalSet,
    weights: &[f64],
    ridge_rel: f64,
) -> Result<CMatrix> {
    let mut c = build_c(a_prev, d, weights)?;
    let b = build_b(a_prev, targets, d, weights)?;
    let n = c.nrows();

    let (rcond, max_eig) = hermitian_rcond(&c);
    if !(max_eig > 0.0 && max_eig.is_finite()) {
        return Err(Error::DegenerateModel(format!(
            "C has largest eigenvalue {max_eig}; the diagonals carry no information"
        )));
    }
    if !(rcond >= RIDGE_TRIGGER_RCOND) {
        let trace: f64 = c.diagonal().iter().map(|z| z.re).sum();
        let lambda = ridge_rel * trace / n as f64;
        for i in 0..n {
            c[(i, i)] += lambda;
        }
    }
    let chol = Cholesky::new(c).ok_or_else(|| {
        Error::DegenerateModel("C is not positive definite after regularization".into())
    })?;
    let a = chol.solve(&b.adjoint()).adjoint();
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::DegenerateModel("mixing update produced non-finite entries".into()));
    }
    Ok(a)
}

/// `H = (AᴴA) ∘ (AᴴA)*`, the real Gram matrix of `khatri_rao(conj(A), A)`.
pub fn gram_h(a: &CMatrix) -> DMatrix<f64> {
    (a.adjoint() * a).map(|g| g.norm_sqr())
}

/// Exact least-squares diagonals for fixed `A`: `d_k = H⁻¹ b_k` with
/// `b_k,n = a_nᴴ R_k a_n`, using one factorization of `H` for all `k`.
pub fn update_diagonals(a: &CMatrix, targets: &TargetSet) -> Result<DiagonalSet> {
    if a.nrows() != targets.m() || a.ncols() > a.nrows() {
        return Err(Error::Dimension(format!(
            "mixing matrix is {:?} for {}x{} targets",
            a.shape(),
            targets.m(),
            targets.m()
        )));
    }
    let n = a.ncols();
    let h = gram_h(a);

    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let max = eig.max();
    if !(max > 0.0 && max.is_finite()) || eig.min() < SINGULAR_H_RCOND * max {
        return Err(Error::DegenerateMixing(format!(
            "H is singular (eigenvalues in [{:e}, {:e}])",
            eig.min(),
            max
        )));
    }
    let chol = Cholesky::new(h)
        .ok_or_else(|| Error::DegenerateMixing("H is not positive definite".into()))?;

    let k = targets.k();
    let mut rhs_re = DMatrix::<f64>::zeros(n, k);
    let mut rhs_im = DMatrix::<f64>::zeros(n, k);
    for (kk, r) in targets.matrices().iter().enumerate() {
        let ra = r * a;
        for j in 0..n {
            let b = a.column(j).dotc(&ra.column(j));
            rhs_re[(j, kk)] = b.re;
            rhs_im[(j, kk)] = b.im;
        }
    }
    let x_re = chol.solve(&rhs_re);
    let x_im = chol.solve(&rhs_im);
    Ok(DiagonalSet::from_columns(x_re.zip_map(&x_im, Complex64::new)))
}

/// `log Σ_k exp(−e_k / 2σ²)`, evaluated with the exponent shifted by `min e`.
pub fn log_sum_exp_cost(residuals: &[f64], sigma2: f64) -> f64 {
    let e_min = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = residuals
        .iter()
        .map(|e| (-(e - e_min) / (2.0 * sigma2)).exp())
        .sum();
    s.ln() - e_min / (2.0 * sigma2)
}

/// The criterion `J(A, {D_k})` at a fixed `σ²`.
pub fn cost(a: &CMatrix, d: &DiagonalSet, targets: &TargetSet, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Numeric(format!("sigma2 = {sigma2} must be positive")));
    }
    Ok(log_sum_exp_cost(&residuals(a, d, targets)?, sigma2))
}

/// Conjugate gradient `∂J/∂A* = −(1/2σ²)(A·C(A) − B(A))`, with `μ` taken at `A`.
pub fn gradient(a: &CMatrix, d: &DiagonalSet, targets: &TargetSet, sigma2: f64) -> Result<CMatrix> {
    let mu = compute_weights(&residuals(a, d, targets)?, sigma2)?;
    let c = build_c(a, d, &mu)?;
    let b = build_b(a, targets, d, &mu)?;
    Ok((a * c - b) * Complex64::from(-0.5 / sigma2))
}

/// Rescales each column of `A` to unit norm and moves the scale into the
/// diagonals (`λ_kn ← s_n² λ_kn`), leaving every `A·D_k·Aᴴ` unchanged.
pub fn rebalance(a: &CMatrix, d: &DiagonalSet) -> Result<(CMatrix, DiagonalSet)> {
    if a.ncols() != d.n() {
        return Err(Error::Dimension(format!("A has {} columns, d has {}", a.ncols(), d.n())));
    }
    let mut a = a.clone();
    let mut d = d.clone();
    for (n, mut col) in a.column_iter_mut().enumerate() {
        let s = col.norm();
        if s == 0.0 || !s.is_finite() {
            return Err(Error::DegenerateMixing(format!("column {n} of A has norm {s}")));
        }
        col.unscale_mut(s);
        d.as_matrix_mut().row_mut(n).scale_mut(s * s);
    }
    Ok((a, d))
}

/// How the per-matrix weights are chosen at each step.
#[derive(Clone, Debug)]
pub(crate) enum WeightRule {
    Soft,
    Fixed(Vec<f64>),
}

impl WeightRule {
    fn initial(&self, k: usize) -> Vec<f64> {
        match self {
            WeightRule::Soft => vec![1.0 / k as f64; k],
            WeightRule::Fixed(w) => w.clone(),
        }
    }

    fn weights(&self, residuals: &[f64], sigma2: f64) -> Result<Vec<f64>> {
        match self {
            WeightRule::Soft => compute_weights(residuals, sigma2),
            WeightRule::Fixed(w) => Ok(w.clone()),
        }
    }
}

/// Runs the alternating fit from `A₀ = I_{M×N}`.
pub fn run(targets: &TargetSet, config: &SolverConfig) -> Result<RunResult> {
    let rule = match config.weighting {
        Weighting::Soft => WeightRule::Soft,
        Weighting::Uniform => WeightRule::Fixed(vec![1.0 / targets.k() as f64; targets.k()]),
    };
    run_with_rule(targets, config, &rule)
}

pub(crate) fn run_with_rule(targets: &TargetSet, config: &SolverConfig, rule: &WeightRule) -> Result<RunResult> {
    config.validate()?;
    let (m, n, k) = (targets.m(), targets.n(), targets.k());
    if n > m {
        return Err(Error::Spec(format!("N = {n} exceeds M = {m}")));
    }
    let floor = sigma2_floor(targets, config.sigma2_floor_rel);

    let mut a = CMatrix::identity(m, n);
    let mut d = update_diagonals(&a, targets).map_err(|e| e.at(0))?;
    let mut e = residuals(&a, &d, targets)?;
    let mut mu = rule.initial(k);
    let mut sigma2 = update_sigma2(&mu, &e, floor);

    let mut trajectory = config.record_trajectory.then(|| {
        vec![IterationRecord {
            t: 0,
            weights: mu.clone(),
            sigma2,
            cost: log_sum_exp_cost(&e, sigma2),
            step: 0.0,
            d_step_objective: None,
        }]
    });

    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=config.t_max {
        let step_result = (|| -> Result<(f64, Vec<f64>, (f64, f64))> {
            mu = rule.weights(&e, sigma2)?;
            sigma2 = update_sigma2(&mu, &e, floor);
            let logged = mu.clone();

            let a_prev = a.clone();
            for _ in 0..config.inner_a_updates {
                a = update_mixing(&a, targets, &d, &mu, config.ridge_rel)?;
                e = residuals(&a, &d, targets)?;
                mu = rule.weights(&e, sigma2)?;
            }

            let before = weighted_sum(&mu, &e);
            d = update_diagonals(&a, targets)?;
            e = residuals(&a, &d, targets)?;
            let after = weighted_sum(&mu, &e);

            if config.rebalance_columns {
                (a, d) = rebalance(&a, &d)?;
                e = residuals(&a, &d, targets)?;
            }
            Ok(((&a - &a_prev).norm(), logged, (before, after)))
        })();
        let (step, logged, d_obj) = step_result.map_err(|err| err.at(t))?;

        iterations = t;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(IterationRecord {
                t,
                weights: logged,
                sigma2,
                cost: log_sum_exp_cost(&e, sigma2),
                step,
                d_step_objective: Some(d_obj),
            });
        }
        if step < config.epsilon {
            converged = true;
            break;
        }
    }

    let weights = rule.weights(&e, sigma2).map_err(|err| err.at(iterations))?;
    Ok(RunResult {
        a_hat: a,
        d_hat: d,
        converged,
        iterations,
        final_state: SolverState {
            residuals: e,
            weights,
            sigma2,
            iteration: iterations,
        },
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrixset::{complex_normal, congruence, synthesize, CVector, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn orthonormal(rng: &mut ChaCha8Rng, m: usize, n: usize) -> CMatrix {
        complex_normal(rng, m, n).qr().q()
    }

    fn random_problem(seed: u64, m: usize, n: usize, k: usize) -> (CMatrix, DiagonalSet, TargetSet) {
        let mut r = rng(seed);
        let a = complex_normal(&mut r, m, n);
        let d = DiagonalSet::from_columns(complex_normal(&mut r, n, k));
        let mats = (0..k).map(|_| complex_normal(&mut r, m, m)).collect();
        (a, d, TargetSet::new(mats, n).unwrap())
    }

    fn exact_problem(seed: u64, m: usize, n: usize, k: usize) -> (CMatrix, DiagonalSet, TargetSet) {
        let mut r = rng(seed);
        let a = complex_normal(&mut r, m, n);
        let d = DiagonalSet::from_columns(complex_normal(&mut r, n, k));
        let mats = (0..k).map(|kk| congruence(&a, &d.d(kk).into_owned())).collect();
        (a, d, TargetSet::new(mats, n).unwrap())
    }

    fn random_weights(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        use rand::Rng;
        let w: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    fn diag(d: &[Complex64]) -> CMatrix {
        CMatrix::from_diagonal(&CVector::from_column_slice(d))
    }

    #[test]
    fn residual_cases() {
        let (a, d, ts) = exact_problem(1, 4, 3, 3);
        for k in 0..3 {
            assert!(residual(&ts.matrices()[k], &a, d.d(k).as_slice()).unwrap() < 1e-24);
        }
        let r = &ts.matrices()[0];
        let zero = CMatrix::zeros(4, 3);
        assert!((residual(r, &zero, d.d(0).as_slice()).unwrap() - r.norm_squared()).abs() < 1e-12);

        let (a, d, ts) = random_problem(2, 4, 3, 2);
        let r = &ts.matrices()[1];
        let dk = d.d(1);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let mut model = c(0.0);
                for n in 0..3 {
                    model += a[(i, n)] * dk[n] * a[(j, n)].conj();
                }
                oracle += (r[(i, j)] - model).norm_sqr();
            }
        }
        let got = residual(r, &a, dk.as_slice()).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
        assert!(matches!(residual(r, &a, &[c(1.0)]), Err(Error::Dimension(_))));
    }

    #[test]
    fn weights_examples() {
        let w = compute_weights(&[3.0; 5], 0.7).unwrap();
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-15));

        let s2 = 0.37;
        let w = compute_weights(&[0.0, 2.0 * s2 * 3f64.ln()], s2).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-14 && (w[1] - 0.25).abs() < 1e-14);

        let w = compute_weights(&[0.0, 200.0 * s2], s2).unwrap();
        assert!(w[1] <= 1e-40);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        // huge residuals do not underflow to 0/0
        let w = compute_weights(&[1e300, 1e300 + 1e285], 1.0).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weights_reject_bad_input() {
        assert!(matches!(compute_weights(&[1.0, f64::NAN], 1.0), Err(Error::Numeric(_))));
        assert!(matches!(compute_weights(&[1.0, f64::INFINITY], 1.0), Err(Error::Numeric(_))));
        assert!(compute_weights(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn sigma2_examples() {
        assert!((update_sigma2(&[0.25; 4], &[1.0, 2.0, 3.0, 6.0], 1e-12) - 3.0).abs() < 1e-15);
        assert_eq!(update_sigma2(&[0.5, 0.5], &[0.0, 0.0], 1e-9), 1e-9);
        assert!((update_sigma2(&[0.75, 0.25], &[1.0, 3.0], 1e-12) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn cost_examples() {
        assert!((log_sum_exp_cost(&[0.0; 6], 2.0) - 6f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp_cost(&[3.0], 0.5) + 3.0).abs() < 1e-15);
        let s2 = 1.3;
        let got = log_sum_exp_cost(&[0.0, 2.0 * s2 * 3f64.ln()], s2);
        assert!((got - (4.0f64 / 3.0).ln()).abs() < 1e-14);
        // shifted form stays finite where the naive sum underflows
        assert!((log_sum_exp_cost(&[2000.0, 2000.0], 1.0) - (2f64.ln() - 1000.0)).abs() < 1e-12);
    }

    #[test]
    fn build_c_orthonormal_single_matrix() {
        let mut r = rng(4);
        let a = orthonormal(&mut r, 5, 3);
        let dv = [c(0.5), c(-2.0), c(3.0)];
        let d = DiagonalSet::from_columns(CMatrix::from_column_slice(3, 1, &dv));
        let got = build_c(&a, &d, &[1.0]).unwrap();
        let expect = diag(&dv.map(|x| x * x * 2.0));
        assert!((got - expect).norm() < 1e-13);

        let zero = DiagonalSet::zeros(3, 4);
        assert_eq!(build_c(&a, &zero, &[0.25; 4]).unwrap(), CMatrix::zeros(3, 3));
    }

    #[test]
    fn build_c_matches_term_oracle() {
        let (a, d, _) = random_problem(5, 5, 4, 3);
        let w = random_weights(&mut rng(6), 3);
        let gram = a.adjoint() * &a;
        let mut oracle = CMatrix::zeros(4, 4);
        for k in 0..3 {
            let dk = diag(d.d(k).as_slice());
            let dk_conj = dk.map(|z| z.conj());
            oracle += (&dk_conj * &gram * &dk + &dk * &gram * &dk_conj) * c(w[k]);
        }
        let got = build_c(&a, &d, &w).unwrap();
        assert!((&got - &oracle).norm() <= 1e-12 * oracle.norm());
        assert!((&got - got.adjoint()).norm() <= 1e-12 * got.norm());
    }

    #[test]
    fn build_b_cases() {
        let (a, d, ts) = exact_problem(7, 5, 3, 4);
        let w = random_weights(&mut rng(8), 4);
        let b = build_b(&a, &ts, &d, &w).unwrap();
        let ac = &a * build_c(&a, &d, &w).unwrap();
        assert!((&b - &ac).norm() <= 1e-10 * ac.norm());

        let zeros = TargetSet::new(vec![CMatrix::zeros(5, 5); 4], 3).unwrap();
        assert_eq!(build_b(&a, &zeros, &d, &w).unwrap(), CMatrix::zeros(5, 3));

        let (a, d, ts) = random_problem(9, 4, 3, 3);
        let mut oracle = CMatrix::zeros(4, 3);
        for k in 0..3 {
            let r = &ts.matrices()[k];
            let dk = diag(d.d(k).as_slice());
            oracle += (r.adjoint() * &a * &dk + r * &a * dk.map(|z| z.conj())) * c(w[k % 4]);
        }
        let got = build_b(&a, &ts, &d, &w[..3]).unwrap();
        assert!((got - &oracle).norm() <= 1e-12 * oracle.norm());
        assert!(matches!(build_b(&a, &ts, &d, &w), Err(Error::Dimension(_))));
    }

    #[test]
    fn mixing_fixed_point_on_exact_data() {
        let (a, d, ts) = exact_problem(10, 6, 4, 5);
        let mut r = rng(11);
        for _ in 0..5 {
            let w = random_weights(&mut r, 5);
            let next = update_mixing(&a, &ts, &d, &w, 1e-10).unwrap();
            assert!((next - &a).norm() <= 1e-10 * a.norm());
        }
    }

    #[test]
    fn mixing_identity_on_diagonal_targets() {
        let mut r = rng(12);
        let mats: Vec<CMatrix> = (0..4)
            .map(|_| CMatrix::from_diagonal(&complex_normal(&mut r, 3, 1).column(0).into_owned()))
            .collect();
        let d = DiagonalSet::from_vectors(3, &mats.iter().map(|m| m.diagonal()).collect::<Vec<_>>()).unwrap();
        let ts = TargetSet::new(mats, 3).unwrap();
        let a = update_mixing(&CMatrix::identity(3, 3), &ts, &d, &[0.25; 4], 1e-10).unwrap();
        assert!((a - CMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn mixing_matches_generic_solver() {
        let (a, d, ts) = random_problem(13, 5, 3, 4);
        let w = random_weights(&mut rng(14), 4);
        let c_mat = build_c(&a, &d, &w).unwrap();
        let b = build_b(&a, &ts, &d, &w).unwrap();
        // A·C = B  ⇔  Cᵀ·Aᵀ = Bᵀ, solved by LU
        let oracle = c_mat.transpose().lu().solve(&b.transpose()).unwrap().transpose();
        let got = update_mixing(&a, &ts, &d, &w, 1e-10).unwrap();
        assert!((&got - &oracle).norm() <= 1e-10 * oracle.norm());
    }

    #[test]
    fn mixing_degenerate_without_diagonals() {
        let (a, _, ts) = random_problem(15, 4, 3, 3);
        let d = DiagonalSet::zeros(3, 3);
        let err = update_mixing(&a, &ts, &d, &[1.0 / 3.0; 3], 1e-10).unwrap_err();
        assert!(matches!(err, Error::DegenerateModel(_)));
    }

    #[test]
    fn mixing_ridge_handles_rank_deficient_c() {
        // one source never active: C has a zero row/column
        let (a, mut d, ts) = random_problem(16, 4, 3, 3);
        d.as_matrix_mut().row_mut(2).fill(c(0.0));
        let next = update_mixing(&a, &ts, &d, &[1.0 / 3.0; 3], 1e-10).unwrap();
        assert!(next.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
    }

    #[test]
    fn diagonals_identity_and_orthonormal() {
        let (_, _, ts) = random_problem(17, 4, 4, 3);
        let d = update_diagonals(&CMatrix::identity(4, 4), &ts).unwrap();
        for k in 0..3 {
            assert!((d.d(k) - ts.matrices()[k].diagonal()).norm() < 1e-14);
        }

        let a = orthonormal(&mut rng(18), 4, 2);
        assert!((gram_h(&a) - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        let d = update_diagonals(&a, &ts).unwrap();
        for k in 0..3 {
            for n in 0..2 {
                let expect = a.column(n).dotc(&(&ts.matrices()[k] * a.column(n)));
                assert!((d.d(k)[n] - expect).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn diagonals_match_vectorized_least_squares() {
        let (a, _, ts) = random_problem(19, 5, 3, 4);
        let d = update_diagonals(&a, &ts).unwrap();
        let kr = crate::matrixset::khatri_rao(&a.map(|z| z.conj()), &a).unwrap();
        let normal = kr.adjoint() * &kr;
        for k in 0..4 {
            let rhs = kr.adjoint() * crate::matrixset::vec(&ts.matrices()[k]);
            let oracle = normal.clone().lu().solve(&rhs).unwrap();
            assert!((d.d(k) - &oracle).norm() <= 1e-8 * oracle.norm());
        }
    }

    #[test]
    fn diagonals_reject_collinear_columns() {
        let mut r = rng(20);
        let mut a = complex_normal(&mut r, 4, 3);
        let col = a.column(0) * Complex64::new(0.0, 2.0);
        a.set_column(2, &col);
        let (_, _, ts) = random_problem(21, 4, 3, 2);
        assert!(matches!(update_diagonals(&a, &ts), Err(Error::DegenerateMixing(_))));
    }

    #[test]
    fn diagonals_minimize_each_residual() {
        use rand::Rng;
        let (a, _, ts) = random_problem(22, 5, 3, 3);
        let d = update_diagonals(&a, &ts).unwrap();
        let mut r = rng(23);
        for k in 0..3 {
            let best = residual(&ts.matrices()[k], &a, d.d(k).as_slice()).unwrap();
            for _ in 0..100 {
                let mut dir = complex_normal(&mut r, 3, 1).column(0).into_owned();
                dir.unscale_mut(dir.norm() / 1e-3);
                let scale: f64 = r.random_range(0.5..1.0);
                let moved = d.d(k) + dir * c(scale);
                assert!(residual(&ts.matrices()[k], &a, moved.as_slice()).unwrap() >= best);
            }
        }
    }

    #[test]
    fn h_is_symmetric_psd() {
        for seed in 0..20 {
            let a = complex_normal(&mut rng(100 + seed), 6, 4);
            let h = gram_h(&a);
            assert!((&h - h.transpose()).norm() <= 1e-12 * h.norm());
            let eig = SymmetricEigen::new(h.clone()).eigenvalues;
            assert!(eig.min() >= -1e-10 * h.trace());
        }
    }

    #[test]
    fn rebalance_cases() {
        let (a, d, ts) = random_problem(24, 4, 3, 3);
        let unit = crate::matrixset::normalize_columns(&a).unwrap();
        let (a2, d2) = rebalance(&unit, &d).unwrap();
        assert!((&a2 - &unit).norm() < 1e-15);
        assert!((d2.as_matrix() - d.as_matrix()).norm() < 1e-14);

        let mut doubled = unit.clone();
        doubled.column_mut(1).scale_mut(2.0);
        let mut quarter = d.clone();
        quarter.as_matrix_mut().row_mut(1).scale_mut(0.25);
        let before = residuals(&doubled, &quarter, &ts).unwrap();
        let (a3, d3) = rebalance(&doubled, &quarter).unwrap();
        let after = residuals(&a3, &d3, &ts).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() <= 1e-13 * x.max(1.0));
        }

        let before = residuals(&a, &d, &ts).unwrap();
        let (a4, d4) = rebalance(&a, &d).unwrap();
        for (x, y) in before.iter().zip(residuals(&a4, &d4, &ts).unwrap()) {
            assert!((x - y).abs() <= 1e-12 * x);
        }

        let mut zero_col = a.clone();
        zero_col.column_mut(0).fill(c(0.0));
        assert!(matches!(rebalance(&zero_col, &d), Err(Error::DegenerateMixing(_))));
    }

    #[test]
    fn run_recovers_noise_free_mixing() {
        let ts = synthesize(&SynthSpec::new(5, 5, 10, 0.0, 0.0, 3)).unwrap();
        let cfg = SolverConfig {
            epsilon: 1e-6,
            ..Default::default()
        };
        let res = run(&ts, &cfg).unwrap();
        assert!(res.converged);
        let g = crate::metrics::gain(&res.a_hat, &ts.truth().unwrap().a).unwrap();
        assert!(crate::metrics::grl(&g).unwrap() < 1e-6);
    }

    #[test]
    fn run_stops_quickly_on_diagonal_targets() {
        let mut r = rng(25);
        let mats: Vec<CMatrix> = (0..5)
            .map(|_| CMatrix::from_diagonal(&complex_normal(&mut r, 4, 1).column(0).into_owned()))
            .collect();
        let ts = TargetSet::new(mats, 4).unwrap();
        let res = run(&ts, &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 2);
        assert!((res.a_hat - CMatrix::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn run_symmetric_pair_keeps_equal_weights() {
        let (_, _, ts) = exact_problem(26, 3, 3, 2);
        let r0 = ts.matrices()[0].clone();
        let ts = TargetSet::new(vec![r0.clone(), r0], 3).unwrap();
        let cfg = SolverConfig {
            record_trajectory: true,
            t_max: 50,
            ..Default::default()
        };
        let res = run(&ts, &cfg).unwrap();
        let tr = res.trajectory.unwrap();
        assert_eq!(tr.len(), res.iterations + 1);
        for rec in &tr {
            assert_eq!(rec.weights, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn run_rejects_bad_config() {
        let (_, _, ts) = random_problem(27, 3, 2, 3);
        for cfg in [
            SolverConfig { epsilon: 0.0, ..Default::default() },
            SolverConfig { t_max: 0, ..Default::default() },
            SolverConfig { inner_a_updates: 0, ..Default::default() },
        ] {
            assert!(matches!(run(&ts, &cfg), Err(Error::Spec(_))));
        }
    }

    #[test]
    fn run_errors_carry_iteration() {
        // rank-one targets cannot support three sources
        let mut r = rng(28);
        let v = complex_normal(&mut r, 3, 1);
        let rank_one = &v * v.adjoint();
        let ts = TargetSet::new(vec![rank_one.clone(), rank_one * c(2.0)], 3).unwrap();
        match run(&ts, &SolverConfig::default()) {
            Ok(res) => assert!(res.a_hat.iter().all(|z| z.re.is_finite())),
            Err(e) => {
                assert!(matches!(e, Error::AtIteration { .. }));
                assert!(e.is_degeneracy());
            }
        }
    }
}
