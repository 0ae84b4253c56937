//! Complex matrix primitives and the synthetic target-set generator.
//!
//! Random draws use ChaCha8 seeded with `seed_from_u64(seed)`. Each consumer gets
//! its own stream via `set_stream`:
//!
//! * stream 0: the mixing matrix `A_true`
//! * stream 1: selection of outlier indices
//! * stream `2 + k`: matrix `k` (its diagonal `D_k`, noise `ΔR_k`, then the
//!   replacement matrix when `k` is an outlier)
//!
//! so adding matrices or changing the outlier fraction never perturbs the draws
//! of other matrices.

use nalgebra::{DMatrix, DVector, DVectorView};
use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense double-precision complex matrix, column-major.
pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub(crate) fn check_finite(m: &CMatrix, what: &str) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has a NaN or infinite entry")))
    }
}

/// Column-wise Kronecker product: column `n` of the result is `u_n ⊗ v_n`.
pub fn khatri_rao(u: &CMatrix, v: &CMatrix) -> Result<CMatrix> {
    if u.ncols() != v.ncols() {
        return Err(Error::Dimension(format!(
            "khatri_rao: {} columns vs {} columns",
            u.ncols(),
            v.ncols()
        )));
    }
    let (m, p) = (u.nrows(), v.nrows());
    let mut out = CMatrix::zeros(m * p, u.ncols());
    for (n, mut col) in out.column_iter_mut().enumerate() {
        for i in 0..m {
            let ui = u[(i, n)];
            for j in 0..p {
                col[i * p + j] = ui * v[(j, n)];
            }
        }
    }
    Ok(out)
}

/// Column-stacking vectorization.
pub fn vec(r: &CMatrix) -> CVector {
    CVector::from_column_slice(r.as_slice())
}

/// Scales every column to unit Euclidean norm.
pub fn normalize_columns(a: &CMatrix) -> Result<CMatrix> {
    let mut out = a.clone();
    for (n, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateInput(format!("column {n} has norm {norm}")));
        }
        col.unscale_mut(norm);
    }
    Ok(out)
}

/// Noise amplitude `δ` for a noise-to-error ratio `10·log10(1/δ²)` given in dB.
pub fn ner_to_delta(ner_db: f64) -> f64 {
    10f64.powf(-ner_db / 20.0)
}

pub fn delta_to_ner(delta: f64) -> f64 {
    10.0 * (1.0 / (delta * delta)).log10()
}

/// Per-matrix diagonals `d_k`, stored as the columns of an `N × K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalSet {
    values: CMatrix,
}

impl DiagonalSet {
    pub fn from_columns(values: CMatrix) -> Self {
        Self { values }
    }

    pub fn from_vectors(n: usize, ds: &[CVector]) -> Result<Self> {
        if let Some(bad) = ds.iter().position(|d| d.len() != n) {
            return Err(Error::Dimension(format!(
                "diagonal {bad} has length {}, expected {n}",
                ds[bad].len()
            )));
        }
        Ok(Self {
            values: CMatrix::from_fn(n, ds.len(), |i, k| ds[k][i]),
        })
    }

    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            values: CMatrix::zeros(n, k),
        }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn d(&self, k: usize) -> DVectorView<'_, Complex64> {
        self.values.column(k)
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.values
    }

    pub fn as_matrix_mut(&mut self) -> &mut CMatrix {
        &mut self.values
    }
}

/// How a target matrix was produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Origin {
    Clean,
    Noisy { delta: f64 },
    Outlier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub a: CMatrix,
    pub d: DiagonalSet,
}

/// The `K` square matrices to be jointly diagonalized, plus the number of
/// sources `N` to fit and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    matrices: Vec<CMatrix>,
    n: usize,
    origin: Option<Vec<Origin>>,
    truth: Option<Truth>,
    seed: Option<u64>,
}

impl TargetSet {
    pub fn new(matrices: Vec<CMatrix>, n: usize) -> Result<Self> {
        if matrices.len() < 2 {
            return Err(Error::Spec(format!(
                "need at least 2 target matrices, got {}",
                matrices.len()
            )));
        }
        let m = matrices[0].nrows();
        for (k, r) in matrices.iter().enumerate() {
            if r.nrows() != m || r.ncols() != m {
                return Err(Error::Dimension(format!(
                    "matrix {k} is {}x{}, expected {m}x{m}",
                    r.nrows(),
                    r.ncols()
                )));
            }
            check_finite(r, &format!("target matrix {k}"))?;
        }
        if n == 0 || n > m {
            return Err(Error::Spec(format!("source count {n} must be in 1..={m}")));
        }
        Ok(Self {
            matrices,
            n,
            origin: None,
            truth: None,
            seed: None,
        })
    }

    pub fn with_origin(mut self, origin: Vec<Origin>) -> Result<Self> {
        if origin.len() != self.k() {
            return Err(Error::Dimension(format!(
                "{} origin tags for {} matrices",
                origin.len(),
                self.k()
            )));
        }
        self.origin = Some(origin);
        Ok(self)
    }

    pub fn with_truth(mut self, truth: Truth) -> Result<Self> {
        if truth.a.shape() != (self.m(), self.n) {
            return Err(Error::Dimension(format!(
                "true mixing matrix is {:?}, expected ({}, {})",
                truth.a.shape(),
                self.m(),
                self.n
            )));
        }
        if truth.d.n() != self.n || truth.d.k() != self.k() {
            return Err(Error::Dimension("true diagonals do not match N x K".into()));
        }
        check_finite(&truth.a, "true mixing matrix")?;
        for (n, col) in truth.a.column_iter().enumerate() {
            if (col.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Spec(format!(
                    "true mixing column {n} has norm {}, expected 1",
                    col.norm()
                )));
            }
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn matrices(&self) -> &[CMatrix] {
        &self.matrices
    }

    pub fn m(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.matrices.len()
    }

    pub fn origin(&self) -> Option<&[Origin]> {
        self.origin.as_deref()
    }

    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn outlier_count(&self) -> usize {
        self.origin
            .as_ref()
            .map_or(0, |o| o.iter().filter(|t| **t == Origin::Outlier).count())
    }

    /// A new set holding only the matrices at `indices` (truth and tags follow).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mats = indices.iter().map(|&k| self.matrices[k].clone()).collect();
        let mut out = Self::new(mats, self.n)?;
        if let Some(origin) = &self.origin {
            out.origin = Some(indices.iter().map(|&k| origin[k]).collect());
        }
        if let Some(t) = &self.truth {
            let d = CMatrix::from_fn(self.n, indices.len(), |i, j| {
                t.d.as_matrix()[(i, indices[j])]
            });
            out.truth = Some(Truth {
                a: t.a.clone(),
                d: DiagonalSet::from_columns(d),
            });
        }
        out.seed = self.seed;
        Ok(out)
    }
}

/// Parameters of a synthetic problem `R_k = A D_k Aᴴ + δ_k ΔR_k` with outliers `R_k = ΔR_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// One value broadcast to all matrices, or exactly `k` values.
    pub noise_levels: Vec<f64>,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(m: usize, n: usize, k: usize, delta: f64, outlier_fraction: f64, seed: u64) -> Self {
        Self {
            m,
            n,
            k,
            noise_levels: vec![delta],
            outlier_fraction,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Spec(format!("M = {} must be at least 2", self.m)));
        }
        if self.n < 2 || self.n > self.m {
            return Err(Error::Spec(format!("N = {} must satisfy 2 <= N <= M = {}", self.n, self.m)));
        }
        if self.k < 2 {
            return Err(Error::Spec(format!("K = {} must be at least 2", self.k)));
        }
        if self.noise_levels.len() != 1 && self.noise_levels.len() != self.k {
            return Err(Error::Spec(format!(
                "{} noise levels given for K = {}",
                self.noise_levels.len(),
                self.k
            )));
        }
        if let Some(d) = self.noise_levels.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::Spec(format!("noise level {d} must be finite and nonnegative")));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Spec(format!(
                "outlier fraction {} must lie in [0, 1)",
                self.outlier_fraction
            )));
        }
        if self.outlier_count() >= self.k {
            return Err(Error::Spec("every matrix would be an outlier".into()));
        }
        Ok(())
    }

    pub fn delta(&self, k: usize) -> f64 {
        if self.noise_levels.len() == 1 {
            self.noise_levels[0]
        } else {
            self.noise_levels[k]
        }
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_fraction * self.k as f64).floor() as usize
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Matrix with real and imaginary parts drawn i.i.d. from N(0, 1).
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im)
    })
}

/// `A · Diag(d) · Aᴴ`.
pub fn congruence(a: &CMatrix, d: &CVector) -> CMatrix {
    let mut ad = a.clone();
    for (mut col, lambda) in ad.column_iter_mut().zip(d.iter()) {
        col *= *lambda;
    }
    ad * a.adjoint()
}

pub fn synthesize(spec: &SynthSpec) -> Result<TargetSet> {
    spec.validate()?;
    let (m, n, k) = (spec.m, spec.n, spec.k);

    let a = normalize_columns(&complex_normal(&mut stream(spec.seed, 0), m, n))?;

    let mut outliers = vec![false; k];
    for i in index::sample(&mut stream(spec.seed, 1), k, spec.outlier_count()) {
        outliers[i] = true;
    }

    let mut matrices = Vec::with_capacity(k);
    let mut origin = Vec::with_capacity(k);
    let mut diagonals = CMatrix::zeros(n, k);
    for (kk, &is_outlier) in outliers.iter().enumerate() {
        let mut rng = stream(spec.seed, 2 + kk as u64);
        let d = complex_normal(&mut rng, n, 1).column(0).into_owned();
        let noise = complex_normal(&mut rng, m, m);
        diagonals.set_column(kk, &d);

        let delta = spec.delta(kk);
        if is_outlier {
            matrices.push(complex_normal(&mut rng, m, m));
            origin.push(Origin::Outlier);
        } else if delta == 0.0 {
            matrices.push(congruence(&a, &d));
            origin.push(Origin::Clean);
        } else {
            matrices.push(congruence(&a, &d) + noise * Complex64::from(delta));
            origin.push(Origin::Noisy { delta });
        }
    }

    TargetSet::new(matrices, n)?
        .with_origin(origin)?
        .with_truth(Truth {
            a,
            d: DiagonalSet::from_columns(diagonals),
        })
        .map(|t| t.with_seed(spec.seed))
}
