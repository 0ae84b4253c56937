//! JSON encodings of target sets and run results.
//!
//! Complex matrices are flat arrays of `[re, im]` pairs in column-major order;
//! their dimensions come from the enclosing document (`M`, `N`, `K`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrixset::{CMatrix, DiagonalSet, Origin, TargetSet, Truth};
use crate::solver::{IterationRecord, RunResult};
use num_complex::Complex64;

type Pairs = Vec<[f64; 2]>;

fn to_pairs<'a>(it: impl IntoIterator<Item = &'a Complex64>) -> Pairs {
    it.into_iter().map(|z| [z.re, z.im]).collect()
}

fn from_pairs(rows: usize, cols: usize, pairs: &[[f64; 2]], what: &str) -> Result<CMatrix> {
    if pairs.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{what}: {} entries for a {rows}x{cols} matrix",
            pairs.len()
        )));
    }
    let m = CMatrix::from_iterator(rows, cols, pairs.iter().map(|[re, im]| Complex64::new(*re, *im)));
    crate::matrixset::check_finite(&m, what)?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct TruthDoc {
    #[serde(rename = "A")]
    a: Pairs,
    #[serde(rename = "D")]
    d: Vec<Pairs>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct TargetSetDoc {
    M: usize,
    N: usize,
    K: usize,
    matrices: Vec<Pairs>,
    origin: Option<Vec<Origin>>,
    truth: Option<TruthDoc>,
    seed: Option<u64>,
}

fn diagonals_to_doc(d: &DiagonalSet) -> Vec<Pairs> {
    (0..d.k()).map(|k| to_pairs(d.d(k).iter())).collect()
}

fn diagonals_from_doc(n: usize, k: usize, doc: &[Pairs], what: &str) -> Result<DiagonalSet> {
    if doc.len() != k {
        return Err(Error::Dimension(format!("{what}: {} diagonals, expected {k}", doc.len())));
    }
    let cols: Vec<_> = doc
        .iter()
        .map(|p| from_pairs(n, 1, p, what).map(|m| m.column(0).into_owned()))
        .collect::<Result<_>>()?;
    DiagonalSet::from_vectors(n, &cols)
}

pub fn target_set_to_json(ts: &TargetSet) -> Result<String> {
    let doc = TargetSetDoc {
        M: ts.m(),
        N: ts.n(),
        K: ts.k(),
        matrices: ts.matrices().iter().map(|r| to_pairs(r.iter())).collect(),
        origin: ts.origin().map(<[Origin]>::to_vec),
        truth: ts.truth().map(|t| TruthDoc {
            a: to_pairs(t.a.iter()),
            d: diagonals_to_doc(&t.d),
        }),
        seed: ts.seed(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn target_set_from_json(text: &str) -> Result<TargetSet> {
    let doc: TargetSetDoc = serde_json::from_str(text)?;
    if doc.matrices.len() != doc.K {
        return Err(Error::Dimension(format!("K = {} but {} matrices", doc.K, doc.matrices.len())));
    }
    let mats = doc
        .matrices
        .iter()
        .enumerate()
        .map(|(k, p)| from_pairs(doc.M, doc.M, p, &format!("matrix {k}")))
        .collect::<Result<Vec<_>>>()?;
    let mut ts = TargetSet::new(mats, doc.N)?;
    if let Some(origin) = doc.origin {
        ts = ts.with_origin(origin)?;
    }
    if let Some(t) = doc.truth {
        ts = ts.with_truth(Truth {
            a: from_pairs(doc.M, doc.N, &t.a, "truth A")?,
            d: diagonals_from_doc(doc.N, doc.K, &t.d, "truth D")?,
        })?;
    }
    if let Some(seed) = doc.seed {
        ts = ts.with_seed(seed);
    }
    Ok(ts)
}

#[derive(Serialize, Deserialize)]
struct IterationDoc {
    t: usize,
    mu: Vec<f64>,
    sigma2: f64,
    cost: f64,
    step: f64,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct RunResultDoc {
    M: usize,
    N: usize,
    K: usize,
    A_hat: Pairs,
    D_hat: Vec<Pairs>,
    converged: bool,
    iterations: usize,
    mu: Vec<f64>,
    sigma2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    trajectory: Option<Vec<IterationDoc>>,
}

pub fn run_result_to_json(res: &RunResult) -> Result<String> {
    let doc = RunResultDoc {
        M: res.a_hat.nrows(),
        N: res.a_hat.ncols(),
        K: res.d_hat.k(),
        A_hat: to_pairs(res.a_hat.iter()),
        D_hat: diagonals_to_doc(&res.d_hat),
        converged: res.converged,
        iterations: res.iterations,
        mu: res.final_state.weights.clone(),
        sigma2: res.final_state.sigma2,
        trajectory: res.trajectory.as_ref().map(|tr| {
            tr.iter()
                .map(|r| IterationDoc {
                    t: r.t,
                    mu: r.weights.clone(),
                    sigma2: r.sigma2,
                    cost: r.cost,
                    step: r.step,
                })
                .collect()
        }),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Decoded run result. Residuals are not serialized, so only the fields that
/// round-trip are exposed.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredRun {
    pub a_hat: CMatrix,
    pub d_hat: DiagonalSet,
    pub converged: bool,
    pub iterations: usize,
    pub weights: Vec<f64>,
    pub sigma2: f64,
    pub trajectory: Option<Vec<IterationRecord>>,
}

pub fn run_result_from_json(text: &str) -> Result<StoredRun> {
    let doc: RunResultDoc = serde_json::from_str(text)?;
    Ok(StoredRun {
        a_hat: from_pairs(doc.M, doc.N, &doc.A_hat, "A_hat")?,
        d_hat: diagonals_from_doc(doc.N, doc.K, &doc.D_hat, "D_hat")?,
        converged: doc.converged,
        iterations: doc.iterations,
        weights: doc.mu,
        sigma2: doc.sigma2,
        trajectory: doc.trajectory.map(|tr| {
            tr.into_iter()
                .map(|r| IterationRecord {
                    t: r.t,
                    weights: r.mu,
                    sigma2: r.sigma2,
                    cost: r.cost,
                    step: r.step,
                    d_step_objective: None,
                })
                .collect()
        }),
    })
}
