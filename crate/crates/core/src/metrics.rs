//! Separation-quality measures: pseudo-inverse, gain matrix, global rejection
//! level and the off-diagonality of transformed targets.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::matrixset::{CMatrix, TargetSet};

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RCOND: f64 = 1e-12;

/// Moore-Penrose pseudo-inverse via SVD.
pub fn pseudo_inverse(a: &CMatrix) -> CMatrix {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return CMatrix::zeros(n, m);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let s_max = svd.singular_values.max();
    if !(s_max > 0.0) {
        return CMatrix::zeros(n, m);
    }
    let cutoff = PINV_RCOND * s_max;

    // A⁺ = V Σ⁺ Uᴴ
    let mut v_sinv = v_t.adjoint();
    for (mut col, s) in v_sinv.column_iter_mut().zip(svd.singular_values.iter()) {
        if *s > cutoff {
            col.unscale_mut(*s);
        } else {
            col.fill(Complex64::new(0.0, 0.0));
        }
    }
    v_sinv * u.adjoint()
}

/// `G = Â⁺ · A_true`.
pub fn gain(a_hat: &CMatrix, a_true: &CMatrix) -> Result<CMatrix> {
    if a_hat.shape() != a_true.shape() {
        return Err(Error::Dimension(format!(
            "estimated mixing {:?} vs true mixing {:?}",
            a_hat.shape(),
            a_true.shape()
        )));
    }
    Ok(pseudo_inverse(a_hat) * a_true)
}

/// Global rejection level of a square gain matrix.
///
/// Each column contributes `Σ_m |G_mn|² / max_m |G_mn|² − 1` and each row
/// `Σ_n |G_mn|² / max_n |G_mn|² − 1`. Zero exactly on generalized permutations.
pub fn grl(g: &CMatrix) -> Result<f64> {
    if g.nrows() != g.ncols() {
        return Err(Error::Dimension(format!("gain matrix is {:?}, expected square", g.shape())));
    }
    let p: DMatrix<f64> = g.map(|z| z.norm_sqr());
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("gain matrix has non-finite entries".into()));
    }
    let mut total = 0.0;
    for (n, col) in p.column_iter().enumerate() {
        let max = col.max();
        if max == 0.0 {
            return Err(Error::DegenerateGain(format!("column {n} is zero")));
        }
        total += col.sum() / max - 1.0;
    }
    for (m, row) in p.row_iter().enumerate() {
        let max = row.max();
        if max == 0.0 {
            return Err(Error::DegenerateGain(format!("row {m} is zero")));
        }
        total += row.sum() / max - 1.0;
    }
    Ok(total)
}

/// `GRL(Â⁺ · A_true)`.
pub fn mixing_grl(a_hat: &CMatrix, a_true: &CMatrix) -> Result<f64> {
    grl(&gain(a_hat, a_true)?)
}

/// `Σ_k Σ_{m≠n} |[V R_k Vᴴ]_mn|²`.
pub fn off_diagonality(v: &CMatrix, targets: &TargetSet) -> Result<f64> {
    if v.ncols() != targets.m() {
        return Err(Error::Dimension(format!(
            "demixing matrix has {} columns for {}x{} targets",
            v.ncols(),
            targets.m(),
            targets.m()
        )));
    }
    let mut total = 0.0;
    for r in targets.matrices() {
        let t = v * r * v.adjoint();
        for (j, col) in t.column_iter().enumerate() {
            for (i, z) in col.iter().enumerate() {
                if i != j {
                    total += z.norm_sqr();
                }
            }
        }
    }
    Ok(total)
}
