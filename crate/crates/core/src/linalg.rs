//! Small dense linear-algebra helpers shared by the filter modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for every pseudo-inverse in the crate.
pub(crate) const PINV_REL_CUTOFF: f64 = 1e-12;

/// Force exact symmetry on a nearly-symmetric matrix.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Max-norm symmetry defect relative to the matrix max-norm.
pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Eigenvalue range of a symmetric matrix.
pub fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = m.clone().symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo, hi)
}

/// Spectral norm of a symmetric matrix.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = eigen_range(m);
    lo.abs().max(hi.abs())
}

pub(crate) struct PinvOutcome {
    pub pinv: DMatrix<f64>,
    /// Number of singular values truncated by the relative cutoff.
    pub dropped: usize,
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix through its
/// eigendecomposition, with eigenvalues of magnitude below
/// `PINV_REL_CUTOFF * |lambda|_max` treated as zero.
///
/// For symmetric input this is both more accurate than a general SVD and
/// exactly symmetric by construction.
pub(crate) fn pseudo_inverse_sym(m: &DMatrix<f64>) -> Result<PinvOutcome> {
    debug_assert!(symmetry_defect(m) < 1e-12);
    let eig = m.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let eps = PINV_REL_CUTOFF * lmax;
    let mut dropped = 0;
    let inverted = eig.eigenvalues.map(|l| {
        if l.abs() <= eps {
            dropped += 1;
            0.0
        } else {
            1.0 / l
        }
    });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inverted) * eig.eigenvectors.transpose();
    Ok(PinvOutcome { pinv, dropped })
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `PINV_REL_CUTOFF * sigma_max` treated as zero.
pub(crate) fn pseudo_inverse(m: &DMatrix<f64>) -> Result<PinvOutcome> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let eps = PINV_REL_CUTOFF * smax;
    let dropped = svd.singular_values.iter().filter(|&&s| s <= eps).count();
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::Numerical(format!("pseudo-inverse failed: {e}")))?;
    Ok(PinvOutcome { pinv, dropped })
}

/// Solve `S x = b` for symmetric positive-definite `S`, rejecting
/// near-singular systems instead of returning garbage.
pub(crate) fn solve_spd(
    s: &DMatrix<f64>,
    b: &DMatrix<f64>,
    max_condition: f64,
) -> Result<DMatrix<f64>> {
    let svd = s.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > max_condition {
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        return Err(Error::Numerical(format!(
            "residual covariance is near-singular (condition number {cond:.3e}, limit {max_condition:.1e})"
        )));
    }
    svd.solve(b, 0.0)
        .map_err(|e| Error::Numerical(format!("solve failed: {e}")))
}

/// Assemble a block-diagonal matrix from square blocks.
pub(crate) fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stack column vectors vertically.
pub(crate) fn vstack_vec(parts: &[&DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.len()).copy_from(*p);
        r += p.len();
    }
    out
}
