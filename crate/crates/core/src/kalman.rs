//! Linear Kalman filter: prediction, update with Joseph-form covariance.
//!
//! This is the unconstrained baseline; the constrained fusion step in
//! [`crate::constrained`] must reduce to it whenever no constraint is touched.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Condition-number limit for the residual covariance solve.
const MAX_S_CONDITION: f64 = 1e12;

/// Mean vector plus covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianEstimate {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if linalg::symmetry_defect(&cov) > 1e-10 {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Uniform mean with an isotropic covariance; the default filter start.
    pub fn uniform(dim: usize, mean_value: f64, cov_scale: f64) -> Self {
        Self {
            mean: DVector::from_element(dim, mean_value),
            cov: DMatrix::identity(dim, dim) * cov_scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_health(&self) -> CovarianceHealth {
        CovarianceHealth {
            symmetry_defect: linalg::symmetry_defect(&self.cov),
            min_eigenvalue: linalg::eigen_range(&self.cov).0,
            spectral_norm: linalg::spectral_norm_sym(&self.cov),
        }
    }
}

/// Symmetry and definiteness figures of a covariance matrix.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceHealth {
    /// Max-norm asymmetry relative to the matrix max-norm.
    pub symmetry_defect: f64,
    pub min_eigenvalue: f64,
    pub spectral_norm: f64,
}

impl CovarianceHealth {
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        self.symmetry_defect <= rel_tol
    }

    /// PSD within a relative tolerance on the spectral norm plus an absolute
    /// allowance for rounding dust on (near-)zero matrices.
    pub fn is_psd(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.min_eigenvalue >= -(rel_tol * self.spectral_norm + abs_tol)
    }
}

/// Time-invariant pieces of the linear-Gaussian model for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(f: DMatrix<f64>, q: DMatrix<f64>, h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = f.nrows();
        if f.ncols() != n {
            return Err(Error::DimensionMismatch("transition matrix must be square".into()));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "process noise is {}x{}, expected {n}x{n}",
                q.nrows(),
                q.ncols()
            )));
        }
        if h.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "measurement matrix has {} columns, expected {n}",
                h.ncols()
            )));
        }
        let p = h.nrows();
        if r.nrows() != p || r.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "measurement noise is {}x{}, expected {p}x{p}",
                r.nrows(),
                r.ncols()
            )));
        }
        Ok(Self { f, q, h, r })
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Measurement residual and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub nu: DVector<f64>,
    pub s: DMatrix<f64>,
}

/// State prediction: mean = F x, cov = F P F' + Q.
pub fn predict(prior: &GaussianEstimate, model: &LinearModel) -> Result<GaussianEstimate> {
    if prior.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "prior dimension {} does not match model state dimension {}",
            prior.dim(),
            model.state_dim()
        )));
    }
    let mean = &model.f * &prior.mean;
    let mut cov = &model.f * &prior.cov * model.f.transpose() + &model.q;
    linalg::symmetrize(&mut cov);
    Ok(GaussianEstimate { mean, cov })
}

/// Joseph-form covariance update: (I - KH) P (I - KH)' + K R K'.
///
/// Symmetric and PSD-preserving for any gain, not just the optimal one.
pub fn joseph_update(
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = p.nrows();
    let ikh = DMatrix::identity(n, n) - k * h;
    let mut cov = &ikh * p * ikh.transpose() + k * r * k.transpose();
    linalg::symmetrize(&mut cov);
    cov
}

/// Measurement update on a state prediction.
pub fn update(
    pred: &GaussianEstimate,
    z: &DVector<f64>,
    model: &LinearModel,
) -> Result<(GaussianEstimate, Innovation)> {
    if z.len() != model.measurement_dim() {
        return Err(Error::DimensionMismatch(format!(
            "measurement has {} entries, model expects {}",
            z.len(),
            model.measurement_dim()
        )));
    }
    if pred.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch("prediction does not match model".into()));
    }
    let nu = z - &model.h * &pred.mean;
    let mut s = &model.h * &pred.cov * model.h.transpose() + &model.r;
    linalg::symmetrize(&mut s);

    // K = P H' S^-1, computed as a solve against S.
    let ph_t = &pred.cov * model.h.transpose();
    let k = linalg::solve_spd(&s, &ph_t.transpose(), MAX_S_CONDITION)?.transpose();

    let mean = &pred.mean + &k * &nu;
    let cov = joseph_update(&pred.cov, &k, &model.h, &model.r);
    Ok((GaussianEstimate { mean, cov }, Innovation { nu, s }))
}
