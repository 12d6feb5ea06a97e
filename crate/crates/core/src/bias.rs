//! Bias removal by state augmentation.
//!
//! The state is extended with bias terms that propagate as identity, enter
//! the dynamics through B and the measurement through C, and by default
//! carry no process noise. Non-negativity applies to the composition
//! coordinates only; the bias is unconstrained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constrained::ConstraintSet;
use crate::error::{Error, Result};
use crate::kalman::{GaussianEstimate, LinearModel};
use crate::linalg;

/// Run-configuration switch for the bias model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BiasMode {
    /// No augmentation.
    #[default]
    None,
    /// One constant offset in measurement space (C = 1, no B), optionally
    /// with process noise on the bias term.
    Measurement {
        #[serde(default)]
        noise: f64,
    },
}

impl BiasMode {
    pub fn to_spec(self, state_dim: usize) -> BiasSpec {
        match self {
            BiasMode::None => BiasSpec::none(state_dim, 1),
            BiasMode::Measurement { noise } => BiasSpec::measurement_offset(state_dim)
                .with_bias_noise(DVector::from_element(1, noise))
                .expect("single bias term"),
        }
    }
}

/// How bias terms couple into the dynamics (B) and the measurement (C).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    bias_noise: DVector<f64>,
}

impl BiasSpec {
    pub fn new(b: DMatrix<f64>, c: DMatrix<f64>, bias_noise: DVector<f64>) -> Result<Self> {
        if b.ncols() != c.ncols() || bias_noise.len() != b.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "B has {} bias columns, C has {}, noise has {}",
                b.ncols(),
                c.ncols(),
                bias_noise.len()
            )));
        }
        Ok(Self { b, c, bias_noise })
    }

    /// No bias terms at all.
    pub fn none(state_dim: usize, measurement_dim: usize) -> Self {
        Self {
            b: DMatrix::zeros(state_dim, 0),
            c: DMatrix::zeros(measurement_dim, 0),
            bias_noise: DVector::zeros(0),
        }
    }

    /// A single constant offset on a scalar measurement (B absent, C = 1):
    /// the default experiment configuration.
    pub fn measurement_offset(state_dim: usize) -> Self {
        Self {
            b: DMatrix::zeros(state_dim, 1),
            c: DMatrix::from_element(1, 1, 1.0),
            bias_noise: DVector::zeros(1),
        }
    }

    pub fn with_bias_noise(mut self, noise: DVector<f64>) -> Result<Self> {
        if noise.len() != self.n_bias() {
            return Err(Error::DimensionMismatch("bias noise length mismatch".into()));
        }
        self.bias_noise = noise;
        Ok(self)
    }

    pub fn n_bias(&self) -> usize {
        self.b.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn measurement_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn coupling_b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn coupling_c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn bias_noise(&self) -> &DVector<f64> {
        &self.bias_noise
    }
}

/// Augment a model with bias terms:
/// F -> [[F, B], [0, I]], H -> [H, C], Q -> blockdiag(Q, diag(bias_noise)).
pub fn augment_model(model: &LinearModel, spec: &BiasSpec) -> Result<LinearModel> {
    let n = model.state_dim();
    let p = model.measurement_dim();
    if spec.state_dim() != n || spec.measurement_dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "bias spec is for a {}x{} model, got {n}x{p}",
            spec.state_dim(),
            spec.measurement_dim()
        )));
    }
    let nb = spec.n_bias();
    if nb == 0 {
        return Ok(model.clone());
    }

    let mut f = DMatrix::zeros(n + nb, n + nb);
    f.view_mut((0, 0), (n, n)).copy_from(&model.f);
    f.view_mut((0, n), (n, nb)).copy_from(&spec.b);
    f.view_mut((n, n), (nb, nb)).copy_from(&DMatrix::identity(nb, nb));

    let q_bias = DMatrix::from_diagonal(&spec.bias_noise);
    let q = linalg::block_diag(&[&model.q, &q_bias]);

    let mut h = DMatrix::zeros(p, n + nb);
    h.view_mut((0, 0), (p, n)).copy_from(&model.h);
    h.view_mut((0, n), (p, nb)).copy_from(&spec.c);

    LinearModel::new(f, q, h, model.r.clone())
}

/// Re-impose the bias block structure on an estimated process noise for the
/// augmented state: composition block kept, bias block reset to the
/// configured bias noise, cross blocks zero.
pub fn impose_bias_structure(q: &DMatrix<f64>, spec: &BiasSpec) -> DMatrix<f64> {
    let n = spec.state_dim();
    let nb = spec.n_bias();
    if nb == 0 {
        return q.clone();
    }
    let top = q.view((0, 0), (n, n)).into_owned();
    let q_bias = DMatrix::from_diagonal(&spec.bias_noise);
    linalg::block_diag(&[&top, &q_bias])
}

/// Pad every constraint onto the augmented state; bias coordinates stay
/// unconstrained.
pub fn augment_constraints(constraints: &ConstraintSet, spec: &BiasSpec) -> ConstraintSet {
    let nb = spec.n_bias();
    if nb == 0 {
        return constraints.clone();
    }
    let dim = constraints.dim();
    let mut out = ConstraintSet::empty(dim + nb);
    for e in constraints.equalities() {
        out.push_equality(e.padded(dim, nb));
    }
    for l in constraints.inequalities() {
        out.push_inequality(l.padded(dim, nb));
    }
    out
}

/// Extend an estimate with zero-mean bias coordinates of the given prior
/// variance.
pub fn augment_estimate(
    estimate: &GaussianEstimate,
    spec: &BiasSpec,
    bias_prior_var: f64,
) -> GaussianEstimate {
    let nb = spec.n_bias();
    if nb == 0 {
        return estimate.clone();
    }
    let mean = linalg::vstack_vec(&[&estimate.mean, &DVector::zeros(nb)]);
    let prior = DMatrix::identity(nb, nb) * bias_prior_var;
    let cov = linalg::block_diag(&[&estimate.cov, &prior]);
    GaussianEstimate { mean, cov }
}

/// Split an augmented estimate into its composition and bias marginals.
/// Cross-covariance between the blocks is dropped by marginalization.
pub fn extract(
    estimate: &GaussianEstimate,
    spec: &BiasSpec,
) -> Result<(GaussianEstimate, GaussianEstimate)> {
    let n = spec.state_dim();
    let nb = spec.n_bias();
    if estimate.dim() != n + nb {
        return Err(Error::DimensionMismatch(format!(
            "estimate has dimension {}, expected {} + {}",
            estimate.dim(),
            n,
            nb
        )));
    }
    let composition = GaussianEstimate {
        mean: estimate.mean.rows(0, n).into_owned(),
        cov: estimate.cov.view((0, 0), (n, n)).into_owned(),
    };
    let bias = GaussianEstimate {
        mean: estimate.mean.rows(n, nb).into_owned(),
        cov: estimate.cov.view((n, n), (nb, nb)).into_owned(),
    };
    Ok((composition, bias))
}
