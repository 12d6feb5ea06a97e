//! Inequality-constrained recursive estimation.
//!
//! Each timestep fuses the state prediction (as a pseudo-measurement), the
//! real measurement, any equality constraints and the currently active
//! inequality constraints into one stacked least-squares problem, solved
//! through the pseudo-inverse of the bordered KKT matrix. The active set is
//! grown by a feasibility line search toward each trial solution and shrunk
//! by the sign of the constraint multipliers, iterating until the estimate
//! settles or the iteration cap is hit.
//!
//! The covariance of the final iterate comes straight from the KKT
//! pseudo-inverse and is deliberately not perturbed after inequality
//! projections.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{GaussianEstimate, Innovation, LinearModel};
use crate::linalg;

/// Feasibility slack: a constraint value down to -FEAS_EPS still counts as
/// satisfied, absorbing solver round-off.
pub const FEAS_EPS: f64 = 1e-12;

/// Multipliers more negative than this release their constraint.
const RELEASE_TOL: f64 = -1e-10;

type ValueFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradFn = dyn Fn(&DVector<f64>) -> RowDVector<f64> + Send + Sync;

enum Repr {
    /// value = coeffs . x + offset
    Linear { coeffs: RowDVector<f64>, offset: f64 },
    Smooth { value: Arc<ValueFn>, gradient: Arc<GradFn> },
}

/// A scalar constraint function with a Jacobian row.
///
/// Used as `value(x) = 0` in an equality set or `value(x) >= 0` in an
/// inequality set.
pub struct Constraint {
    repr: Repr,
}

impl Constraint {
    pub fn linear(coeffs: Vec<f64>, offset: f64) -> Self {
        Self { repr: Repr::Linear { coeffs: RowDVector::from_row_slice(&coeffs), offset } }
    }

    /// The coordinate bound x_i >= 0 (or x_i = 0 when used as an equality).
    pub fn coordinate(dim: usize, index: usize) -> Self {
        let mut coeffs = vec![0.0; dim];
        coeffs[index] = 1.0;
        Self::linear(coeffs, 0.0)
    }

    /// A general smooth constraint given by closures for the value and the
    /// gradient row.
    pub fn smooth(
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> RowDVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { repr: Repr::Smooth { value: Arc::new(value), gradient: Arc::new(gradient) } }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match &self.repr {
            Repr::Linear { coeffs, offset } => (coeffs * x)[0] + offset,
            Repr::Smooth { value, .. } => value(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> RowDVector<f64> {
        match &self.repr {
            Repr::Linear { coeffs, .. } => coeffs.clone(),
            Repr::Smooth { gradient, .. } => gradient(x),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.repr, Repr::Linear { .. })
    }

    /// Same constraint on a state extended by `extra` trailing coordinates
    /// it does not touch.
    pub fn padded(&self, original_dim: usize, extra: usize) -> Self {
        match &self.repr {
            Repr::Linear { coeffs, offset } => {
                let mut c: Vec<f64> = coeffs.iter().copied().collect();
                c.resize(original_dim + extra, 0.0);
                Self::linear(c, *offset)
            }
            Repr::Smooth { value, gradient } => {
                let v = Arc::clone(value);
                let g = Arc::clone(gradient);
                Self::smooth(
                    move |x: &DVector<f64>| v(&x.rows(0, original_dim).into_owned()),
                    move |x: &DVector<f64>| {
                        let row = g(&x.rows(0, original_dim).into_owned());
                        let mut out = RowDVector::zeros(original_dim + extra);
                        out.columns_mut(0, original_dim).copy_from(&row);
                        out
                    },
                )
            }
        }
    }
}

impl Clone for Constraint {
    fn clone(&self) -> Self {
        match &self.repr {
            Repr::Linear { coeffs, offset } => {
                Self { repr: Repr::Linear { coeffs: coeffs.clone(), offset: *offset } }
            }
            Repr::Smooth { value, gradient } => Self {
                repr: Repr::Smooth { value: Arc::clone(value), gradient: Arc::clone(gradient) },
            },
        }
    }
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            Repr::Linear { coeffs, offset } => {
                write!(f, "Linear({:?} + {offset})", coeffs.as_slice())
            }
            Repr::Smooth { .. } => write!(f, "Smooth(..)"),
        }
    }
}

/// Equality constraints e(x) = 0 and inequality constraints l(x) >= 0 over a
/// state of fixed dimension.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    dim: usize,
    equalities: Vec<Constraint>,
    inequalities: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn empty(dim: usize) -> Self {
        Self { dim, equalities: Vec::new(), inequalities: Vec::new() }
    }

    /// x_i >= 0 for every coordinate: the composition constraints.
    pub fn non_negativity(dim: usize) -> Self {
        let mut set = Self::empty(dim);
        for i in 0..dim {
            set.inequalities.push(Constraint::coordinate(dim, i));
        }
        set
    }

    pub fn push_equality(&mut self, c: Constraint) {
        self.equalities.push(c);
    }

    pub fn push_inequality(&mut self, c: Constraint) {
        self.inequalities.push(c);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn equalities(&self) -> &[Constraint] {
        &self.equalities
    }

    pub fn inequalities(&self) -> &[Constraint] {
        &self.inequalities
    }

    pub fn all_linear(&self) -> bool {
        self.equalities.iter().chain(&self.inequalities).all(Constraint::is_linear)
    }

    /// Largest inequality violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.inequalities.iter().map(|c| (-c.value(x)).max(0.0)).fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, x: &DVector<f64>) -> bool {
        self.max_violation(x) <= FEAS_EPS
    }
}

/// Indices of inequality constraints currently enforced as equalities.
/// Carried over between timesteps.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    indices: BTreeSet<usize>,
}

impl ActiveSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    pub fn insert(&mut self, i: usize) {
        self.indices.insert(i);
    }

    pub fn remove(&mut self, i: usize) {
        self.indices.remove(&i);
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_vec(&self) -> Vec<usize> {
        self.indices.iter().copied().collect()
    }
}

impl FromIterator<usize> for ActiveSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self { indices: iter.into_iter().collect() }
    }
}

/// Inner-iteration control: convergence bound on the max-norm step and a
/// hard iteration cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationControl {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IterationControl {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 20 }
    }
}

impl IterationControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("convergence bound must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// The stacked fusion problem for one timestep: prediction rows, measurement
/// rows, equality rows, then active-inequality rows.
pub struct FusionProblem<'a> {
    zc: DVector<f64>,
    rc: DMatrix<f64>,
    h: &'a DMatrix<f64>,
    constraints: &'a ConstraintSet,
    active: Vec<usize>,
    state_dim: usize,
}

/// Solution of one equality-constrained fusion solve.
#[derive(Debug, Clone)]
pub struct FusionSolution {
    pub state: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// One multiplier per stacked row; for constraint rows this is the
    /// Lagrange multiplier of the enforced equality.
    pub multipliers: DVector<f64>,
    /// Singular values truncated by the pseudo-inverse cutoff. Zero for a
    /// well-posed problem; redundant constraint rows raise it by design.
    pub rank_deficiency: usize,
}

impl<'a> FusionProblem<'a> {
    /// Stack prediction, measurement and constraint rows.
    ///
    /// `pred` is the already-propagated state prediction (mean F x, cov
    /// F P F' + Q), which enters as a pseudo-measurement with its covariance.
    pub fn new(
        pred: &GaussianEstimate,
        z: &DVector<f64>,
        h: &'a DMatrix<f64>,
        r: &DMatrix<f64>,
        constraints: &'a ConstraintSet,
        active: &ActiveSet,
    ) -> Result<Self> {
        let n = pred.dim();
        if constraints.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "constraints are over dimension {}, state is {n}",
                constraints.dim()
            )));
        }
        if h.ncols() != n || h.nrows() != z.len() || r.nrows() != z.len() || r.ncols() != z.len() {
            return Err(Error::DimensionMismatch("measurement block shapes disagree".into()));
        }
        let active = active.as_vec();
        if let Some(&bad) = active.iter().find(|&&i| i >= constraints.inequalities().len()) {
            return Err(Error::InvalidInput(format!("active index {bad} out of range")));
        }
        let n_cons = constraints.equalities().len() + active.len();
        let zeros = DVector::zeros(n_cons);
        let zc = linalg::vstack_vec(&[&pred.mean, z, &zeros]);
        let zero_block = DMatrix::zeros(n_cons, n_cons);
        let rc = linalg::block_diag(&[&pred.cov, r, &zero_block]);
        Ok(Self { zc, rc, h, constraints, active, state_dim: n })
    }

    pub fn rows(&self) -> usize {
        self.zc.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn zc(&self) -> &DVector<f64> {
        &self.zc
    }

    pub fn rc(&self) -> &DMatrix<f64> {
        &self.rc
    }

    /// The stacked measurement function h^c(x) = [x; Hx; e(x); l_active(x)].
    pub fn hc(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows());
        out.rows_mut(0, self.state_dim).copy_from(x);
        let meas = self.h * x;
        out.rows_mut(self.state_dim, meas.len()).copy_from(&meas);
        let mut r = self.state_dim + meas.len();
        for e in self.constraints.equalities() {
            out[r] = e.value(x);
            r += 1;
        }
        for &i in &self.active {
            out[r] = self.constraints.inequalities()[i].value(x);
            r += 1;
        }
        out
    }

    /// Stacked Jacobian of h^c at the linearization point:
    /// [I; H; grad e; grad l_active].
    pub fn linearize(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim;
        let mut jac = DMatrix::zeros(self.rows(), n);
        jac.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        jac.view_mut((n, 0), (self.h.nrows(), n)).copy_from(self.h);
        let mut r = n + self.h.nrows();
        for e in self.constraints.equalities() {
            jac.row_mut(r).copy_from(&e.gradient(x));
            r += 1;
        }
        for &i in &self.active {
            jac.row_mut(r).copy_from(&self.constraints.inequalities()[i].gradient(x));
            r += 1;
        }
        jac
    }

    /// Solve the fusion problem linearized at `x_lin` through the bordered
    /// KKT matrix [[R^c, H^c], [H^c', 0]] and its pseudo-inverse.
    ///
    /// The KKT matrix is symmetrically equilibrated before factorization;
    /// this leaves the state and covariance blocks unchanged (they are
    /// unique across generalized inverses of the consistent system) while
    /// taming the mixed scales of the covariance and constraint blocks.
    pub fn solve(&self, hc_jac: &DMatrix<f64>, x_lin: &DVector<f64>) -> Result<FusionSolution> {
        let q = self.rows();
        let n = self.state_dim;
        if hc_jac.nrows() != q || hc_jac.ncols() != n {
            return Err(Error::DimensionMismatch("Jacobian does not match problem".into()));
        }
        let mut kkt = DMatrix::zeros(q + n, q + n);
        kkt.view_mut((0, 0), (q, q)).copy_from(&self.rc);
        kkt.view_mut((0, q), (q, n)).copy_from(hc_jac);
        kkt.view_mut((q, 0), (n, q)).copy_from(&hc_jac.transpose());

        // Symmetric row/column equilibration by max-norms.
        let scale = DVector::from_fn(q + n, |i, _| {
            let s = kkt.row(i).amax();
            if s > 0.0 {
                1.0 / s.sqrt()
            } else {
                1.0
            }
        });
        for i in 0..q + n {
            for j in 0..q + n {
                kkt[(i, j)] *= scale[i] * scale[j];
            }
        }

        let out = linalg::pseudo_inverse_sym(&kkt)?;

        let residual = &self.zc - self.hc(x_lin) + hc_jac * x_lin;
        let mut rhs = DVector::zeros(q + n);
        rhs.rows_mut(0, q).copy_from(&residual);
        rhs.component_mul_assign(&scale);
        let mut sol = &out.pinv * rhs;
        sol.component_mul_assign(&scale);

        let state = sol.rows(q, n).into_owned();
        let multipliers = sol.rows(0, q).into_owned();
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] = -out.pinv[(q + i, q + j)] * scale[q + i] * scale[q + j];
            }
        }
        linalg::symmetrize(&mut cov);
        Ok(FusionSolution { state, cov, multipliers, rank_deficiency: out.dropped })
    }

}

/// Result of the feasibility line search.
#[derive(Debug, Clone)]
pub struct LineSearch {
    pub x_new: DVector<f64>,
    /// Constraints at their boundary in `x_new` that limited the step.
    pub touched: BTreeSet<usize>,
    pub t_max: f64,
}

/// Move from a feasible `x_prev` toward `x_star` as far as the inequality
/// constraints allow.
pub fn line_search_to_feasible(
    x_prev: &DVector<f64>,
    x_star: &DVector<f64>,
    constraints: &ConstraintSet,
) -> Result<LineSearch> {
    if constraints.max_violation(x_prev) > FEAS_EPS {
        return Err(Error::InvalidInput(format!(
            "line search start is infeasible (violation {:.3e})",
            constraints.max_violation(x_prev)
        )));
    }
    let d = x_star - x_prev;
    let mut t_max = 1.0f64;
    let mut blocking: Vec<(usize, f64)> = Vec::new();
    for (i, c) in constraints.inequalities().iter().enumerate() {
        let v_star = c.value(x_star);
        if v_star >= -FEAS_EPS {
            continue;
        }
        let v_prev = c.value(x_prev).max(0.0);
        let t = if c.is_linear() {
            // Root of the linear interpolant; exact for linear constraints.
            (v_prev / (v_prev - v_star)).clamp(0.0, 1.0)
        } else {
            bisect_boundary(c, x_prev, &d)
        };
        blocking.push((i, t));
        t_max = t_max.min(t);
    }

    let x_new = if blocking.is_empty() { x_star.clone() } else { x_prev + &d * t_max };
    let touched = blocking
        .into_iter()
        .filter(|&(i, t)| {
            t <= t_max + FEAS_EPS && constraints.inequalities()[i].value(&x_new) <= FEAS_EPS
        })
        .map(|(i, _)| i)
        .collect();
    Ok(LineSearch { x_new, touched, t_max })
}

/// Largest t in [0, 1] keeping a single smooth constraint non-negative along
/// x_prev + t d, assuming one boundary crossing.
fn bisect_boundary(c: &Constraint, x_prev: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if c.value(&(x_prev + d * mid)) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Per-step diagnostics of the constrained update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub iterations: usize,
    /// Smallest line-search step taken during the iteration.
    pub t_max_min: f64,
    pub released: usize,
    pub rank_deficiency: usize,
}

/// Output of one constrained timestep.
#[derive(Debug, Clone)]
pub struct ConstrainedStep {
    pub estimate: GaussianEstimate,
    /// The pre-fusion state prediction (mean F x, cov F P F' + Q).
    pub prediction: GaussianEstimate,
    pub active: ActiveSet,
    pub innovation: Innovation,
    pub trace: StepTrace,
}

/// One full constrained predict-fuse-project timestep.
///
/// The reported innovation uses the pre-fusion prediction: nu = z - H F x,
/// S = H (F P F' + Q) H' + R.
pub fn constrained_step(
    prior: &GaussianEstimate,
    z: &DVector<f64>,
    model: &LinearModel,
    constraints: &ConstraintSet,
    active: &ActiveSet,
    ctrl: &IterationControl,
) -> Result<ConstrainedStep> {
    ctrl.validate()?;
    if prior.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch("prior does not match model".into()));
    }
    if constraints.max_violation(&prior.mean) > FEAS_EPS {
        return Err(Error::InvalidInput("prior state violates the inequality constraints".into()));
    }

    let pred = crate::kalman::predict(prior, model)?;
    let nu = z - &model.h * &pred.mean;
    let mut s = &model.h * &pred.cov * model.h.transpose() + &model.r;
    linalg::symmetrize(&mut s);
    let innovation = Innovation { nu, s };

    let all_linear = constraints.all_linear();
    let mut active = active.clone();
    let mut x = prior.mean.clone();
    let mut cov = pred.cov.clone();
    let mut trace =
        StepTrace { iterations: 0, t_max_min: 1.0, released: 0, rank_deficiency: 0 };

    // Cache of the last solve, keyed by the active set it used; valid as a
    // shortcut only while the stacked map stays linear.
    let mut cached: Option<(Vec<usize>, FusionSolution)> = None;

    for _ in 0..ctrl.max_iter {
        trace.iterations += 1;

        // Solve with the current active set, releasing wrong-signed
        // multipliers one at a time (most negative first).
        let solution = loop {
            let reuse = all_linear
                && cached.as_ref().map(|(key, _)| key == &active.as_vec()).unwrap_or(false);
            let sol = if reuse {
                cached.as_ref().unwrap().1.clone()
            } else {
                let problem =
                    FusionProblem::new(&pred, z, &model.h, &model.r, constraints, &active)?;
                let jac = problem.linearize(&x);
                let sol = problem.solve(&jac, &x)?;
                trace.rank_deficiency =
                    trace.rank_deficiency.max(sol.rank_deficiency);
                cached = Some((active.as_vec(), sol));
                cached.as_ref().unwrap().1.clone()
            };

            let problem_active = active.as_vec();
            let worst = problem_active
                .iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let base = model.state_dim()
                        + model.measurement_dim()
                        + constraints.equalities().len();
                    (idx, sol.multipliers[base + pos])
                })
                .filter(|&(_, m)| m < RELEASE_TOL)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((idx, _)) => {
                    active.remove(idx);
                    trace.released += 1;
                }
                None => break sol,
            }
        };

        let ls = line_search_to_feasible(&x, &solution.state, constraints)?;
        trace.t_max_min = trace.t_max_min.min(ls.t_max);
        let grew = ls.touched.iter().any(|&i| !active.contains(i));
        for &i in &ls.touched {
            active.insert(i);
        }

        let delta = (&ls.x_new - &x).amax();
        x = ls.x_new;
        cov = solution.cov;

        if delta <= ctrl.tol && !grew {
            break;
        }
    }

    Ok(ConstrainedStep {
        estimate: GaussianEstimate { mean: x, cov },
        prediction: pred,
        active,
        innovation,
        trace,
    })
}
