//! Log-return residual diagnostics and calibration checks.
//!
//! Predictions become log-return residuals with first-order (delta-method)
//! variances; coverage is checked against the Chebyshev bound. The bound is
//! implemented in its standard form: the fraction of residuals *outside*
//! kappa sigma must not exceed 1/kappa^2. Bands are centered about zero.

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleSummary;
use crate::error::{Error, Result};
use crate::series::PriceSeries;

/// Rolling window used for the exploratory directional-accuracy track.
const ROLLING_WINDOW: usize = 100;

/// Observed log return, predicted log return and their residual.
///
/// l = log(r_prev + z) - log(r_prev), and likewise for the prediction.
pub fn log_return_residual(r_prev: f64, z_obs: f64, z_pred: f64) -> Result<(f64, f64, f64)> {
    if !(r_prev > 0.0) {
        return Err(Error::InvalidInput(format!("previous rate {r_prev} must be positive")));
    }
    let obs_arg = r_prev + z_obs;
    let pred_arg = r_prev + z_pred;
    if obs_arg <= 0.0 || pred_arg <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "log-return argument non-positive (observed {obs_arg}, predicted {pred_arg})"
        )));
    }
    let l = obs_arg.ln() - r_prev.ln();
    let l_pred = pred_arg.ln() - r_prev.ln();
    Ok((l, l_pred, l - l_pred))
}

/// Delta-method variance of the log-return residual: S / r_prev^2.
pub fn delta_variance(s: f64, r_prev: f64) -> f64 {
    s / (r_prev * r_prev)
}

/// Empirical tail fraction at one sigma level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub kappa: f64,
    /// Fraction of residuals with |residual| > kappa * sqrt(variance).
    pub fraction_outside: f64,
    /// Chebyshev bound 1/kappa^2 (capped at 1).
    pub bound: f64,
    pub pass: bool,
}

/// Coverage table plus the mean-residual bias indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
    pub mean_residual: f64,
    /// Standard error of the mean residual.
    pub residual_sem: f64,
    pub samples: usize,
}

impl CoverageTable {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

/// Check residuals against their variances at the given sigma levels.
pub fn coverage_check(residuals: &[f64], variances: &[f64], levels: &[f64]) -> Result<CoverageTable> {
    if residuals.is_empty() {
        return Err(Error::InvalidInput("no residuals to check".into()));
    }
    if residuals.len() != variances.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} residuals but {} variances",
            residuals.len(),
            variances.len()
        )));
    }
    if variances.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("variances must be non-negative".into()));
    }

    let n = residuals.len() as f64;
    let rows = levels
        .iter()
        .map(|&kappa| {
            let outside = residuals
                .iter()
                .zip(variances)
                .filter(|&(&r, &v)| r.abs() > kappa * v.sqrt())
                .count();
            let fraction_outside = outside as f64 / n;
            let bound = (1.0 / (kappa * kappa)).min(1.0);
            CoverageRow { kappa, fraction_outside, bound, pass: fraction_outside <= bound }
        })
        .collect();

    let mean = residuals.iter().sum::<f64>() / n;
    let sem = if residuals.len() > 1 {
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(CoverageTable { rows, mean_residual: mean, residual_sem: sem, samples: residuals.len() })
}

/// One reporting timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStep {
    pub k: usize,
    pub log_return: f64,
    pub log_return_pred: f64,
    pub residual: f64,
    pub variance: f64,
    /// 3 sigma band half-width.
    pub band: f64,
    /// Ensemble standard error of the prediction mapped to log-return scale.
    pub sem: f64,
}

/// Residual report over an ensemble summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub steps: Vec<ResidualStep>,
    /// Steps dropped for log-domain violations.
    pub flagged_steps: usize,
    pub coverage: CoverageTable,
    /// Fraction of steps whose predicted and observed log returns agree in
    /// sign.
    pub directional_accuracy: f64,
    /// Rolling directional accuracy (window of 100 steps), aligned to steps.
    pub rolling_accuracy: Vec<f64>,
}

/// Build the residual report for a summary against its source series.
pub fn build_report(
    series: &PriceSeries,
    summary: &EnsembleSummary,
    levels: &[f64],
) -> Result<ResidualReport> {
    if summary.is_empty() {
        return Err(Error::InvalidInput("empty ensemble summary".into()));
    }
    let mut steps = Vec::with_capacity(summary.len());
    let mut flagged = 0usize;
    let mut hits = Vec::with_capacity(summary.len());
    for i in 0..summary.len() {
        let k = summary.ks[i];
        if k == 0 || k >= series.len() {
            return Err(Error::DimensionMismatch(format!(
                "summary timestep {k} outside the series"
            )));
        }
        let r_prev = series.rate(k - 1);
        match log_return_residual(r_prev, summary.z_obs[i], summary.z_star[i]) {
            Ok((l, l_pred, resid)) => {
                let variance = delta_variance(summary.s_star[i], r_prev);
                let hit = (l == 0.0 && l_pred == 0.0) || l * l_pred > 0.0;
                hits.push(hit);
                steps.push(ResidualStep {
                    k,
                    log_return: l,
                    log_return_pred: l_pred,
                    residual: resid,
                    variance,
                    band: 3.0 * variance.sqrt(),
                    sem: summary.sem[i] / r_prev,
                });
            }
            Err(_) => flagged += 1,
        }
    }
    if steps.is_empty() {
        return Err(Error::InvalidInput("every step was flagged".into()));
    }

    let residuals: Vec<f64> = steps.iter().map(|s| s.residual).collect();
    let variances: Vec<f64> = steps.iter().map(|s| s.variance).collect();
    let coverage = coverage_check(&residuals, &variances, levels)?;

    let directional_accuracy = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    let rolling_accuracy = hits
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = i.saturating_sub(ROLLING_WINDOW - 1);
            let window = &hits[lo..=i];
            window.iter().filter(|&&h| h).count() as f64 / window.len() as f64
        })
        .collect();

    Ok(ResidualReport {
        steps,
        flagged_steps: flagged,
        coverage,
        directional_accuracy,
        rolling_accuracy,
    })
}
