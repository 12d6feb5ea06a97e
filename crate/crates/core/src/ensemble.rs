//! Ensemble of independent filter runs over random agent-type subsets.
//!
//! Each run owns its subset, filter state, active set and noise estimator;
//! runs execute in parallel and are deterministic given (series, subset,
//! config, seed), so results never depend on scheduling. Predictions and
//! residual covariances are averaged with equal weights across runs, and the
//! between-run dispersion of the prediction is reported as a standard error
//! of the mean.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bias::{self, BiasMode};
use crate::constrained::{constrained_step, ActiveSet, ConstraintSet, IterationControl};
use crate::error::{Error, Result};
use crate::kalman::GaussianEstimate;
use crate::mg::{
    build_decision_row, pair_count, sample_agent_subset, winning_outcome, AgentType,
    OutcomeWindow, TieBreak, TieBreaker,
};
use crate::noise::{estimate_q, NoiseConfig, ResidualHistory, ResidualSample};
use crate::series::PriceSeries;

/// Initial filter state: per-type mean (uniform 1/N when unset) and an
/// isotropic covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConditions {
    pub mean_value: Option<f64>,
    pub cov_scale: f64,
    pub bias_prior_var: f64,
}

impl Default for InitialConditions {
    fn default() -> Self {
        Self { mean_value: None, cov_scale: 1.0, bias_prior_var: 1.0 }
    }
}

/// Full configuration of an ensemble inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Agent memory m.
    pub memory: u8,
    /// Types per run, N.
    pub subset_size: usize,
    /// Strategy-scoring horizon T.
    pub horizon: usize,
    /// Number of Monte Carlo runs M.
    pub runs: usize,
    /// Master seed; per-run seeds are derived from it.
    pub seed: u64,
    pub bias: BiasMode,
    pub iteration: IterationControl,
    pub noise: NoiseConfig,
    pub initial: InitialConditions,
    pub tie_break: TieBreak,
    /// Keep the full posterior covariance in every step record.
    pub record_covariances: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            memory: 4,
            subset_size: 5,
            horizon: 50,
            runs: 100,
            seed: 0,
            bias: BiasMode::None,
            iteration: IterationControl::default(),
            noise: NoiseConfig::default(),
            initial: InitialConditions::default(),
            tie_break: TieBreak::First,
            record_covariances: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 {
            return Err(Error::InvalidInput("subset size must be >= 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::InvalidInput("run count must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        if self.subset_size as u64 > pair_count(self.memory)? {
            return Err(Error::InvalidInput(format!(
                "subset size {} exceeds the {} pairs of memory {}",
                self.subset_size,
                pair_count(self.memory)?,
                self.memory
            )));
        }
        self.noise.validate()?;
        self.iteration.validate()
    }

    /// First timestep with a full scoring window: m + T + 1.
    pub fn first_estimation_step(&self) -> usize {
        self.memory as usize + self.horizon + 1
    }
}

/// Everything recorded at one estimation timestep of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    /// Observed increment z_k.
    pub z_obs: f64,
    /// Measurement prediction made before z_k was consumed.
    pub z_pred: f64,
    /// Measurement residual z_obs - z_pred.
    pub nu: f64,
    /// Predicted residual variance S_k.
    pub s: f64,
    /// Posterior composition estimate.
    pub state: Vec<f64>,
    /// Posterior bias estimate (empty without augmentation).
    pub bias: Vec<f64>,
    /// Active inequality constraints after the step.
    pub active: usize,
    /// Measurement-noise estimate in effect for this step.
    pub r_hat: f64,
    /// Trace of the process-noise estimate in effect for this step.
    pub q_trace: f64,
    /// Inner iterations spent by the constrained solve.
    pub iterations: usize,
    /// Row-major posterior covariance (composition plus bias), if requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cov: Option<Vec<f64>>,
}

/// One complete filter run over one agent subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub memory: u8,
    /// Strategy-table pairs identifying the subset.
    pub subset: Vec<[u32; 2]>,
    pub steps: Vec<StepRecord>,
    /// Error annotation when the run failed mid-series; the steps up to the
    /// failure are kept.
    pub flag: Option<String>,
}

/// Equal-weight ensemble averages per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub ks: Vec<usize>,
    pub z_obs: Vec<f64>,
    /// Averaged measurement prediction.
    pub z_star: Vec<f64>,
    /// Averaged residual covariance.
    pub s_star: Vec<f64>,
    /// Standard error of the mean of the predictions across runs.
    pub sem: Vec<f64>,
    pub runs_used: usize,
    pub runs_flagged: usize,
}

impl EnsembleSummary {
    pub fn len(&self) -> usize {
        self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ks.is_empty()
    }
}

/// Stable seed derivation for run `index` (splitmix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run the constrained filter once over the series with a fixed subset.
///
/// Deterministic given (series, subset, cfg, cfg.seed). One prediction per
/// post-warm-up timestep, always made before the increment is consumed.
pub fn run_single(series: &PriceSeries, subset: &[AgentType], cfg: &RunConfig) -> Result<RunRecord> {
    run_single_seeded(series, subset, cfg, cfg.seed, 0)
}

fn run_single_seeded(
    series: &PriceSeries,
    subset: &[AgentType],
    cfg: &RunConfig,
    run_seed: u64,
    run_index: usize,
) -> Result<RunRecord> {
    cfg.validate()?;
    if subset.is_empty() {
        return Err(Error::InvalidInput("subset must contain at least one type".into()));
    }
    let memory = subset[0].memory();
    if subset.iter().any(|t| t.memory() != memory) {
        return Err(Error::InvalidInput("subset mixes memory sizes".into()));
    }
    let horizon = cfg.horizon;
    let min_len = PriceSeries::min_estimation_len(memory, horizon);
    if series.len() < min_len {
        return Err(Error::NotEnoughData(format!(
            "series has {} rates; memory {memory} and horizon {horizon} need at least {min_len}",
            series.len()
        )));
    }

    let n = subset.len();
    let spec = cfg.bias.to_spec(n);
    let nb = spec.n_bias();
    let n_aug = n + nb;

    let constraints = bias::augment_constraints(&ConstraintSet::non_negativity(n), &spec);
    let mean_value = cfg.initial.mean_value.unwrap_or(1.0 / n as f64);
    let mut est = bias::augment_estimate(
        &GaussianEstimate::uniform(n, mean_value, cfg.initial.cov_scale),
        &spec,
        cfg.initial.bias_prior_var,
    );
    let mut active = ActiveSet::new();
    let mut window = OutcomeWindow::new(memory, horizon)?;
    let mut tie = TieBreaker::from_mode(cfg.tie_break, derive_seed(run_seed, 1));

    // Augmented transition matrix: [[I, B], [0, I]].
    let mut f_aug = DMatrix::identity(n_aug, n_aug);
    if nb > 0 {
        f_aug.view_mut((0, n), (n, nb)).copy_from(spec.coupling_b());
    }

    // Noise fallbacks until the residual window fills. The measurement-noise
    // start is taken from the warm-up increments unless pinned in the config.
    let warmup_end = memory as usize + horizon; // increments 1..=warmup_end
    let mut r_hat = cfg.noise.initial_r.unwrap_or_else(|| {
        let zs: Vec<f64> = (1..=warmup_end).map(|k| series.increment(k)).collect();
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (zs.len() as f64 - 1.0);
        var.max(cfg.noise.variance_floor)
    });
    let mut q_hat = bias::impose_bias_structure(
        &(DMatrix::identity(n_aug, n_aug) * cfg.noise.initial_q),
        &spec,
    );

    let mut hist = ResidualHistory::new(cfg.noise.window)?;
    let mut since_estimate = 0usize;
    let mut steps = Vec::with_capacity(series.len().saturating_sub(warmup_end + 1));
    let mut flag = None;

    for k in 1..series.len() {
        let z_k = series.increment(k);
        if window.ready() {
            let step = (|| -> Result<StepRecord> {
                let row = build_decision_row(subset, &window, &mut tie)?;
                let mut h_aug = DMatrix::zeros(1, n_aug);
                h_aug.view_mut((0, 0), (1, n)).copy_from(&row.to_matrix());
                if nb > 0 {
                    h_aug.view_mut((0, n), (1, nb)).copy_from(spec.coupling_c());
                }
                let r_mat = DMatrix::from_element(1, 1, r_hat);
                let model = crate::kalman::LinearModel::new(
                    f_aug.clone(),
                    q_hat.clone(),
                    h_aug.clone(),
                    r_mat.clone(),
                )?;

                let z_vec = DVector::from_element(1, z_k);
                let p_prev = est.cov.clone();
                let out = constrained_step(&est, &z_vec, &model, &constraints, &active, &cfg.iteration)?;

                let z_pred = (&h_aug * &out.prediction.mean)[0];
                let nu = out.innovation.nu[0];
                let s = out.innovation.s[(0, 0)];
                if !nu.is_finite() || !out.estimate.mean.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numerical("non-finite filter state".into()));
                }

                hist.push(ResidualSample {
                    nu: out.innovation.nu.clone(),
                    h: h_aug.clone(),
                    p_pred: out.prediction.cov.clone(),
                });

                let record = StepRecord {
                    k,
                    z_obs: z_k,
                    z_pred,
                    nu,
                    s,
                    state: out.estimate.mean.rows(0, n).iter().copied().collect(),
                    bias: out.estimate.mean.rows(n, nb).iter().copied().collect(),
                    active: out.active.len(),
                    r_hat,
                    q_trace: q_hat.trace(),
                    iterations: out.trace.iterations,
                    cov: cfg
                        .record_covariances
                        .then(|| out.estimate.cov.transpose().as_slice().to_vec()),
                };

                est = out.estimate;
                active = out.active;

                // Covariance matching once the window is full: R first, then
                // Q from the empirical residual covariance using this step's
                // H and the posterior that entered its prediction.
                since_estimate += 1;
                if hist.is_full() && since_estimate >= cfg.noise.cadence {
                    since_estimate = 0;
                    let r_new = hist
                        .estimate_r(cfg.noise.variance_floor)
                        .expect("window is full")[(0, 0)];
                    let s_emp = hist.empirical_s().expect("window is full");
                    let r_new_mat = DMatrix::from_element(1, 1, r_new);
                    let q_raw = estimate_q(
                        &s_emp,
                        &h_aug,
                        &f_aug,
                        &p_prev,
                        &r_new_mat,
                        cfg.noise.diagonal_q,
                        cfg.noise.variance_floor,
                    )?;
                    r_hat = r_new;
                    q_hat = bias::impose_bias_structure(&q_raw, &spec);
                }

                Ok(record)
            })();

            match step {
                Ok(rec) => steps.push(rec),
                Err(e) => {
                    flag = Some(format!("step {k}: {e}"));
                    break;
                }
            }
        }
        window.push(winning_outcome(z_k));
    }

    Ok(RunRecord {
        run_index,
        seed: run_seed,
        memory,
        subset: subset.iter().map(|t| t.tables()).collect(),
        steps,
        flag,
    })
}

/// Equal-weight averages over the unflagged runs.
pub fn average_runs(records: &[RunRecord]) -> Result<EnsembleSummary> {
    let valid: Vec<&RunRecord> = records.iter().filter(|r| r.flag.is_none()).collect();
    if valid.is_empty() {
        return Err(Error::InvalidInput("no unflagged runs to average".into()));
    }
    let ks: Vec<usize> = valid[0].steps.iter().map(|s| s.k).collect();
    for r in &valid {
        let their: Vec<usize> = r.steps.iter().map(|s| s.k).collect();
        if their != ks {
            return Err(Error::DimensionMismatch(format!(
                "run {} covers different timesteps",
                r.run_index
            )));
        }
    }

    // Sorted summation makes the averages independent of run order; runs
    // that are bit-identical collapse to exactly zero dispersion.
    let sorted_mean = |vals: &mut Vec<f64>| -> f64 {
        if vals.iter().all(|&v| v == vals[0]) {
            return vals[0];
        }
        vals.sort_unstable_by(f64::total_cmp);
        vals.iter().sum::<f64>() / vals.len() as f64
    };

    let m = valid.len() as f64;
    let mut z_obs = Vec::with_capacity(ks.len());
    let mut z_star = Vec::with_capacity(ks.len());
    let mut s_star = Vec::with_capacity(ks.len());
    let mut sem = Vec::with_capacity(ks.len());
    for i in 0..ks.len() {
        let mut zs: Vec<f64> = valid.iter().map(|r| r.steps[i].z_pred).collect();
        let mut ss: Vec<f64> = valid.iter().map(|r| r.steps[i].s).collect();
        let mean = sorted_mean(&mut zs);
        let s_mean = sorted_mean(&mut ss);
        let sem_i = if valid.len() > 1 && zs.iter().any(|&z| z != mean) {
            let mut sq: Vec<f64> = zs.iter().map(|z| (z - mean).powi(2)).collect();
            sq.sort_unstable_by(f64::total_cmp);
            let var = sq.iter().sum::<f64>() / (m - 1.0);
            (var / m).sqrt()
        } else {
            0.0
        };
        z_obs.push(valid[0].steps[i].z_obs);
        z_star.push(mean);
        s_star.push(s_mean);
        sem.push(sem_i);
    }

    Ok(EnsembleSummary {
        ks,
        z_obs,
        z_star,
        s_star,
        sem,
        runs_used: valid.len(),
        runs_flagged: records.len() - valid.len(),
    })
}

/// Sample M subsets, run them independently (in parallel) and average.
pub fn orchestrate(series: &PriceSeries, cfg: &RunConfig) -> Result<(EnsembleSummary, Vec<RunRecord>)> {
    cfg.validate()?;
    let records: Vec<RunRecord> = (0..cfg.runs)
        .into_par_iter()
        .map(|j| {
            let seed_j = derive_seed(cfg.seed, j as u64);
            let subset = sample_agent_subset(cfg.memory, cfg.subset_size, seed_j)?;
            run_single_seeded(series, &subset, cfg, seed_j, j)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = average_runs(&records)?;
    Ok((summary, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthSpec};

    fn quick_cfg(memory: u8, subset_size: usize, horizon: usize, runs: usize) -> RunConfig {
        RunConfig {
            memory,
            subset_size,
            horizon,
            runs,
            seed: 7,
            ..RunConfig::default()
        }
    }

    #[test]
    fn run_is_deterministic() {
        let spec = SynthSpec::planted(2, 10, 3, &[0.5, 0.3, 0.2], 0.1, 400, 11);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = quick_cfg(2, 3, 10, 1);
        let subset = spec.planted_types().unwrap();
        let a = run_single(&series, &subset, &cfg).unwrap();
        let b = run_single(&series, &subset, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn planted_single_type_is_predicted() {
        let spec = SynthSpec::planted(2, 10, 1, &[1.0], 0.0, 600, 3);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = quick_cfg(2, 1, 10, 1);
        let rec = run_single(&series, &spec.planted_types().unwrap(), &cfg).unwrap();
        assert!(rec.flag.is_none());
        let hits = rec.steps.iter().filter(|s| s.z_pred.signum() == s.z_obs.signum()).count();
        let accuracy = hits as f64 / rec.steps.len() as f64;
        assert!(accuracy >= 0.95, "directional accuracy {accuracy}");
    }

    #[test]
    fn decreasing_series_drives_composition_to_zero() {
        // Both strategies of the single type decide +1 on an all-plus
        // history, while the series keeps falling: the filter must push the
        // weight against the non-negativity boundary and predictions keep a
        // constant (non-negative) sign.
        let rates: Vec<f64> = (0..200).map(|i| 1000.0 - 0.5 * i as f64).collect();
        let series = PriceSeries::new(rates).unwrap();
        let subset =
            vec![AgentType::from_tables(2, 0b1111, 0b0111).unwrap()];
        let cfg = quick_cfg(2, 1, 10, 1);
        let rec = run_single(&series, &subset, &cfg).unwrap();
        assert!(rec.flag.is_none());
        assert!(rec.steps.iter().all(|s| s.z_pred >= -1e-12));
        let last = rec.steps.last().unwrap();
        assert!(last.state[0] <= 1e-9, "weight {}", last.state[0]);
        assert!(last.active >= 1);
        for s in &rec.steps {
            assert!((s.nu - (s.z_obs - s.z_pred)).abs() < 1e-12);
        }
    }

    #[test]
    fn average_runs_mean_and_sem() {
        let mk = |z_pred: f64| RunRecord {
            run_index: 0,
            seed: 0,
            memory: 2,
            subset: vec![[0, 1]],
            steps: vec![StepRecord {
                k: 13,
                z_obs: 1.5,
                z_pred,
                nu: 1.5 - z_pred,
                s: 2.0,
                state: vec![0.5],
                bias: vec![],
                active: 0,
                r_hat: 1.0,
                q_trace: 0.0,
                iterations: 2,
                cov: None,
            }],
            flag: None,
        };
        let records = vec![mk(1.0), mk(2.0), mk(3.0)];
        let summary = average_runs(&records).unwrap();
        assert_eq!(summary.z_star, vec![2.0]);
        assert_eq!(summary.s_star, vec![2.0]);
        // Sample std 1, M = 3.
        assert!((summary.sem[0] - 1.0 / 3.0f64.sqrt()).abs() < 1e-12);

        let identical = vec![mk(1.4), mk(1.4), mk(1.4)];
        assert_eq!(average_runs(&identical).unwrap().sem, vec![0.0]);
    }

    #[test]
    fn flagged_runs_are_excluded() {
        let good = RunRecord {
            run_index: 0,
            seed: 0,
            memory: 2,
            subset: vec![[0, 1]],
            steps: vec![],
            flag: None,
        };
        let mut bad = good.clone();
        bad.run_index = 1;
        bad.flag = Some("step 5: numerical failure".into());
        let summary = average_runs(&[good, bad]).unwrap();
        assert_eq!(summary.runs_used, 1);
        assert_eq!(summary.runs_flagged, 1);

        let all_bad: Vec<RunRecord> = Vec::new();
        assert!(average_runs(&all_bad).is_err());
    }

    #[test]
    fn orchestrate_single_run_equals_run_single() {
        let spec = SynthSpec::planted(2, 10, 3, &[0.4, 0.4, 0.2], 0.1, 300, 5);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = quick_cfg(2, 3, 10, 1);
        let (summary, records) = orchestrate(&series, &cfg).unwrap();
        assert_eq!(records.len(), 1);
        let subset = sample_agent_subset(2, 3, derive_seed(cfg.seed, 0)).unwrap();
        let direct = run_single_seeded(&series, &subset, &cfg, derive_seed(cfg.seed, 0), 0).unwrap();
        assert_eq!(records[0], direct);
        assert_eq!(summary.z_star.len(), direct.steps.len());
        assert!(summary.sem.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn orchestrate_is_seed_deterministic() {
        let spec = SynthSpec::planted(2, 8, 3, &[0.5, 0.2, 0.3], 0.15, 250, 21);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = quick_cfg(2, 4, 8, 6);
        let (a, _) = orchestrate(&series, &cfg).unwrap();
        let (b, _) = orchestrate(&series, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhaustive_subsets_collapse_sem_to_zero() {
        // m=1 has exactly 6 pairs; sampling 6 without replacement yields the
        // same canonical subset every run, so all runs are bit-identical.
        let spec = SynthSpec::planted(1, 8, 2, &[0.6, 0.4], 0.1, 250, 9);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = quick_cfg(1, 6, 8, 10);
        let (summary, records) = orchestrate(&series, &cfg).unwrap();
        assert_eq!(summary.runs_used, 10);
        for r in &records[1..] {
            assert_eq!(r.subset, records[0].subset);
            assert_eq!(r.steps, records[0].steps);
        }
        assert!(summary.sem.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn no_lookahead_in_predictions() {
        let spec = SynthSpec::planted(2, 10, 3, &[0.5, 0.3, 0.2], 0.1, 200, 17);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = quick_cfg(2, 3, 10, 3);
        let (base, _) = orchestrate(&series, &cfg).unwrap();

        // Perturb only the final rate: every prediction strictly before the
        // final step must be unchanged (the last prediction was made before
        // its measurement, so it is unchanged too; its z_obs differs).
        let mut rates = series.rates().to_vec();
        let last = rates.len() - 1;
        rates[last] += 0.37;
        let perturbed = PriceSeries::new(rates).unwrap();
        let (alt, _) = orchestrate(&perturbed, &cfg).unwrap();

        assert_eq!(base.ks, alt.ks);
        assert_eq!(base.z_star, alt.z_star);
        let n = base.len();
        assert_eq!(base.z_obs[..n - 1], alt.z_obs[..n - 1]);
        assert!((base.z_obs[n - 1] - alt.z_obs[n - 1]).abs() > 0.1);
    }

    #[test]
    fn run_order_permutation_keeps_summary() {
        let spec = SynthSpec::planted(2, 8, 3, &[0.4, 0.3, 0.3], 0.1, 220, 2);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = quick_cfg(2, 3, 8, 5);
        let (summary, mut records) = orchestrate(&series, &cfg).unwrap();
        records.reverse();
        records.swap(0, 2);
        let permuted = average_runs(&records).unwrap();
        assert_eq!(summary.z_star, permuted.z_star);
        assert_eq!(summary.s_star, permuted.s_star);
        assert_eq!(summary.sem, permuted.sem);
    }

    #[test]
    fn short_series_is_rejected() {
        let series = PriceSeries::new(vec![100.0; 10]).unwrap();
        let cfg = quick_cfg(2, 3, 10, 1);
        assert!(matches!(
            orchestrate(&series, &cfg),
            Err(Error::NotEnoughData(_))
        ));
    }

    #[test]
    fn zero_runs_is_invalid() {
        let cfg = quick_cfg(2, 3, 10, 0);
        assert!(cfg.validate().is_err());
    }
}
