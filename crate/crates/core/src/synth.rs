//! Synthetic market generator with known ground truth.
//!
//! A planted subset of agent types plays the game forward: every increment
//! is the weighted decision row plus Gaussian noise plus an optional constant
//! offset, so the generated series closes the loop with the decision model
//! and gives the filter a recoverable truth. The scoring window is seeded
//! with an initial outcome history so every generated increment carries
//! signal from the first step.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mg::{
    build_decision_row, sample_agent_subset, winning_outcome, AgentType, OutcomeWindow, TieBreak,
    TieBreaker,
};
use crate::series::PriceSeries;

fn default_initial_price() -> f64 {
    100.0
}

/// Ground-truth specification for a synthetic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Agent memory m.
    pub memory: u8,
    /// Scoring horizon T; must match the inference horizon for bit-exact
    /// decision replay.
    pub horizon: usize,
    /// Planted subset as strategy-table pairs.
    pub types: Vec<[u32; 2]>,
    /// Planted non-negative composition x*.
    pub weights: Vec<f64>,
    /// Measurement-noise standard deviation.
    pub noise_sigma: f64,
    /// Constant measurement offset beta.
    #[serde(default)]
    pub bias: f64,
    /// Number of rates to generate (including the initial price).
    pub length: usize,
    pub seed: u64,
    #[serde(default = "default_initial_price")]
    pub initial_price: f64,
    /// Seed outcomes for the scoring window; must have length m + T when
    /// given, otherwise they are drawn from the generator seed.
    #[serde(default)]
    pub initial_history: Option<Vec<i8>>,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl SynthSpec {
    /// Plant a randomly sampled subset with the given weights. The initial
    /// price is set high enough that the worst-case drift of the planted
    /// signal cannot drive the price negative.
    pub fn planted(
        memory: u8,
        horizon: usize,
        n_types: usize,
        weights: &[f64],
        noise_sigma: f64,
        length: usize,
        seed: u64,
    ) -> Self {
        let types = sample_agent_subset(memory, n_types, seed)
            .expect("subset parameters must be valid")
            .iter()
            .map(|t| t.tables())
            .collect();
        let drift_bound = length as f64 * weights.iter().sum::<f64>().max(1.0);
        Self {
            memory,
            horizon,
            types,
            weights: weights.to_vec(),
            noise_sigma,
            bias: 0.0,
            length,
            seed,
            initial_price: default_initial_price() + 4.0 * drift_bound,
            initial_history: None,
            tie_break: TieBreak::First,
        }
    }

    pub fn planted_types(&self) -> Result<Vec<AgentType>> {
        self.types
            .iter()
            .map(|&[a, b]| AgentType::from_tables(self.memory, a, b))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::InvalidInput("at least one planted type required".into()));
        }
        if self.types.len() != self.weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} types but {} weights",
                self.types.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise sigma must be non-negative".into()));
        }
        if !(self.initial_price > 0.0) {
            return Err(Error::InvalidInput("initial price must be positive".into()));
        }
        let warmup = self.memory as usize + self.horizon + 2;
        if self.length < warmup {
            return Err(Error::InvalidInput(format!(
                "length {} shorter than warm-up {warmup}",
                self.length
            )));
        }
        if let Some(h) = &self.initial_history {
            if h.len() != self.memory as usize + self.horizon {
                return Err(Error::InvalidInput(format!(
                    "initial history must have m + T = {} outcomes, got {}",
                    self.memory as usize + self.horizon,
                    h.len()
                )));
            }
            if h.iter().any(|&o| o != 1 && o != -1) {
                return Err(Error::InvalidInput("initial history entries must be +/-1".into()));
            }
        }
        Ok(())
    }
}

/// Truth record for one generated step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthStep {
    pub k: usize,
    /// Decision row of the planted types.
    pub decisions: Vec<i8>,
    /// Noise-free part of the increment: decisions . weights + bias.
    pub signal: f64,
    /// Realized increment.
    pub z: f64,
    /// Winning outcome fed back into the window.
    pub w: i8,
}

/// Full ground-truth log of a generated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLog {
    pub memory: u8,
    pub horizon: usize,
    pub types: Vec<[u32; 2]>,
    pub weights: Vec<f64>,
    /// Noise level actually used; smaller than requested when the price had
    /// to be kept positive.
    pub sigma_used: f64,
    pub initial_history: Vec<i8>,
    pub steps: Vec<TruthStep>,
}

/// Generate a synthetic price series and its truth log.
///
/// Deterministic given the spec. If the price path crosses zero the noise is
/// halved and generation restarts from the same seed, so callers can detect
/// the adjustment through `TruthLog::sigma_used`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(PriceSeries, TruthLog)> {
    spec.validate()?;
    let types = spec.planted_types()?;
    let weights = DVector::from_row_slice(&spec.weights);

    let mut sigma = spec.noise_sigma;
    for _attempt in 0..12 {
        match try_generate(spec, &types, &weights, sigma)? {
            Some(out) => return Ok(out),
            None => sigma *= 0.5,
        }
    }
    Err(Error::Numerical(
        "could not keep the synthetic price positive even with negligible noise".into(),
    ))
}

fn try_generate(
    spec: &SynthSpec,
    types: &[AgentType],
    weights: &DVector<f64>,
    sigma: f64,
) -> Result<Option<(PriceSeries, TruthLog)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tie = TieBreaker::from_mode(spec.tie_break, spec.seed.wrapping_add(1));

    // Seed the scoring window with m + T outcomes so the first generated
    // increment already carries the planted signal.
    let seed_outcomes: Vec<i8> = match &spec.initial_history {
        Some(h) => h.clone(),
        None => (0..spec.memory as usize + spec.horizon)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect(),
    };
    let mut window = OutcomeWindow::new(spec.memory, spec.horizon)?;
    for &o in &seed_outcomes {
        window.push(o);
    }
    debug_assert!(window.ready());

    let mut rates = Vec::with_capacity(spec.length);
    rates.push(spec.initial_price);
    let mut steps = Vec::with_capacity(spec.length - 1);

    for k in 1..spec.length {
        let row = build_decision_row(types, &window, &mut tie)?;
        let decisions = row.decisions().to_vec();
        let signal = (row.to_matrix() * weights)[(0, 0)] + spec.bias;
        let z = signal + sigma * normal.sample(&mut rng);
        let rate = rates[k - 1] + z;
        if rate <= 0.0 {
            return Ok(None);
        }
        rates.push(rate);
        let w = winning_outcome(z);
        steps.push(TruthStep { k, decisions, signal, z, w });
        window.push(w);
    }

    let series = PriceSeries::new(rates)?;
    let log = TruthLog {
        memory: spec.memory,
        horizon: spec.horizon,
        types: spec.types.clone(),
        weights: spec.weights.clone(),
        sigma_used: sigma,
        initial_history: seed_outcomes,
        steps,
    };
    Ok(Some((series, log)))
}
