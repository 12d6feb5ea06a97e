//! Inference of the composition of a heterogeneous trader population from a
//! price series.
//!
//! A population of binary-decision agents (pairs of lookup-table strategies
//! scored on a sliding horizon) is assumed to drive the price increments.
//! The non-negative weight of each agent type is tracked with a recursive
//! least-squares filter that fuses the state prediction, the observed
//! increment and the active non-negativity constraints through a KKT
//! pseudo-inverse solve, with covariance-matched adaptive process and
//! measurement noise, optional bias-state augmentation, and Monte Carlo
//! averaging over many random agent subsets.
//!
//! Modules:
//! - [`mg`]: strategies, agent types, scoring windows, decision rows
//! - [`kalman`]: baseline linear filter (Joseph-form update)
//! - [`constrained`]: constrained fusion step with an active set
//! - [`noise`]: covariance-matching noise estimation
//! - [`bias`]: bias-state augmentation
//! - [`ensemble`]: per-run filter loop and Monte Carlo averaging
//! - [`diagnostics`]: log-return residuals and calibration checks
//! - [`synth`]: ground-truth synthetic market generator
//! - [`io`]: CSV/JSON/JSONL formats and run directories

pub mod bias;
pub mod constrained;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod kalman;
mod linalg;
pub mod mg;
pub mod noise;
pub mod series;
pub mod synth;

pub use error::{Error, Result};

pub use bias::{BiasMode, BiasSpec};
pub use constrained::{ActiveSet, ConstraintSet, IterationControl};
pub use ensemble::{EnsembleSummary, RunConfig, RunRecord};
pub use kalman::{GaussianEstimate, LinearModel};
pub use mg::{AgentType, Strategy};
pub use series::PriceSeries;
pub use synth::SynthSpec;
