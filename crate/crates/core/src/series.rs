//! Price (exchange-rate) series and its one-step increments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered sequence of strictly positive rates, optionally labelled.
///
/// Increments are price differences between consecutive rates; the first
/// increment is indexed at 1 so that increment `k` belongs to timestep `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    rates: Vec<f64>,
    timestamps: Option<Vec<String>>,
}

impl PriceSeries {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        Self::validate(&rates)?;
        Ok(Self { rates, timestamps: None })
    }

    pub fn with_timestamps(rates: Vec<f64>, timestamps: Vec<String>) -> Result<Self> {
        if rates.len() != timestamps.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rates but {} timestamps",
                rates.len(),
                timestamps.len()
            )));
        }
        Self::validate(&rates)?;
        Ok(Self { rates, timestamps: Some(timestamps) })
    }

    fn validate(rates: &[f64]) -> Result<()> {
        for (i, &r) in rates.iter().enumerate() {
            if !r.is_finite() || r <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "rate at index {i} is {r}; rates must be finite and positive"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn rate(&self, k: usize) -> f64 {
        self.rates[k]
    }

    /// Increment z_k = r_k - r_{k-1}; defined for 1 <= k < len.
    pub fn increment(&self, k: usize) -> f64 {
        self.rates[k] - self.rates[k - 1]
    }

    /// Minimum series length before a filter with memory `m` and scoring
    /// horizon `t` can take a single estimation step.
    pub fn min_estimation_len(memory: u8, horizon: usize) -> usize {
        memory as usize + horizon + 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increments_match_definition() {
        let s = PriceSeries::new(vec![100.0, 100.5, 99.75]).unwrap();
        assert_eq!(s.increment(1), 0.5);
        assert_eq!(s.increment(2), 99.75 - 100.5);
    }

    #[test]
    fn rejects_nonpositive_rates() {
        assert!(PriceSeries::new(vec![100.0, 0.0]).is_err());
        assert!(PriceSeries::new(vec![100.0, -3.0]).is_err());
        assert!(PriceSeries::new(vec![100.0, f64::NAN]).is_err());
    }

    #[test]
    fn timestamp_length_checked() {
        assert!(PriceSeries::with_timestamps(vec![1.0, 2.0], vec!["a".into()]).is_err());
    }
}
