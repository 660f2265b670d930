//! Median-stop assessor.
//!
//! A trial is stopped at step `s` when its best intermediate value so far is
//! strictly worse than the median of the running averages, at step `s`, of
//! the trials that completed naturally.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::OptimizeMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssessorConfig {
    pub name: String,
    pub optimize_mode: OptimizeMode,
    pub start_step: usize,
    /// Completed trials required before any stop.
    pub quorum: usize,
}

impl Default for AssessorConfig {
    fn default() -> Self {
        Self {
            name: "Medianstop".into(),
            optimize_mode: OptimizeMode::Maximize,
            start_step: 10,
            quorum: 3,
        }
    }
}

impl AssessorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "Medianstop" {
            return Err(Error::Config(format!("unsupported assessor `{}`", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Default)]
pub struct MedianStopAssessor {
    config: AssessorConfig,
    streams: BTreeMap<String, Vec<f64>>,
    completed: BTreeSet<String>,
}

impl MedianStopAssessor {
    pub fn new(config: AssessorConfig) -> Self {
        Self {
            config,
            streams: BTreeMap::new(),
            completed: BTreeSet::new(),
        }
    }

    pub fn stream(&self, trial_id: &str) -> Option<&[f64]> {
        self.streams.get(trial_id).map(Vec::as_slice)
    }

    /// Append the value for `step` (1-based). Steps must be dense and in order.
    pub fn record(&mut self, trial_id: &str, step: usize, value: f64) -> Result<()> {
        let stream = self.streams.entry(trial_id.to_owned()).or_default();
        if step != stream.len() + 1 {
            return Err(Error::Protocol(format!(
                "trial {trial_id}: expected step {}, got {step}",
                stream.len() + 1
            )));
        }
        if !value.is_finite() {
            return Err(Error::Protocol(format!("trial {trial_id}: non-finite value")));
        }
        stream.push(value);
        Ok(())
    }

    /// Mark a trial as finished naturally; its stream joins the comparison pool.
    pub fn mark_completed(&mut self, trial_id: &str) {
        self.streams.entry(trial_id.to_owned()).or_default();
        self.completed.insert(trial_id.to_owned());
    }

    pub fn assess(&self, trial_id: &str, step: usize) -> Result<Verdict> {
        let current = self
            .streams
            .get(trial_id)
            .ok_or_else(|| Error::UnknownTrial(trial_id.to_owned()))?;
        if step == 0 || current.len() < step {
            return Err(Error::Invalid(format!(
                "trial {trial_id}: cannot assess step {step} with {} values",
                current.len()
            )));
        }
        if step < self.config.start_step {
            return Ok(Verdict::Continue);
        }
        let mut means: Vec<f64> = self
            .completed
            .iter()
            .filter(|id| id.as_str() != trial_id)
            .filter_map(|id| self.streams.get(id))
            .filter(|s| s.len() >= step)
            .map(|s| s[..step].iter().sum::<f64>() / step as f64)
            .collect();
        if means.len() < self.config.quorum.max(1) {
            return Ok(Verdict::Continue);
        }
        let median = lower_median(&mut means);
        let prefix = &current[..step];
        let stop = match self.config.optimize_mode {
            OptimizeMode::Maximize => prefix.iter().copied().fold(f64::NEG_INFINITY, f64::max) < median,
            OptimizeMode::Minimize => prefix.iter().copied().fold(f64::INFINITY, f64::min) > median,
        };
        Ok(if stop { Verdict::Stop } else { Verdict::Continue })
    }
}

/// Element at rank `(n - 1) / 2` after sorting; the lower of the two middle
/// elements when `n` is even.
pub fn lower_median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}
