//! Annealing tuner: sample around the best observed assignment with a
//! geometrically shrinking neighbourhood.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{ParamAssignment, ParamSpec, SearchSpace};
use crate::OptimizeMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    pub name: String,
    pub optimize_mode: OptimizeMode,
    /// Initial temperature, in (0, 1].
    pub t0: f64,
    /// Per-proposal temperature multiplier, in (0, 1).
    pub decay: f64,
    /// Number of pure-prior proposals before annealing starts.
    pub warmup: u64,
    /// Reseed period in trials (`n_tr`).
    pub reseed_every: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            name: "Anneal".into(),
            optimize_mode: OptimizeMode::Maximize,
            t0: 1.0,
            decay: 0.95,
            warmup: 20,
            reseed_every: 250,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "Anneal" {
            return Err(Error::Config(format!("unsupported tuner `{}`", self.name)));
        }
        if !(self.t0 > 0.0 && self.t0 <= 1.0) {
            return Err(Error::Config("tuner.t0 must lie in (0, 1]".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config("tuner.decay must lie in (0, 1)".into()));
        }
        if self.reseed_every == 0 {
            return Err(Error::Config("tuner.reseed_every must be positive".into()));
        }
        Ok(())
    }

    pub fn reseed_policy(&self) -> ReseedPolicy {
        ReseedPolicy {
            n_tr: self.reseed_every,
        }
    }
}

/// Reseed the tuner every `n_tr` trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReseedPolicy {
    pub n_tr: u64,
}

impl ReseedPolicy {
    pub fn fires(&self, sequence_id: u64) -> bool {
        sequence_id > 0 && sequence_id.is_multiple_of(self.n_tr)
    }
}

#[derive(Debug, Clone)]
pub struct AnnealTuner {
    config: TunerConfig,
    seed: u64,
    rng: ChaCha8Rng,
    history: Vec<(ParamAssignment, f64)>,
    proposals_made: u64,
    // proposals since the last reseed; drives the temperature
    anneal_step: u64,
}

impl AnnealTuner {
    pub fn new(config: TunerConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
            proposals_made: 0,
            anneal_step: 0,
        }
    }

    pub fn config(&self) -> &TunerConfig {
        &self.config
    }

    pub fn proposals_made(&self) -> u64 {
        self.proposals_made
    }

    pub fn history(&self) -> &[(ParamAssignment, f64)] {
        &self.history
    }

    pub fn temperature(&self) -> f64 {
        self.config.t0 * self.config.decay.powf(self.anneal_step as f64)
    }

    /// Best entry under the optimize mode; ties keep the earliest.
    pub fn best(&self) -> Option<&(ParamAssignment, f64)> {
        let mode = self.config.optimize_mode;
        self.history
            .iter()
            .fold(None, |best: Option<&(ParamAssignment, f64)>, entry| match best {
                Some(b) if !mode.better(entry.1, b.1) => Some(b),
                _ => Some(entry),
            })
    }

    pub fn propose(&mut self, space: &SearchSpace) -> ParamAssignment {
        let temperature = self.temperature();
        let warm = self.proposals_made >= self.config.warmup;
        let center = if warm {
            self.best().map(|(a, _)| a.clone())
        } else {
            None
        };
        self.proposals_made += 1;
        self.anneal_step += 1;

        let Some(center) = center else {
            return space.sample(&mut self.rng);
        };
        space
            .iter()
            .map(|(name, spec)| {
                let value = match (spec, center.get(name)) {
                    (ParamSpec::QUniform { low, high, .. }, Some(c)) if c.as_f64().is_some() => {
                        let sd = temperature * (high - low);
                        let normal = Normal::new(c.as_f64().unwrap(), sd).expect("finite sd");
                        spec.quantize(normal.sample(&mut self.rng)).expect("quniform")
                    }
                    (ParamSpec::Choice { values }, Some(c)) if values.contains(c) => {
                        if self.rng.random_bool(temperature.clamp(0.0, 1.0)) {
                            values[self.rng.random_range(0..values.len())].clone()
                        } else {
                            c.clone()
                        }
                    }
                    // center predates this parameter: fall back to the prior
                    _ => spec.sample(&mut self.rng),
                };
                (name.to_owned(), value)
            })
            .collect()
    }

    pub fn observe(&mut self, assignment: ParamAssignment, final_metric: f64) -> Result<()> {
        if !final_metric.is_finite() {
            log::warn!("tuner: rejecting non-finite metric {final_metric} for {assignment}");
            return Err(Error::Invalid(format!("non-finite metric {final_metric}")));
        }
        self.history.push((assignment, final_metric));
        Ok(())
    }

    /// Fresh random stream and temperature reset when the policy fires.
    /// History is kept.
    pub fn maybe_reseed(&mut self, sequence_id: u64, policy: &ReseedPolicy) -> bool {
        if !policy.fires(sequence_id) {
            return false;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sequence_id);
        self.rng = rng;
        self.anneal_step = 0;
        log::info!("tuner reseeded at trial {sequence_id}");
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::ParamValue;
    use proptest::prelude::*;

    fn toy_space() -> SearchSpace {
        SearchSpace::parse(
            r#"{"a": {"_type":"quniform","_value":[-5, 5, 0.01]},
                "b": {"_type":"quniform","_value":[-5, 5, 0.01]},
                "c": {"_type":"choice","_value":["x","y","z"]}}"#,
        )
        .unwrap()
    }

    fn assignment(a: f64, b: f64, c: &str) -> ParamAssignment {
        [("a", a.into()), ("b", b.into()), ("c", ParamValue::from(c))]
            .into_iter()
            .collect()
    }

    fn no_warmup(decay: f64) -> TunerConfig {
        TunerConfig {
            warmup: 0,
            decay,
            ..TunerConfig::default()
        }
    }

    #[test]
    fn empty_history_matches_prior() {
        let space = toy_space();
        let mut tuner = AnnealTuner::new(no_warmup(0.5), 11);
        let mut prior_rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            assert_eq!(tuner.propose(&space), space.sample(&mut prior_rng));
        }
    }

    #[test]
    fn warmup_draws_from_prior() {
        let space = toy_space();
        let mut tuner = AnnealTuner::new(TunerConfig::default(), 5);
        tuner.observe(assignment(0.0, 0.0, "x"), 1.0).unwrap();
        let mut prior_rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert_eq!(tuner.propose(&space), space.sample(&mut prior_rng));
        }
    }

    #[test]
    fn center_is_argmax() {
        let mut tuner = AnnealTuner::new(no_warmup(0.5), 0);
        tuner.observe(assignment(1.0, 1.0, "x"), 0.9).unwrap();
        tuner.observe(assignment(-1.0, -1.0, "y"), 0.1).unwrap();
        assert_eq!(tuner.best().unwrap().0, assignment(1.0, 1.0, "x"));

        let mut min = AnnealTuner::new(
            TunerConfig {
                optimize_mode: OptimizeMode::Minimize,
                ..no_warmup(0.5)
            },
            0,
        );
        min.observe(assignment(1.0, 1.0, "x"), 0.9).unwrap();
        min.observe(assignment(-1.0, -1.0, "y"), 0.1).unwrap();
        assert_eq!(min.best().unwrap().0, assignment(-1.0, -1.0, "y"));
    }

    #[test]
    fn ties_keep_first() {
        let mut tuner = AnnealTuner::new(no_warmup(0.5), 0);
        tuner.observe(assignment(1.0, 1.0, "x"), 0.5).unwrap();
        tuner.observe(assignment(2.0, 2.0, "y"), 0.5).unwrap();
        assert_eq!(tuner.best().unwrap().0, assignment(1.0, 1.0, "x"));
    }

    #[test]
    fn rejects_non_finite() {
        let mut tuner = AnnealTuner::new(TunerConfig::default(), 0);
        assert!(tuner.observe(assignment(0.0, 0.0, "x"), f64::NAN).is_err());
        assert!(tuner.observe(assignment(0.0, 0.0, "x"), f64::INFINITY).is_err());
        assert!(tuner.history().is_empty());
    }

    #[test]
    fn zero_temperature_returns_center() {
        let space = toy_space();
        let config = TunerConfig {
            t0: 1e-300,
            ..no_warmup(0.5)
        };
        let mut tuner = AnnealTuner::new(config, 3);
        let center = assignment(1.23, -0.5, "z");
        tuner.observe(center.clone(), 1.0).unwrap();
        for _ in 0..50 {
            assert_eq!(tuner.propose(&space), center);
        }
    }

    #[test]
    fn proposals_stay_in_domain() {
        let space = toy_space();
        let mut tuner = AnnealTuner::new(no_warmup(0.99), 8);
        tuner.observe(assignment(4.99, -5.0, "y"), 1.0).unwrap();
        for _ in 0..500 {
            assert!(space.admits(&tuner.propose(&space)));
        }
    }

    #[test]
    fn reseed_policy_examples() {
        let policy = ReseedPolicy { n_tr: 250 };
        let mut tuner = AnnealTuner::new(TunerConfig::default(), 1);
        assert!(!tuner.maybe_reseed(0, &policy));
        assert!(tuner.maybe_reseed(250, &policy));
        assert!(!tuner.maybe_reseed(251, &policy));
        assert!(tuner.maybe_reseed(500, &policy));
    }

    #[test]
    fn reseed_resets_temperature_and_keeps_history() {
        let space = toy_space();
        let mut tuner = AnnealTuner::new(no_warmup(0.5), 1);
        tuner.observe(assignment(0.0, 0.0, "x"), 1.0).unwrap();
        for _ in 0..5 {
            tuner.propose(&space);
        }
        assert!(tuner.temperature() < 0.1);
        assert!(tuner.maybe_reseed(250, &ReseedPolicy { n_tr: 250 }));
        assert_eq!(tuner.temperature(), 1.0);
        assert_eq!(tuner.history().len(), 1);
        assert_eq!(tuner.proposals_made(), 5);
    }

    #[test]
    fn deterministic_given_seed_and_observations() {
        let space = toy_space();
        let run = || {
            let mut tuner = AnnealTuner::new(no_warmup(0.9), 77);
            let mut out = Vec::new();
            for i in 0..40 {
                let p = tuner.propose(&space);
                let a = p.get("a").unwrap().as_f64().unwrap();
                tuner.observe(p.clone(), -(a - 1.0).powi(2) + i as f64 * 0.0).unwrap();
                out.push(p);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concentration_is_monotone() {
        let space = SearchSpace::parse(r#"{"a": {"_type":"quniform","_value":[-100, 100, 0.001]}}"#).unwrap();
        let center: ParamAssignment = [("a", ParamValue::Float(0.0))].into_iter().collect();
        let mut prev = f64::INFINITY;
        for step in 0..8u64 {
            let mut tuner = AnnealTuner::new(no_warmup(0.7), step);
            tuner.observe(center.clone(), 1.0).unwrap();
            tuner.anneal_step = step;
            let n = 2000;
            let mut total = 0.0;
            for _ in 0..n {
                tuner.anneal_step = step;
                total += tuner.propose(&space).get("a").unwrap().as_f64().unwrap().abs();
            }
            let mean = total / n as f64;
            assert!(mean <= prev, "step {step}: {mean} > {prev}");
            prev = mean;
        }
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_affine_rescale(
            metrics in prop::collection::vec(-50i32..50, 1..20),
            slope in 1u32..8,
            offset in -10i32..10,
        ) {
            let mut raw = AnnealTuner::new(no_warmup(0.5), 0);
            let mut scaled = AnnealTuner::new(no_warmup(0.5), 0);
            for (i, m) in metrics.iter().enumerate() {
                let a = assignment(i as f64 * 0.01, 0.0, "x");
                raw.observe(a.clone(), *m as f64 * 0.25).unwrap();
                scaled.observe(a, (*m as f64 * 0.25) * slope as f64 + offset as f64).unwrap();
            }
            prop_assert_eq!(&raw.best().unwrap().0, &scaled.best().unwrap().0);
        }
    }
}
