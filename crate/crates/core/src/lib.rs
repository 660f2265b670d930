//! Experiment orchestration for application-oriented hyperparameter
//! optimization of recurrent spiking networks.
//!
//! The engine proposes assignments from a [`searchspace::SearchSpace`] with an
//! annealing [`tuner`], runs each trial as a child process speaking the file
//! based [`protocol`], stops laggards with the median-stop [`assessor`] and
//! records everything in an append-only [`journal`]. The built-in trial
//! ([`objective`]) trains an [`snn`] with e-prop on a synthetic spiking task.

pub mod assessor;
pub mod engine;
pub mod error;
pub mod journal;
pub mod objective;
pub mod protocol;
pub mod report;
pub mod searchspace;
pub mod snn;
pub mod tuner;

pub use error::{Error, Result};

/// Direction of optimization for the tuner and assessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizeMode {
    #[default]
    Maximize,
    Minimize,
}

impl OptimizeMode {
    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            OptimizeMode::Maximize => a > b,
            OptimizeMode::Minimize => a < b,
        }
    }
}
