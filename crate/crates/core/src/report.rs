//! Post-hoc views of an experiment: parallel-coordinates table, confusion
//! matrices and status summaries.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::journal::{self, Replay, TrialRecord, TrialStatus};
use crate::protocol::DEFAULT_KEY;
use crate::searchspace::SearchSpace;
use crate::OptimizeMode;

/// Metric columns appended after the hyperparameters.
pub const METRIC_COLUMNS: [&str; 3] = ["best training", DEFAULT_KEY, "test"];

/// Replay the journal of an experiment directory.
pub fn load_experiment(experiment_dir: &Path) -> Result<Replay> {
    let path = experiment_dir.join("journal");
    if !path.exists() {
        return Err(Error::Invalid(format!("no journal in {}", experiment_dir.display())));
    }
    journal::replay(&path)
}

/// Search space recorded in the experiment's configuration snapshot.
pub fn recorded_search_space(replay: &Replay) -> Result<SearchSpace> {
    SearchSpace::from_json(&replay.config["search_space"])
}

fn optimize_mode(replay: &Replay) -> OptimizeMode {
    serde_json::from_value(replay.config["tuner"]["optimize_mode"].clone()).unwrap_or_default()
}

/// CSV with one row per succeeded trial: hyperparameters in search-space
/// order, then best training, best validation (`default`) and test.
pub fn export_parallel_coordinates(replay: &Replay) -> Result<String> {
    let space = recorded_search_space(replay)?;
    let mut out = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = space.names().chain(METRIC_COLUMNS).collect();
    out.write_record(&header)?;
    for trial in replay.trials.iter().filter(|t| t.status == TrialStatus::Succeeded) {
        let Some(report) = &trial.final_report else { continue };
        let mut row: Vec<String> = space
            .names()
            .map(|name| trial.assignment.get(name).map(ToString::to_string).unwrap_or_default())
            .collect();
        for key in METRIC_COLUMNS {
            row.push(report.values().get(key).map(ToString::to_string).unwrap_or_default());
        }
        out.write_record(&row)?;
    }
    let bytes = out.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= n_classes || l >= n_classes {
                return Err(Error::Data(format!("class index out of range for {n_classes} classes")));
            }
            counts[l][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|k| self.counts[k][k]).sum()
    }

    /// Accuracy in percent; undefined for an empty matrix.
    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Invalid("accuracy of an empty confusion matrix".into())),
            n => Ok(self.trace() as f64 / n as f64 * 100.0),
        }
    }

    /// CSV with a `true\pred` corner cell and class indices on both axes.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_owned()];
        header.extend((0..self.n_classes()).map(|k| k.to_string()));
        out.write_record(&header)?;
        for (k, row) in self.counts.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            out.write_record(&rec)?;
        }
        let bytes = out.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Succeeded trial with the best final `default` value (first wins ties).
pub fn best_trial(replay: &Replay) -> Option<&TrialRecord> {
    let mode = optimize_mode(replay);
    let mut best: Option<(&TrialRecord, f64)> = None;
    for trial in &replay.trials {
        if trial.status != TrialStatus::Succeeded {
            continue;
        }
        if let Some(v) = trial.final_default() {
            if best.is_none_or(|(_, b)| mode.better(v, b)) {
                best = Some((trial, v));
            }
        }
    }
    best.map(|(t, _)| t)
}

/// Human-readable summary; `now_ms` bounds the elapsed time of a live run.
pub fn status(replay: &Replay, now_ms: u64) -> String {
    let mut s = String::new();
    let name = replay.config["experiment_name"].as_str().unwrap_or("?");
    let _ = writeln!(s, "experiment {} ({name})", replay.experiment_id);
    let end = match &replay.ended {
        Some((reason, at)) => {
            let _ = writeln!(s, "state: ended ({reason})");
            *at
        }
        None => {
            let _ = writeln!(s, "state: running");
            now_ms
        }
    };
    let elapsed = end.saturating_sub(replay.started_at) as f64 / 1000.0;
    let _ = writeln!(s, "elapsed: {elapsed:.1}s");
    let counts: Vec<String> = TrialStatus::ALL
        .iter()
        .map(|st| format!("{st:?} {}", replay.count(*st)))
        .collect();
    let _ = writeln!(s, "trials: {} ({})", replay.trials.len(), counts.join(", "));
    match best_trial(replay) {
        Some(t) => {
            let _ = writeln!(
                s,
                "best: {} (trial {}, ID {}) {}",
                t.final_default().unwrap_or(f64::NAN),
                t.sequence_id + 1,
                t.trial_id,
                t.assignment
            );
        }
        None => {
            let _ = writeln!(s, "best: none yet");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journal::JournalEvent;
    use crate::protocol::MetricReport;
    use crate::searchspace::{ParamAssignment, ParamValue};
    use indexmap::IndexMap;
    use serde_json::json;

    fn replay_with(outcomes: &[(TrialStatus, Option<f64>)]) -> Replay {
        let space = json!({
            "n_rec": {"_type": "quniform", "_value": [11, 256, 1]},
            "reset_mechanism": {"_type": "choice", "_value": ["subtract", "zero"]}
        });
        let mut events = vec![JournalEvent::ExperimentStarted {
            experiment_id: "exp00001".into(),
            at: 1_000,
            config: json!({"experiment_name": "demo", "search_space": space}),
        }];
        for (i, (status, value)) in outcomes.iter().enumerate() {
            let id = format!("trial{i:03}");
            let assignment: ParamAssignment = [
                ("n_rec".to_owned(), ParamValue::Int(20 + i as i64)),
                ("reset_mechanism".to_owned(), ParamValue::Str("zero".into())),
            ]
            .into_iter()
            .collect();
            events.push(JournalEvent::TrialCreated {
                trial_id: id.clone(),
                sequence_id: i as u64,
                assignment,
                at: 1_000,
            });
            events.push(JournalEvent::StatusChanged {
                trial_id: id.clone(),
                status: TrialStatus::Running,
                slot: None,
                reason: None,
                at: 1_100,
            });
            if let Some(v) = value {
                events.push(JournalEvent::Metric {
                    trial_id: id.clone(),
                    report: MetricReport::Final {
                        values: IndexMap::from([
                            ("default".to_owned(), *v),
                            ("best training".to_owned(), v + 1.0),
                            ("test".to_owned(), v - 0.125),
                        ]),
                    },
                });
            }
            events.push(JournalEvent::StatusChanged {
                trial_id: id,
                status: *status,
                slot: None,
                reason: None,
                at: 2_000,
            });
        }
        Replay::from_events(&events).unwrap()
    }

    #[test]
    fn export_filters_succeeded() {
        let r = replay_with(&[
            (TrialStatus::Succeeded, Some(80.0)),
            (TrialStatus::Failed, None),
            (TrialStatus::Succeeded, Some(91.5)),
            (TrialStatus::Succeeded, Some(70.25)),
        ]);
        let csv = export_parallel_coordinates(&r).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n_rec,reset_mechanism,best training,default,test");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "22,zero,92.5,91.5,91.375");
        assert_eq!(export_parallel_coordinates(&r).unwrap(), csv);
    }

    #[test]
    fn export_empty_has_header() {
        let r = replay_with(&[(TrialStatus::Failed, None)]);
        assert_eq!(
            export_parallel_coordinates(&r).unwrap(),
            "n_rec,reset_mechanism,best training,default,test\n"
        );
    }

    #[test]
    fn confusion_examples() {
        let m = ConfusionMatrix::new(&[0, 1, 1], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.counts[2][1], 1);
        assert!((m.accuracy().unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let m = ConfusionMatrix::new(&[2, 0, 1], &[2, 0, 1], 3).unwrap();
        assert_eq!(m.accuracy().unwrap(), 100.0);
        assert_eq!(m.trace(), m.total());
        let m = ConfusionMatrix::new(&[], &[], 3).unwrap();
        assert!(m.accuracy().is_err());
        assert!(ConfusionMatrix::new(&[3], &[0], 3).is_err());
        assert!(ConfusionMatrix::new(&[0, 1], &[0], 3).is_err());
        let csv = ConfusionMatrix::new(&[0, 1], &[1, 1], 2).unwrap().to_csv().unwrap();
        assert_eq!(csv, "true\\pred,0,1\n0,0,0\n1,1,1\n");
    }

    #[test]
    fn status_counts_and_best() {
        let r = replay_with(&[
            (TrialStatus::Succeeded, Some(80.0)),
            (TrialStatus::Succeeded, Some(90.0)),
            (TrialStatus::EarlyStopped, None),
            (TrialStatus::Succeeded, Some(85.0)),
            (TrialStatus::Succeeded, Some(90.0)),
        ]);
        let text = status(&r, 5_000);
        assert!(text.contains("Succeeded 4"), "{text}");
        assert!(text.contains("EarlyStopped 1"));
        assert!(text.contains("best: 90 (trial 2, ID trial001)"), "{text}");
        assert_eq!(best_trial(&r).unwrap().trial_id, "trial001");
        let fresh = replay_with(&[]);
        let text = status(&fresh, 1_500);
        assert!(text.contains("Waiting 0, Running 0, Succeeded 0"));
        assert!(text.contains("elapsed: 0.5s"));
        assert!(text.contains("best: none yet"));
    }
}
