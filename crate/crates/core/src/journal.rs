//! Append-only experiment journal: one JSON event per line.
//!
//! Replaying the events reconstructs every [`TrialRecord`]. A torn trailing
//! line (the engine died mid-write) is ignored by readers and truncated by
//! [`recover`].

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::MetricReport;
use crate::searchspace::ParamAssignment;

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrialStatus {
    Waiting,
    Running,
    Succeeded,
    Failed,
    EarlyStopped,
    Canceled,
}

impl TrialStatus {
    pub const ALL: [TrialStatus; 6] = [
        TrialStatus::Waiting,
        TrialStatus::Running,
        TrialStatus::Succeeded,
        TrialStatus::Failed,
        TrialStatus::EarlyStopped,
        TrialStatus::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        !matches!(self, TrialStatus::Waiting | TrialStatus::Running)
    }

    fn can_become(self, next: TrialStatus) -> bool {
        use TrialStatus::*;
        match (self, next) {
            (Waiting, Running) => true,
            // Failed covers launch failures and recovery of never-started trials.
            (Waiting, Failed) | (Waiting, Canceled) => true,
            (Running, s) => s.is_terminal(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub sequence_id: u64,
    pub trial_id: String,
    pub status: TrialStatus,
    pub assignment: ParamAssignment,
    pub intermediates: Vec<MetricReport>,
    #[serde(rename = "final")]
    pub final_report: Option<MetricReport>,
    pub slot: Option<u32>,
    pub created_at: u64,
    pub started_at: Option<u64>,
    pub ended_at: Option<u64>,
    pub reason: Option<String>,
}

impl TrialRecord {
    pub fn final_default(&self) -> Option<f64> {
        self.final_report.as_ref().map(MetricReport::default_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    ExperimentStarted {
        experiment_id: String,
        at: u64,
        config: serde_json::Value,
    },
    TrialCreated {
        trial_id: String,
        sequence_id: u64,
        assignment: ParamAssignment,
        at: u64,
    },
    StatusChanged {
        trial_id: String,
        status: TrialStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        slot: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        at: u64,
    },
    Metric {
        trial_id: String,
        report: MetricReport,
    },
    ExperimentEnded {
        reason: String,
        at: u64,
    },
}

/// State reconstructed from a journal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Replay {
    pub experiment_id: String,
    pub config: serde_json::Value,
    pub started_at: u64,
    pub ended: Option<(String, u64)>,
    pub trials: Vec<TrialRecord>,
}

impl Replay {
    pub fn trial(&self, trial_id: &str) -> Option<&TrialRecord> {
        self.trials.iter().find(|t| t.trial_id == trial_id)
    }

    fn trial_mut(&mut self, trial_id: &str) -> Result<&mut TrialRecord> {
        self.trials
            .iter_mut()
            .find(|t| t.trial_id == trial_id)
            .ok_or_else(|| Error::Journal(format!("event for unknown trial {trial_id}")))
    }

    pub fn apply(&mut self, event: &JournalEvent) -> Result<()> {
        match event {
            JournalEvent::ExperimentStarted {
                experiment_id,
                at,
                config,
            } => {
                if !self.experiment_id.is_empty() {
                    return Err(Error::Journal("experiment started twice".into()));
                }
                self.experiment_id = experiment_id.clone();
                self.config = config.clone();
                self.started_at = *at;
            }
            JournalEvent::TrialCreated {
                trial_id,
                sequence_id,
                assignment,
                at,
            } => {
                if *sequence_id != self.trials.len() as u64 {
                    return Err(Error::Journal(format!(
                        "sequence id {sequence_id} out of order (expected {})",
                        self.trials.len()
                    )));
                }
                if self.trial(trial_id).is_some() {
                    return Err(Error::Journal(format!("duplicate trial id {trial_id}")));
                }
                self.trials.push(TrialRecord {
                    sequence_id: *sequence_id,
                    trial_id: trial_id.clone(),
                    status: TrialStatus::Waiting,
                    assignment: assignment.clone(),
                    intermediates: Vec::new(),
                    final_report: None,
                    slot: None,
                    created_at: *at,
                    started_at: None,
                    ended_at: None,
                    reason: None,
                });
            }
            JournalEvent::StatusChanged {
                trial_id,
                status,
                slot,
                reason,
                at,
            } => {
                let trial = self.trial_mut(trial_id)?;
                if !trial.status.can_become(*status) {
                    return Err(Error::Journal(format!(
                        "trial {trial_id}: illegal transition {:?} -> {status:?}",
                        trial.status
                    )));
                }
                if *status == TrialStatus::Succeeded && trial.final_report.is_none() {
                    return Err(Error::Journal(format!(
                        "trial {trial_id}: succeeded without a final result"
                    )));
                }
                if *status == TrialStatus::Running {
                    trial.started_at = Some(*at);
                    trial.slot = *slot;
                } else {
                    trial.ended_at = Some(*at);
                }
                trial.status = *status;
                trial.reason = reason.clone();
            }
            JournalEvent::Metric { trial_id, report } => {
                let trial = self.trial_mut(trial_id)?;
                if trial.status.is_terminal() {
                    return Err(Error::Journal(format!("metric for finished trial {trial_id}")));
                }
                match report {
                    MetricReport::Intermediate { step, .. } => {
                        if *step != trial.intermediates.len() as u64 + 1 {
                            return Err(Error::Journal(format!(
                                "trial {trial_id}: intermediate step {step} out of order"
                            )));
                        }
                        trial.intermediates.push(report.clone());
                    }
                    MetricReport::Final { .. } => {
                        if trial.final_report.is_some() {
                            return Err(Error::Journal(format!("trial {trial_id}: second final")));
                        }
                        trial.final_report = Some(report.clone());
                    }
                }
            }
            JournalEvent::ExperimentEnded { reason, at } => {
                self.ended = Some((reason.clone(), *at));
            }
        }
        Ok(())
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a JournalEvent>) -> Result<Self> {
        let mut replay = Replay::default();
        for e in events {
            replay.apply(e)?;
        }
        Ok(replay)
    }

    pub fn count(&self, status: TrialStatus) -> usize {
        self.trials.iter().filter(|t| t.status == status).count()
    }
}

/// Single-owner appender. Every event is written as one line and flushed.
#[derive(Debug)]
pub struct JournalWriter {
    path: PathBuf,
    file: File,
}

impl JournalWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn open_append(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &JournalEvent) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// All complete events and the byte length they span. A final line without a
/// newline is treated as torn and excluded.
pub fn read_events(path: &Path) -> Result<(Vec<JournalEvent>, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut consumed = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 || line.last() != Some(&b'\n') {
            if n > 0 {
                log::warn!("{}: ignoring torn trailing line", path.display());
            }
            break;
        }
        consumed += n as u64;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let event = serde_json::from_slice(&line).map_err(|e| {
            Error::Journal(format!(
                "{}: corrupt line at byte {}: {e}",
                path.display(),
                consumed - n as u64
            ))
        })?;
        events.push(event);
    }
    Ok((events, consumed))
}

pub fn replay(path: &Path) -> Result<Replay> {
    let (events, _) = read_events(path)?;
    Replay::from_events(&events)
}

/// Repair a journal left by an engine that did not shut down: drop a torn
/// tail, mark every unfinished trial Failed, and close the experiment.
pub fn recover(path: &Path) -> Result<Replay> {
    let (events, consumed) = read_events(path)?;
    let len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if len > consumed {
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.set_len(consumed).map_err(|e| Error::io(path, e))?;
    }
    let mut state = Replay::from_events(&events)?;
    if state.ended.is_some() {
        return Ok(state);
    }
    let mut writer = JournalWriter::open_append(path)?;
    let now = now_millis();
    let unfinished: Vec<String> = state
        .trials
        .iter()
        .filter(|t| !t.status.is_terminal())
        .map(|t| t.trial_id.clone())
        .collect();
    for trial_id in unfinished {
        let event = JournalEvent::StatusChanged {
            trial_id,
            status: TrialStatus::Failed,
            slot: None,
            reason: Some("interrupted: engine stopped before the trial finished".into()),
            at: now,
        };
        writer.append(&event)?;
        state.apply(&event)?;
    }
    let end = JournalEvent::ExperimentEnded {
        reason: "recovered".into(),
        at: now,
    };
    writer.append(&end)?;
    state.apply(&end)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::ParamValue;
    use indexmap::IndexMap;

    fn created(id: &str, seq: u64) -> JournalEvent {
        JournalEvent::TrialCreated {
            trial_id: id.into(),
            sequence_id: seq,
            assignment: [("lr", ParamValue::Float(0.1 + seq as f64))].into_iter().collect(),
            at: 10 + seq,
        }
    }

    fn status(id: &str, status: TrialStatus) -> JournalEvent {
        JournalEvent::StatusChanged {
            trial_id: id.into(),
            status,
            slot: Some(0),
            reason: None,
            at: 20,
        }
    }

    fn metric(id: &str, report: MetricReport) -> JournalEvent {
        JournalEvent::Metric {
            trial_id: id.into(),
            report,
        }
    }

    fn values(v: f64) -> IndexMap<String, f64> {
        [("default".to_string(), v)].into_iter().collect()
    }

    fn started() -> JournalEvent {
        JournalEvent::ExperimentStarted {
            experiment_id: "exp".into(),
            at: 1,
            config: serde_json::json!({"x": 1}),
        }
    }

    fn sample_events() -> Vec<JournalEvent> {
        vec![
            started(),
            created("aaaaaaaa", 0),
            status("aaaaaaaa", TrialStatus::Running),
            metric(
                "aaaaaaaa",
                MetricReport::Intermediate {
                    step: 1,
                    values: values(0.25),
                },
            ),
            metric("aaaaaaaa", MetricReport::Final { values: values(0.3) }),
            status("aaaaaaaa", TrialStatus::Succeeded),
            created("bbbbbbbb", 1),
            status("bbbbbbbb", TrialStatus::Running),
            metric(
                "bbbbbbbb",
                MetricReport::Intermediate {
                    step: 1,
                    values: values(0.1),
                },
            ),
        ]
    }

    #[test]
    fn replay_builds_records() {
        let r = Replay::from_events(&sample_events()).unwrap();
        assert_eq!(r.trials.len(), 2);
        assert_eq!(r.trials[0].status, TrialStatus::Succeeded);
        assert_eq!(r.trials[0].final_default(), Some(0.3));
        assert_eq!(r.trials[1].status, TrialStatus::Running);
        assert_eq!(r.trials[1].intermediates.len(), 1);
    }

    #[test]
    fn replay_rejects_bad_sequences() {
        let mut bad = sample_events();
        bad.push(created("cccccccc", 5));
        assert!(Replay::from_events(&bad).is_err());

        let bad = vec![started(), created("a", 0), status("a", TrialStatus::Succeeded)];
        assert!(Replay::from_events(&bad).is_err());

        let bad = vec![
            started(),
            created("a", 0),
            status("a", TrialStatus::Running),
            status("a", TrialStatus::Failed),
            status("a", TrialStatus::Running),
        ];
        assert!(Replay::from_events(&bad).is_err());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal");
        let mut w = JournalWriter::create(&path).unwrap();
        let events = sample_events();
        for e in &events {
            w.append(e).unwrap();
        }
        let (back, _) = read_events(&path).unwrap();
        assert_eq!(back, events);
        assert_eq!(replay(&path).unwrap(), Replay::from_events(&events).unwrap());
    }

    #[test]
    fn recover_truncates_torn_tail_and_fails_unfinished() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal");
        let mut w = JournalWriter::create(&path).unwrap();
        for e in &sample_events() {
            w.append(e).unwrap();
        }
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"event\":\"metric\",\"tri").unwrap();
        drop(f);

        let before = replay(&path).unwrap();
        let after = recover(&path).unwrap();
        assert_eq!(after.trials[0], before.trials[0]);
        assert_eq!(after.trials[1].status, TrialStatus::Failed);
        assert!(after.ended.is_some());
        // the repaired file replays to the same state
        assert_eq!(replay(&path).unwrap(), after);
        // and recovering twice is a no-op
        assert_eq!(recover(&path).unwrap(), after);
    }
}
