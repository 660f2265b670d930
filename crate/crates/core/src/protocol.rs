//! Wire contract between the engine and a trial process.
//!
//! The engine hands a trial its identity and two file paths through
//! environment variables:
//!
//! | variable             | meaning                                         |
//! |----------------------|-------------------------------------------------|
//! | `HPO_EXPERIMENT_ID`  | experiment token                                |
//! | `HPO_TRIAL_ID`       | 8-character trial token                         |
//! | `HPO_SEQUENCE_ID`    | 0-based creation index of the trial             |
//! | `HPO_PARAMS_FILE`    | JSON object with the trial's assignment         |
//! | `HPO_METRICS_FILE`   | append-only JSON-lines file the trial writes to |
//!
//! Each metrics line is one JSON document:
//! `{"kind":"intermediate","step":1,"values":{"default":0.81,...}}` or
//! `{"kind":"final","values":{"default":0.97,...}}`. Every report carries a
//! finite `"default"` entry, which is the value the tuner and assessor see.
//!
//! The engine also exports `HPO_SEED`, `HPO_REPORT_DIR`, `HPO_MODEL_DIR` and
//! `HPO_RESULT_DIR`. They are optional for trials; the built-in trial uses them
//! for seeding and for best-model retention.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::ParamAssignment;

pub const ENV_EXPERIMENT_ID: &str = "HPO_EXPERIMENT_ID";
pub const ENV_TRIAL_ID: &str = "HPO_TRIAL_ID";
pub const ENV_SEQUENCE_ID: &str = "HPO_SEQUENCE_ID";
pub const ENV_PARAMS_FILE: &str = "HPO_PARAMS_FILE";
pub const ENV_METRICS_FILE: &str = "HPO_METRICS_FILE";
pub const ENV_SEED: &str = "HPO_SEED";
pub const ENV_REPORT_DIR: &str = "HPO_REPORT_DIR";
pub const ENV_MODEL_DIR: &str = "HPO_MODEL_DIR";
pub const ENV_RESULT_DIR: &str = "HPO_RESULT_DIR";

/// Key every report must carry.
pub const DEFAULT_KEY: &str = "default";

/// One metrics-file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MetricReport {
    Intermediate { step: u64, values: IndexMap<String, f64> },
    Final { values: IndexMap<String, f64> },
}

impl MetricReport {
    pub fn values(&self) -> &IndexMap<String, f64> {
        match self {
            MetricReport::Intermediate { values, .. } | MetricReport::Final { values } => values,
        }
    }

    pub fn default_value(&self) -> f64 {
        self.values()[DEFAULT_KEY]
    }

    pub fn is_final(&self) -> bool {
        matches!(self, MetricReport::Final { .. })
    }

    pub fn validate(&self) -> Result<()> {
        validate_values(self.values())?;
        if let MetricReport::Intermediate { step: 0, .. } = self {
            return Err(Error::Protocol("intermediate steps start at 1".into()));
        }
        Ok(())
    }
}

fn validate_values(values: &IndexMap<String, f64>) -> Result<()> {
    match values.get(DEFAULT_KEY) {
        None => return Err(Error::Protocol("report lacks a \"default\" value".into())),
        Some(v) if !v.is_finite() => return Err(Error::Protocol("\"default\" must be finite".into())),
        _ => {}
    }
    if let Some((k, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Protocol(format!("metric `{k}` is not finite")));
    }
    Ok(())
}

/// Identity and file locations of a running trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialContext {
    pub experiment_id: String,
    pub trial_id: String,
    pub sequence_id: u64,
    pub params_file: PathBuf,
    pub metrics_file: PathBuf,
}

impl TrialContext {
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let get = |key: &str| {
            lookup(key)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| Error::Protocol(format!("environment variable {key} is not set")))
        };
        let sequence = get(ENV_SEQUENCE_ID)?;
        let sequence_id = sequence
            .parse()
            .map_err(|_| Error::Protocol(format!("{ENV_SEQUENCE_ID}=`{sequence}` is not a count")))?;
        Ok(Self {
            experiment_id: get(ENV_EXPERIMENT_ID)?,
            trial_id: get(ENV_TRIAL_ID)?,
            sequence_id,
            params_file: get(ENV_PARAMS_FILE)?.into(),
            metrics_file: get(ENV_METRICS_FILE)?.into(),
        })
    }

    pub fn env_vars(&self) -> [(&'static str, String); 5] {
        [
            (ENV_EXPERIMENT_ID, self.experiment_id.clone()),
            (ENV_TRIAL_ID, self.trial_id.clone()),
            (ENV_SEQUENCE_ID, self.sequence_id.to_string()),
            (ENV_PARAMS_FILE, self.params_file.display().to_string()),
            (ENV_METRICS_FILE, self.metrics_file.display().to_string()),
        ]
    }

    pub fn identity(&self) -> (&str, &str, u64) {
        (&self.experiment_id, &self.trial_id, self.sequence_id)
    }

    /// The engine-written assignment for this trial.
    pub fn get_next_parameter(&self) -> Result<ParamAssignment> {
        read_params(&self.params_file)
    }
}

pub fn write_params(path: &Path, assignment: &ParamAssignment) -> Result<()> {
    let text = serde_json::to_string_pretty(assignment)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ParamAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::Protocol(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("corrupt parameter file {}: {e}", path.display())))
}

/// Trial-side writer of the metrics file.
#[derive(Debug)]
pub struct Reporter {
    ctx: TrialContext,
    next_step: u64,
    final_sent: bool,
}

impl Reporter {
    pub fn new(ctx: TrialContext) -> Self {
        Self {
            ctx,
            next_step: 1,
            final_sent: false,
        }
    }

    pub fn context(&self) -> &TrialContext {
        &self.ctx
    }

    pub fn report_intermediate_result(&mut self, values: IndexMap<String, f64>) -> Result<()> {
        let report = MetricReport::Intermediate {
            step: self.next_step,
            values,
        };
        self.append(&report)?;
        self.next_step += 1;
        Ok(())
    }

    pub fn report_final_result(&mut self, values: IndexMap<String, f64>) -> Result<()> {
        if self.final_sent {
            return Err(Error::Protocol("final result already reported".into()));
        }
        self.append(&MetricReport::Final { values })?;
        self.final_sent = true;
        Ok(())
    }

    fn append(&self, report: &MetricReport) -> Result<()> {
        report.validate()?;
        append_report_line(&self.ctx.metrics_file, report)
    }
}

/// Write one report as a single newline-terminated line.
pub fn append_report_line(path: &Path, report: &MetricReport) -> Result<()> {
    let mut line = serde_json::to_vec(report)?;
    line.push(b'\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&line).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Engine-side incremental reader of a metrics file.
///
/// Only newline-terminated lines are consumed; a trailing partial line waits
/// for the next poll, and is dropped by [`MetricsTail::finish`].
#[derive(Debug)]
pub struct MetricsTail {
    path: PathBuf,
    offset: u64,
    pending: Vec<u8>,
}

/// Result of parsing one line: the report, or the reason it was rejected.
pub type LineResult = std::result::Result<MetricReport, String>;

impl MetricsTail {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            offset: 0,
            pending: Vec::new(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn poll(&mut self) -> Result<Vec<LineResult>> {
        let mut file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        file.seek(SeekFrom::Start(self.offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        self.offset += buf.len() as u64;
        self.pending.extend_from_slice(&buf);

        let Some(last_nl) = self.pending.iter().rposition(|&b| b == b'\n') else {
            return Ok(Vec::new());
        };
        let rest = self.pending.split_off(last_nl + 1);
        let complete = std::mem::replace(&mut self.pending, rest);
        Ok(complete
            .split(|&b| b == b'\n')
            .filter(|line| !line.iter().all(u8::is_ascii_whitespace))
            .map(parse_line)
            .collect())
    }

    /// Final poll after the writer exited. Returns the complete lines and
    /// whether a torn trailing line was discarded.
    pub fn finish(&mut self) -> Result<(Vec<LineResult>, bool)> {
        let lines = self.poll()?;
        let torn = !self.pending.is_empty();
        self.pending.clear();
        Ok((lines, torn))
    }
}

fn parse_line(line: &[u8]) -> LineResult {
    let report: MetricReport = serde_json::from_slice(line)
        .map_err(|e| format!("malformed metrics line `{}`: {e}", String::from_utf8_lossy(line)))?;
    report.validate().map_err(|e| e.to_string())?;
    Ok(report)
}
