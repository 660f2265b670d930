//! Experiment lifecycle: configuration, scheduling, trial supervision,
//! persistence and best-model retention.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use rand::distr::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assessor::{AssessorConfig, MedianStopAssessor, Verdict};
use crate::error::{Error, Result};
use crate::journal::{now_millis, JournalEvent, JournalWriter, Replay, TrialStatus};
use crate::protocol::{self, LineResult, MetricReport, MetricsTail, TrialContext};
use crate::searchspace::{ParamAssignment, SearchSpace};
use crate::tuner::{AnnealTuner, TunerConfig};

/// Poll period for metrics files, child exits and the stop file.
pub const TICK: Duration = Duration::from_millis(100);

pub const DEFAULT_TRIAL_COMMAND: &str = "spikehpo trial-builtin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_name: String,
    pub working_dir: PathBuf,
    #[serde(default = "default_trial_command")]
    pub trial_command: String,
    #[serde(default = "default_code_dir")]
    pub trial_code_dir: PathBuf,
    pub search_space: SearchSpace,
    #[serde(default)]
    pub tuner: TunerConfig,
    #[serde(default)]
    pub assessor: AssessorConfig,
    pub max_trial_number: u64,
    #[serde(default = "default_duration")]
    pub max_experiment_duration: String,
    #[serde(default = "default_concurrency")]
    pub trial_concurrency: usize,
    #[serde(default)]
    pub resource_slots: Vec<u32>,
    #[serde(default = "default_per_slot")]
    pub max_trials_per_slot: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Accepted for compatibility; slots are abstract counters.
    #[serde(default)]
    pub use_active_gpu: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_mem_frac: Option<f64>,
}

fn default_trial_command() -> String {
    DEFAULT_TRIAL_COMMAND.into()
}
fn default_code_dir() -> PathBuf {
    PathBuf::from(".")
}
fn default_duration() -> String {
    "100d".into()
}
fn default_concurrency() -> usize {
    1
}
fn default_per_slot() -> usize {
    3
}
fn default_seed() -> u64 {
    42
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file; relative directories resolve against the file's
    /// directory and a leading `~/` against `$HOME`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.working_dir = resolve_dir(base, &config.working_dir);
        config.trial_code_dir = resolve_dir(base, &config.trial_code_dir);
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_name.is_empty() || self.experiment_name.contains('/') {
            return Err(Error::Config(
                "experiment_name must be a non-empty path component".into(),
            ));
        }
        if self.trial_concurrency < 1 {
            return Err(Error::Config("trial_concurrency must be at least 1".into()));
        }
        if self.max_trial_number < 1 {
            return Err(Error::Config("max_trial_number must be at least 1".into()));
        }
        if !self.resource_slots.is_empty() {
            let unique: HashSet<_> = self.resource_slots.iter().collect();
            if unique.len() != self.resource_slots.len() {
                return Err(Error::Config("resource_slots contains duplicates".into()));
            }
            if self.max_trials_per_slot < 1 {
                return Err(Error::Config("max_trials_per_slot must be at least 1".into()));
            }
            if self.trial_concurrency > self.resource_slots.len() * self.max_trials_per_slot {
                return Err(Error::Config(format!(
                    "trial_concurrency {} exceeds {} slots x {} trials per slot",
                    self.trial_concurrency,
                    self.resource_slots.len(),
                    self.max_trials_per_slot
                )));
            }
        }
        parse_duration(&self.max_experiment_duration)?;
        self.tuner.validate()?;
        self.assessor.validate()?;
        Ok(())
    }

    fn slot_policy(&self) -> SlotPolicy {
        SlotPolicy {
            slots: self.resource_slots.clone(),
            max_per_slot: self.max_trials_per_slot,
            concurrency: self.trial_concurrency,
        }
    }
}

fn resolve_dir(base: &Path, dir: &Path) -> PathBuf {
    if let Ok(rest) = dir.strip_prefix("~") {
        if let Some(home) = std::env::var_os("HOME") {
            return PathBuf::from(home).join(rest);
        }
    }
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        base.join(dir)
    }
}

/// `<integer><unit>` with unit one of s, m, h, d; returns seconds.
pub fn parse_duration(text: &str) -> Result<u64> {
    let text = text.trim();
    let split = text
        .find(|c: char| !c.is_ascii_digit())
        .ok_or_else(|| Error::Config(format!("duration `{text}` lacks a unit")))?;
    let (digits, unit) = text.split_at(split);
    if digits.is_empty() {
        return Err(Error::Config(format!("duration `{text}` lacks a number")));
    }
    let scale = match unit {
        "s" => 1,
        "m" => 60,
        "h" => 3600,
        "d" => 86_400,
        other => return Err(Error::Config(format!("unknown duration unit `{other}`"))),
    };
    let n: u64 = digits
        .parse()
        .map_err(|_| Error::Config(format!("duration `{text}` is out of range")))?;
    n.checked_mul(scale)
        .ok_or_else(|| Error::Config(format!("duration `{text}` is out of range")))
}

/// 8-character token over `[a-zA-Z0-9]`.
pub fn make_trial_id<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..8).map(|_| rng.sample(Alphanumeric) as char).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotPolicy {
    pub slots: Vec<u32>,
    pub max_per_slot: usize,
    pub concurrency: usize,
}

/// Assign waiting trials (in the given order) to slots. `running` holds the
/// slot of every running trial. Picks the least-occupied slot, ties to the
/// lowest slot id; without declared slots only the concurrency cap applies.
pub fn schedule(policy: &SlotPolicy, running: &[Option<u32>], waiting: &[u64]) -> Vec<(u64, Option<u32>)> {
    let mut total = running.len();
    let mut occupancy: BTreeMap<u32, usize> = policy.slots.iter().map(|s| (*s, 0)).collect();
    for slot in running.iter().flatten() {
        if let Some(n) = occupancy.get_mut(slot) {
            *n += 1;
        }
    }
    let mut out = Vec::new();
    for &trial in waiting {
        if total >= policy.concurrency {
            break;
        }
        if policy.slots.is_empty() {
            out.push((trial, None));
        } else {
            let best = occupancy
                .iter()
                .filter(|(_, n)| **n < policy.max_per_slot)
                .min_by_key(|(slot, n)| (**n, **slot))
                .map(|(slot, _)| *slot);
            let Some(slot) = best else { break };
            *occupancy.get_mut(&slot).unwrap() += 1;
            out.push((trial, Some(slot)));
        }
        total += 1;
    }
    out
}

/// Append `"<test_acc> <sequence_id> <trial_id>"` to `<report_dir>/report_test`.
pub fn append_report(report_dir: &Path, test_acc: f64, sequence_id: u64, trial_id: &str) -> Result<()> {
    let path = report_dir.join("report_test");
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    file.write_all(format!("{test_acc} {sequence_id} {trial_id}\n").as_bytes())
        .map_err(|e| Error::io(&path, e))
}

/// Run `persist` iff `test_best_val` is at least the maximum first column of
/// the report file (which already holds the current trial's line).
pub fn retain_best_model(report_dir: &Path, test_best_val: f64, persist: impl FnOnce() -> Result<()>) -> Result<bool> {
    let path = report_dir.join("report_test");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut best = f64::NEG_INFINITY;
    for (n, line) in text.lines().enumerate() {
        match line.split(' ').next().and_then(|c| c.trim().parse::<f64>().ok()) {
            Some(v) if !v.is_nan() => best = best.max(v),
            _ => log::warn!("{}:{}: skipping malformed line `{line}`", path.display(), n + 1),
        }
    }
    if test_best_val >= best {
        persist()?;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Directory layout of one experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentPaths {
    pub experiment_dir: PathBuf,
    pub logs: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
    pub results: PathBuf,
}

impl ExperimentPaths {
    pub fn new(working_dir: &Path, name: &str, experiment_id: &str) -> Self {
        let sub = |kind: &str| working_dir.join(kind).join(name).join(experiment_id);
        Self {
            experiment_dir: sub("experiments"),
            logs: sub("logs"),
            models: sub("models"),
            reports: sub("reports"),
            results: sub("results"),
        }
    }

    /// Locate the sibling directories of an existing experiment directory.
    pub fn from_experiment_dir(dir: &Path) -> Result<Self> {
        let id = dir.file_name();
        let name = dir.parent().and_then(Path::file_name);
        let working = dir.parent().and_then(Path::parent).and_then(Path::parent);
        match (working, name, id) {
            (Some(w), Some(n), Some(i)) => Ok(Self::new(w, &n.to_string_lossy(), &i.to_string_lossy())),
            _ => Err(Error::Invalid(format!(
                "{} is not an experiment directory",
                dir.display()
            ))),
        }
    }

    pub fn journal(&self) -> PathBuf {
        self.experiment_dir.join("journal")
    }

    pub fn searchspace(&self) -> PathBuf {
        self.experiment_dir.join("searchspace")
    }

    pub fn stop_file(&self) -> PathBuf {
        self.experiment_dir.join("stop")
    }

    pub fn trial_dir(&self, trial_id: &str) -> PathBuf {
        self.experiment_dir.join("trials").join(trial_id)
    }

    fn create_all(&self) -> Result<()> {
        for dir in [
            &self.experiment_dir,
            &self.logs,
            &self.models,
            &self.reports,
            &self.results,
        ] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }
}

/// Ask a running experiment to stop at its next scheduling tick.
pub fn request_stop(experiment_dir: &Path) -> Result<()> {
    let path = experiment_dir.join("stop");
    fs::write(&path, b"stop\n").map_err(|e| Error::io(&path, e))
}

struct RunningTrial {
    trial_id: String,
    child: Child,
    tail: MetricsTail,
    slot: Option<u32>,
    next_step: u64,
    pending_final: Option<MetricReport>,
}

enum Outcome {
    Continue,
    Finished(TrialStatus, Option<String>),
}

/// The experiment coordinator. Owns the tuner, assessor and journal; all
/// trial events are processed sequentially on the calling thread.
pub struct Engine {
    config: ExperimentConfig,
    paths: ExperimentPaths,
    experiment_id: String,
    tuner: AnnealTuner,
    assessor: MedianStopAssessor,
    journal: JournalWriter,
    state: Replay,
    running: Vec<RunningTrial>,
    id_rng: ChaCha8Rng,
    used_ids: HashSet<String>,
    started: Instant,
    budget: Duration,
}

impl Engine {
    /// Create the directory tree, write the search-space file and open the
    /// journal.
    pub fn start(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let budget = Duration::from_secs(parse_duration(&config.max_experiment_duration)?);
        let mut id_rng = ChaCha8Rng::seed_from_u64(config.seed);
        id_rng.set_stream(1);
        // Experiment ids must differ across runs of the same config.
        let mut fresh = ChaCha8Rng::from_os_rng();
        let experiment_id = make_trial_id(&mut fresh);
        let paths = ExperimentPaths::new(&config.working_dir, &config.experiment_name, &experiment_id);
        paths.create_all()?;
        let ss_path = paths.searchspace();
        fs::write(&ss_path, config.search_space.to_json_string()).map_err(|e| Error::io(&ss_path, e))?;

        let journal = JournalWriter::create(paths.journal())?;
        let mut engine = Self {
            tuner: AnnealTuner::new(config.tuner.clone(), config.seed),
            assessor: MedianStopAssessor::new(config.assessor.clone()),
            journal,
            state: Replay::default(),
            running: Vec::new(),
            id_rng,
            used_ids: HashSet::new(),
            started: Instant::now(),
            budget,
            experiment_id: experiment_id.clone(),
            paths,
            config,
        };
        let snapshot = serde_json::to_value(&engine.config)?;
        engine.emit(JournalEvent::ExperimentStarted {
            experiment_id,
            at: now_millis(),
            config: snapshot,
        })?;
        Ok(engine)
    }

    pub fn experiment_id(&self) -> &str {
        &self.experiment_id
    }

    pub fn paths(&self) -> &ExperimentPaths {
        &self.paths
    }

    pub fn state(&self) -> &Replay {
        &self.state
    }

    fn emit(&mut self, event: JournalEvent) -> Result<()> {
        self.journal.append(&event)?;
        self.state.apply(&event)
    }

    fn can_create(&self) -> bool {
        (self.state.trials.len() as u64) < self.config.max_trial_number && self.started.elapsed() < self.budget
    }

    /// Run until the trial budget or duration is exhausted (and every trial
    /// has finished) or a stop file appears.
    pub fn run(mut self) -> Result<Replay> {
        let policy = self.config.slot_policy();
        let reason = loop {
            if self.paths.stop_file().exists() {
                self.cancel_all()?;
                break "user stop";
            }
            self.poll_running()?;
            while self.can_create() {
                let next_seq = self.state.trials.len() as u64;
                let slots: Vec<Option<u32>> = self.running.iter().map(|r| r.slot).collect();
                let Some(&(_, slot)) = schedule(&policy, &slots, &[next_seq]).first() else {
                    break;
                };
                self.create_and_launch(next_seq, slot)?;
            }
            if self.running.is_empty() && !self.can_create() {
                break if (self.state.trials.len() as u64) >= self.config.max_trial_number {
                    "max trial number reached"
                } else {
                    "max experiment duration reached"
                };
            }
            std::thread::sleep(TICK);
        };
        log::info!("experiment {} finished: {reason}", self.experiment_id);
        self.emit(JournalEvent::ExperimentEnded {
            reason: reason.into(),
            at: now_millis(),
        })?;
        Ok(std::mem::take(&mut self.state))
    }

    fn create_and_launch(&mut self, sequence_id: u64, slot: Option<u32>) -> Result<()> {
        self.tuner.maybe_reseed(sequence_id, &self.config.tuner.reseed_policy());
        let assignment = self.tuner.propose(&self.config.search_space);
        let trial_id = loop {
            let id = make_trial_id(&mut self.id_rng);
            if self.used_ids.insert(id.clone()) {
                break id;
            }
        };
        self.emit(JournalEvent::TrialCreated {
            trial_id: trial_id.clone(),
            sequence_id,
            assignment: assignment.clone(),
            at: now_millis(),
        })?;
        log::info!(
            "trial {} (# {sequence_id}, ID {trial_id}): {assignment}",
            sequence_id + 1
        );

        match self.spawn(&trial_id, sequence_id, &assignment) {
            Ok((child, tail)) => {
                self.emit(JournalEvent::StatusChanged {
                    trial_id: trial_id.clone(),
                    status: TrialStatus::Running,
                    slot,
                    reason: None,
                    at: now_millis(),
                })?;
                self.running.push(RunningTrial {
                    trial_id,
                    child,
                    tail,
                    slot,
                    next_step: 1,
                    pending_final: None,
                });
            }
            Err(e) => {
                log::error!("trial {trial_id}: launch failed: {e}");
                self.emit(JournalEvent::StatusChanged {
                    trial_id,
                    status: TrialStatus::Failed,
                    slot: None,
                    reason: Some(format!("launch failed: {e}")),
                    at: now_millis(),
                })?;
            }
        }
        Ok(())
    }

    fn spawn(&self, trial_id: &str, sequence_id: u64, assignment: &ParamAssignment) -> Result<(Child, MetricsTail)> {
        let dir = self.paths.trial_dir(trial_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ctx = TrialContext {
            experiment_id: self.experiment_id.clone(),
            trial_id: trial_id.to_owned(),
            sequence_id,
            params_file: dir.join("parameter.json"),
            metrics_file: dir.join("metrics.jsonl"),
        };
        protocol::write_params(&ctx.params_file, assignment)?;
        let log_path = dir.join("trial.log");
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log_err = log.try_clone().map_err(|e| Error::io(&log_path, e))?;
        let child = Command::new("sh")
            .arg("-c")
            .arg(&self.config.trial_command)
            .current_dir(&self.config.trial_code_dir)
            .envs(ctx.env_vars())
            .env(protocol::ENV_SEED, self.config.seed.to_string())
            .env(protocol::ENV_REPORT_DIR, &self.paths.reports)
            .env(protocol::ENV_MODEL_DIR, &self.paths.models)
            .env(protocol::ENV_RESULT_DIR, &self.paths.results)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .process_group(0)
            .spawn()
            .map_err(|e| Error::io(&self.config.trial_code_dir, e))?;
        Ok((child, MetricsTail::new(ctx.metrics_file)))
    }

    fn poll_running(&mut self) -> Result<()> {
        let mut idx = 0;
        while idx < self.running.len() {
            match self.poll_one(idx)? {
                Outcome::Continue => idx += 1,
                Outcome::Finished(status, reason) => {
                    let trial = self.running.remove(idx);
                    self.finish(trial, status, reason)?;
                }
            }
        }
        Ok(())
    }

    fn poll_one(&mut self, idx: usize) -> Result<Outcome> {
        let exit = {
            let trial = &mut self.running[idx];
            trial
                .child
                .try_wait()
                .map_err(|e| Error::io(format!("trial {}", trial.trial_id), e))?
        };
        let (lines, torn) = {
            let trial = &mut self.running[idx];
            if exit.is_some() {
                trial.tail.finish()?
            } else {
                (trial.tail.poll()?, false)
            }
        };
        if torn {
            log::warn!("trial {}: dropped a torn metrics line", self.running[idx].trial_id);
        }
        for line in lines {
            if let Some(verdict) = self.ingest(idx, line, exit.is_none())? {
                if verdict == Verdict::Stop {
                    kill_group(&mut self.running[idx].child);
                    return Ok(Outcome::Finished(
                        TrialStatus::EarlyStopped,
                        Some("median stopping rule".into()),
                    ));
                }
            }
        }
        Ok(match exit {
            None => Outcome::Continue,
            Some(status) => self.exit_outcome(idx, status),
        })
    }

    fn exit_outcome(&self, idx: usize, status: ExitStatus) -> Outcome {
        let trial = &self.running[idx];
        if !status.success() {
            return Outcome::Finished(TrialStatus::Failed, Some(format!("trial process {status}")));
        }
        if trial.pending_final.is_none() {
            return Outcome::Finished(
                TrialStatus::Failed,
                Some("trial exited without reporting a final result".into()),
            );
        }
        Outcome::Finished(TrialStatus::Succeeded, None)
    }

    /// Handle one metrics line; returns the assessor's verdict for accepted
    /// intermediate reports when `assess` is set.
    fn ingest(&mut self, idx: usize, line: LineResult, assess: bool) -> Result<Option<Verdict>> {
        let trial_id = self.running[idx].trial_id.clone();
        let report = match line {
            Ok(r) => r,
            Err(msg) => {
                log::warn!("trial {trial_id}: {msg}");
                return Ok(None);
            }
        };
        match report {
            MetricReport::Intermediate { step, .. } => {
                let expected = self.running[idx].next_step;
                if step != expected {
                    log::warn!("trial {trial_id}: dropping intermediate step {step}, expected {expected}");
                    return Ok(None);
                }
                if let Err(e) = self.assessor.record(&trial_id, step as usize, report.default_value()) {
                    log::warn!("trial {trial_id}: {e}");
                    return Ok(None);
                }
                self.running[idx].next_step += 1;
                self.emit(JournalEvent::Metric {
                    trial_id: trial_id.clone(),
                    report,
                })?;
                if assess {
                    return self.assessor.assess(&trial_id, step as usize).map(Some);
                }
            }
            MetricReport::Final { .. } => {
                if self.running[idx].pending_final.is_some() {
                    log::warn!("trial {trial_id}: ignoring second final result");
                } else {
                    self.running[idx].pending_final = Some(report);
                }
            }
        }
        Ok(None)
    }

    fn finish(&mut self, trial: RunningTrial, status: TrialStatus, reason: Option<String>) -> Result<()> {
        let RunningTrial {
            trial_id,
            pending_final,
            ..
        } = trial;
        if status == TrialStatus::Succeeded {
            let report = pending_final.expect("succeeded trials carry a final");
            let metric = report.default_value();
            self.emit(JournalEvent::Metric {
                trial_id: trial_id.clone(),
                report,
            })?;
            self.assessor.mark_completed(&trial_id);
            let assignment = self
                .state
                .trial(&trial_id)
                .map(|t| t.assignment.clone())
                .unwrap_or_default();
            if let Err(e) = self.tuner.observe(assignment, metric) {
                log::warn!("trial {trial_id}: {e}");
            }
        }
        match &reason {
            Some(r) => log::info!("trial {trial_id}: {status:?} ({r})"),
            None => log::info!("trial {trial_id}: {status:?}"),
        }
        self.emit(JournalEvent::StatusChanged {
            trial_id,
            status,
            slot: None,
            reason,
            at: now_millis(),
        })
    }

    fn cancel_all(&mut self) -> Result<()> {
        for mut trial in std::mem::take(&mut self.running) {
            kill_group(&mut trial.child);
            self.finish(trial, TrialStatus::Canceled, Some("experiment stopped by user".into()))?;
        }
        Ok(())
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        for trial in &mut self.running {
            kill_group(&mut trial.child);
        }
    }
}

fn kill_group(child: &mut Child) {
    // The child leads its own process group, so this also reaches anything
    // the trial command forked.
    let pgid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Convenience wrapper: start an engine and run it to completion.
pub fn run_experiment(config: ExperimentConfig) -> Result<Replay> {
    Engine::start(config)?.run()
}
