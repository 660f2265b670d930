//! The built-in trial: synthetic spiking dataset, e-prop training with four
//! early-stop counters, best-validation checkpointing and metric reporting.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{append_report, retain_best_model};
use crate::error::{Error, Result};
use crate::protocol::{self, Reporter, TrialContext, DEFAULT_KEY};
use crate::searchspace::{ParamAssignment, ParamValue};
use crate::snn::{ResetMechanism, Srnn, SrnnConfig, SrnnOptimizer};

pub const DATA_SEED: u64 = 42;
const RATE_LOW: f64 = 0.02;
const RATE_HIGH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub n_in: usize,
    pub steps: usize,
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_in: 20,
            steps: 100,
            train_len: 500,
            val_len: 100,
            test_len: 100,
            seed: DATA_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub samples: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeDataset {
    pub spec: DatasetSpec,
    pub random_split: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Per-class rate templates `[n_classes × 2 × n_in]` for the first and
/// second half of a sample. Classes `2m` and `2m + 1` play the same pair of
/// templates in opposite order, so their mean rates coincide and only the
/// temporal order tells them apart.
pub fn rate_templates(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let k = spec.n_classes;
    let mut templates = Array3::zeros((k, 2, spec.n_in));
    for first in (0..k).step_by(2) {
        let a = Array1::from_shape_simple_fn(spec.n_in, || rng.random_range(RATE_LOW..RATE_HIGH));
        let b = Array1::from_shape_simple_fn(spec.n_in, || rng.random_range(RATE_LOW..RATE_HIGH));
        templates.slice_mut(s![first, 0, ..]).assign(&a);
        templates.slice_mut(s![first, 1, ..]).assign(&b);
        if first + 1 < k {
            templates.slice_mut(s![first + 1, 0, ..]).assign(&b);
            templates.slice_mut(s![first + 1, 1, ..]).assign(&a);
        }
    }
    templates
}

/// Class-template Bernoulli spike trains. The test split is drawn first; the
/// train+val pool is ordered round-robin by class and the validation split
/// is the window of `val_len` samples starting at fold `random_split` of 10.
pub fn generate_dataset(spec: &DatasetSpec, random_split: usize) -> Result<SpikeDataset> {
    let k = spec.n_classes;
    if k < 2 {
        return Err(Error::Data("at least two classes are required".into()));
    }
    if random_split >= 10 {
        return Err(Error::Data(format!("random_split {random_split} not in [0, 10)")));
    }
    if spec.n_in == 0 || spec.steps == 0 {
        return Err(Error::Data("channels and time steps must be positive".into()));
    }
    for (name, len) in [
        ("train", spec.train_len),
        ("val", spec.val_len),
        ("test", spec.test_len),
    ] {
        if len < k {
            return Err(Error::Data(format!(
                "{name} split of {len} samples cannot cover {k} classes"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = rate_templates(spec, &mut rng);
    let half = spec.steps / 2;
    let draw = |label: usize, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((spec.steps, spec.n_in), |(t, i)| {
            let rate = templates[[label, usize::from(t >= half), i]];
            f64::from(u8::from(rng.random_bool(rate)))
        })
    };

    let mut test = Split::default();
    for n in 0..spec.test_len {
        test.labels.push(n % k);
        test.samples.push(draw(n % k, &mut rng));
    }
    let pool_len = spec.train_len + spec.val_len;
    let pool: Vec<(Array2<f64>, usize)> = (0..pool_len).map(|n| (draw(n % k, &mut rng), n % k)).collect();

    let offset = (random_split * pool_len / 10) / k * k;
    let in_val = |n: usize| (n + pool_len - offset) % pool_len < spec.val_len;
    let (mut train, mut val) = (Split::default(), Split::default());
    for (n, (x, label)) in pool.into_iter().enumerate() {
        let split = if in_val(n) { &mut val } else { &mut train };
        split.samples.push(x);
        split.labels.push(label);
    }
    for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
        let mut seen = vec![false; k];
        split.labels.iter().for_each(|l| seen[*l] = true);
        if seen.contains(&false) {
            return Err(Error::Data(format!("{name} split misses a class")));
        }
    }
    Ok(SpikeDataset {
        spec: spec.clone(),
        random_split,
        train,
        val,
        test,
    })
}

/// One-hot targets tiled over time: `[T × batch × n_classes]`.
pub fn encode_targets(labels: &[usize], n_classes: usize, steps: usize) -> Result<Array3<f64>> {
    if let Some(bad) = labels.iter().find(|l| **l >= n_classes) {
        return Err(Error::Data(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(Array3::from_shape_fn((steps, labels.len(), n_classes), |(_, b, c)| {
        f64::from(u8::from(labels[b] == c))
    }))
}

fn check_delay(delay: usize, steps: usize) -> Result<()> {
    if delay == 0 || delay > steps {
        return Err(Error::Config(format!("delay {delay} not in [1, {steps}]")));
    }
    Ok(())
}

/// Argmax of the outputs summed over the last `delay` steps; ties to the
/// lowest class.
pub fn infer(outputs: ArrayView2<f64>, delay: usize) -> Result<usize> {
    check_delay(delay, outputs.nrows())?;
    let sums = outputs.slice(s![outputs.nrows() - delay.., ..]).sum_axis(Axis(0));
    let mut best = 0;
    for c in 1..sums.len() {
        if sums[c] > sums[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Mean cross-entropy over the last `delay` steps and the batch.
pub fn loss(outputs: ArrayView3<f64>, targets: ArrayView3<f64>, delay: usize) -> Result<f64> {
    if outputs.shape() != targets.shape() {
        return Err(Error::Shape("outputs and targets differ in shape".into()));
    }
    let steps = outputs.shape()[0];
    check_delay(delay, steps)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in steps - delay..steps {
        for b in 0..outputs.shape()[1] {
            let y = outputs.slice(s![t, b, ..]);
            let max = y.fold(f64::NEG_INFINITY, |a, v| a.max(*v));
            let lse = max + y.mapv(|v| (v - max).exp()).sum().ln();
            total += y
                .iter()
                .zip(targets.slice(s![t, b, ..]))
                .map(|(yk, pk)| pk * (lse - yk))
                .sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Percentage of correct inferences.
    pub accuracy: f64,
    /// Sum of per-batch mean losses.
    pub loss: f64,
    pub batches: usize,
    /// Predictions in visiting order.
    pub predictions: Vec<usize>,
}

/// One pass over `split` in `order` (natural order when `None`). Only train
/// mode updates the model.
pub fn do_epoch(
    model: &mut Srnn,
    optimizer: &mut SrnnOptimizer,
    split: &Split,
    batch_size: usize,
    mode: Mode,
    order: Option<&[usize]>,
) -> Result<EpochStats> {
    if split.is_empty() {
        return Err(Error::Data(format!("{mode:?} split is empty")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let natural: Vec<usize> = (0..split.len()).collect();
    let order = order.unwrap_or(&natural);
    let mut stats = EpochStats {
        accuracy: 0.0,
        loss: 0.0,
        batches: 0,
        predictions: Vec::with_capacity(order.len()),
    };
    let mut correct = 0usize;
    for batch in order.chunks(batch_size) {
        let xs: Vec<Array2<f64>> = batch.iter().map(|i| split.samples[*i].clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|i| split.labels[*i]).collect();
        // Scores come from the forward pass that precedes the update.
        let (batch_loss, predictions) = if mode == Mode::Train {
            let (grads, mean_loss, predictions) = model.batch_gradients(&xs, &labels)?;
            optimizer.step(model, &grads);
            (mean_loss, predictions)
        } else {
            let mut total = 0.0;
            let mut predictions = Vec::with_capacity(xs.len());
            for (x, &label) in xs.iter().zip(&labels) {
                let trace = model.forward(x.view())?;
                predictions.push(model.infer(&trace));
                total += model.loss(&trace, label)?;
            }
            (total / xs.len() as f64, predictions)
        };
        correct += predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
        stats.predictions.extend(predictions);
        stats.loss += batch_loss;
        stats.batches += 1;
    }
    stats.accuracy = correct as f64 / order.len() as f64 * 100.0;
    Ok(stats)
}

/// Rounding used for reported metrics (half to even, as numpy does).
pub fn round_to(x: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (x * k).round_ties_even() / k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StopReason {
    SmallValLossChange,
    ValLossIncrease,
    SmallValAccChange,
    ValAccDrop,
    EpochBudget,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SmallValLossChange => "stop condition for small validation loss changes met",
            Self::ValLossIncrease => "stop condition for validation loss increase met",
            Self::SmallValAccChange => "stop condition for small validation accuracy changes met",
            Self::ValAccDrop => "stop condition for validation accuracy decrease met",
            Self::EpochBudget => "epoch budget exhausted",
        })
    }
}

/// Threshold in percent and patience for each counter, in check order.
pub const EARLY_STOP_RULES: [(StopReason, f64, usize); 4] = [
    (StopReason::SmallValLossChange, 0.5, 10),
    (StopReason::ValLossIncrease, 0.5, 10),
    (StopReason::SmallValAccChange, 0.1, 5),
    (StopReason::ValAccDrop, 2.0, 5),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EarlyStopState {
    pub counters: [usize; 4],
    previous: Option<(f64, f64)>,
    epochs_seen: usize,
}

fn relative_change_pct(new: f64, old: f64) -> f64 {
    if old == 0.0 {
        0.0
    } else {
        (new - old) / old * 100.0
    }
}

impl EarlyStopState {
    /// Feed the validation loss and accuracy of the next epoch.
    pub fn update(&mut self, val_loss: f64, val_acc: f64) {
        self.epochs_seen += 1;
        if let Some((prev_loss, prev_acc)) = self.previous {
            let d_loss = relative_change_pct(val_loss, prev_loss);
            let d_acc = relative_change_pct(val_acc, prev_acc);
            let conditions = [
                d_loss.abs() < EARLY_STOP_RULES[0].1,
                d_loss > EARLY_STOP_RULES[1].1,
                d_acc.abs() < EARLY_STOP_RULES[2].1,
                -d_acc > EARLY_STOP_RULES[3].1,
            ];
            for (counter, hit) in self.counters.iter_mut().zip(conditions) {
                *counter = if hit { *counter + 1 } else { 0 };
            }
        }
        self.previous = Some((val_loss, val_acc));
    }

    /// First rule (in check order) whose counter reached its patience.
    pub fn triggered(&self) -> Option<StopReason> {
        EARLY_STOP_RULES
            .iter()
            .zip(self.counters)
            .find(|((_, _, patience), count)| count >= patience)
            .map(|((reason, _, _), _)| *reason)
    }
}

/// Training and evaluation steps driven by [`train_trial`].
pub trait EpochRunner {
    /// Returns (accuracy %, loss).
    fn train_epoch(&mut self) -> Result<(f64, f64)>;
    fn val_epoch(&mut self) -> Result<(f64, f64)>;
    /// Snapshot the current model as the best-validation checkpoint.
    fn checkpoint(&mut self);
    /// Evaluate the checkpoint on the test split.
    fn test_checkpoint(&mut self) -> Result<(f64, f64)>;
}

/// Destination of reported metrics.
pub trait MetricSink {
    fn intermediate(&mut self, values: IndexMap<String, f64>) -> Result<()>;
    fn final_result(&mut self, values: IndexMap<String, f64>) -> Result<()>;
}

impl MetricSink for Reporter {
    fn intermediate(&mut self, values: IndexMap<String, f64>) -> Result<()> {
        self.report_intermediate_result(values)
    }

    fn final_result(&mut self, values: IndexMap<String, f64>) -> Result<()> {
        self.report_final_result(values)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub train_acc: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub test_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub series: Series,
    pub epochs: usize,
    pub best_val_epoch: usize,
    pub best_val_acc: f64,
    pub best_train_acc: f64,
    pub test_acc: f64,
    pub stop_reason: StopReason,
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn train_trial(runner: &mut dyn EpochRunner, sink: &mut dyn MetricSink, max_epochs: usize) -> Result<TrialOutcome> {
    if max_epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut series = Series::default();
    let mut early = EarlyStopState::default();
    let mut best_val_epoch = 0;
    let mut epoch = 0;
    let stop_reason = loop {
        if let Some(reason) = early.triggered() {
            break reason;
        }
        if epoch >= max_epochs {
            break StopReason::EpochBudget;
        }
        epoch += 1;
        log::debug!("epoch {epoch}/{max_epochs}");
        let (train_acc, train_loss) = runner.train_epoch()?;
        series.train_acc.push(train_acc);
        series.train_loss.push(train_loss);
        let (val_acc, val_loss) = runner.val_epoch()?;
        series.val_acc.push(val_acc);
        series.val_loss.push(val_loss);
        if val_acc >= max_of(&series.val_acc) {
            best_val_epoch = epoch;
            runner.checkpoint();
        }
        sink.intermediate(IndexMap::from([
            (DEFAULT_KEY.to_owned(), round_to(val_acc, 4)),
            ("training acc.".to_owned(), round_to(train_acc, 4)),
            ("val. loss".to_owned(), round_to(val_loss, 5)),
            ("train. loss".to_owned(), round_to(train_loss, 5)),
        ]))?;
        early.update(val_loss, val_acc);
    };
    let (test_acc, test_loss) = runner.test_checkpoint()?;
    series.test_acc.push(test_acc);
    series.test_loss.push(test_loss);
    log::info!("training stopped after {epoch}/{max_epochs} epochs: {stop_reason}");

    let best_val_acc = max_of(&series.val_acc);
    let best_train_acc = max_of(&series.train_acc);
    log::info!(
        "best training {:.4}, best validation {:.4} (epoch {best_val_epoch}), test from best validation {:.4}",
        best_train_acc,
        best_val_acc,
        test_acc
    );
    sink.final_result(IndexMap::from([
        (DEFAULT_KEY.to_owned(), round_to(best_val_acc, 4)),
        ("best training".to_owned(), round_to(best_train_acc, 4)),
        ("test".to_owned(), round_to(test_acc, 4)),
    ]))?;
    Ok(TrialOutcome {
        series,
        epochs: epoch,
        best_val_epoch,
        best_val_acc,
        best_train_acc,
        test_acc,
        stop_reason,
    })
}

/// Settings of the built-in trial; search-space parameters override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_layer_norm: [f64; 3],
    pub w_init_gain: [f64; 3],
    pub n_rec: usize,
    pub threshold: f64,
    pub tau_mem: f64,
    pub tau_out: f64,
    pub bias_out: f64,
    pub gamma: f64,
    pub dt: f64,
    pub delay_targets: usize,
    pub reset_mechanism: ResetMechanism,
    pub shuffle: bool,
    pub dataset: DatasetSpec,
}

impl Default for TrialSettings {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 10,
            lr: 1e-3,
            lr_layer_norm: [0.05, 0.05, 1.0],
            w_init_gain: [0.5, 0.1, 0.5],
            n_rec: 64,
            threshold: 0.9,
            tau_mem: 250e-3,
            tau_out: 5e-3,
            bias_out: 0.0,
            gamma: 0.3,
            dt: 1e-3,
            delay_targets: 10,
            reset_mechanism: ResetMechanism::Subtract,
            shuffle: true,
            dataset: DatasetSpec::default(),
        }
    }
}

fn float_param(key: &str, v: &ParamValue) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("parameter `{key}` must be numeric, got {v}")))
}

fn count_param(key: &str, v: &ParamValue) -> Result<usize> {
    let x = float_param(key, v)?;
    if x < 1.0 || x.fract() != 0.0 {
        return Err(Error::Config(format!(
            "parameter `{key}` must be a positive integer, got {v}"
        )));
    }
    Ok(x as usize)
}

impl TrialSettings {
    /// Override settings with the sampled parameters; unknown keys are
    /// ignored with a warning.
    pub fn apply(&mut self, params: &ParamAssignment) -> Result<()> {
        for (key, value) in params.iter() {
            match key {
                "n_rec" => self.n_rec = count_param(key, value)?,
                "threshold" => self.threshold = float_param(key, value)?,
                "tau_mem" => self.tau_mem = float_param(key, value)?,
                "tau_out" => self.tau_out = float_param(key, value)?,
                "delay_targets" => self.delay_targets = count_param(key, value)?,
                "lr" => self.lr = float_param(key, value)?,
                "gamma" => self.gamma = float_param(key, value)?,
                "batch_size" => self.batch_size = count_param(key, value)?,
                "reset_mechanism" => {
                    self.reset_mechanism = value
                        .as_str()
                        .ok_or_else(|| Error::Config("parameter `reset_mechanism` must be a string".into()))?
                        .parse()?
                }
                other => log::warn!("ignoring unknown parameter `{other}`"),
            }
        }
        Ok(())
    }

    pub fn network_config(&self) -> SrnnConfig {
        SrnnConfig {
            n_in: self.dataset.n_in,
            n_rec: self.n_rec,
            n_out: self.dataset.n_classes,
            thr: self.threshold,
            tau_mem: self.tau_mem,
            tau_out: self.tau_out,
            dt: self.dt,
            gamma: self.gamma,
            b_o: self.bias_out,
            reset: self.reset_mechanism,
            t_crop: self.delay_targets,
            w_init_gain: self.w_init_gain,
        }
    }
}

/// [`EpochRunner`] over an [`Srnn`] and a [`SpikeDataset`].
pub struct SnnRunner<'a> {
    pub model: Srnn,
    pub best: Option<Srnn>,
    optimizer: SrnnOptimizer,
    data: &'a SpikeDataset,
    batch_size: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
    pub test_predictions: Vec<usize>,
}

impl<'a> SnnRunner<'a> {
    pub fn new(settings: &TrialSettings, data: &'a SpikeDataset, rng: &mut ChaCha8Rng) -> Result<Self> {
        let model = Srnn::new(&settings.network_config(), rng)?;
        if settings.delay_targets > data.spec.steps {
            return Err(Error::Config(format!(
                "delay_targets {} exceeds sequence length {}",
                settings.delay_targets, data.spec.steps
            )));
        }
        let optimizer = SrnnOptimizer::new(&model, settings.lr, settings.lr_layer_norm);
        let shuffle_rng = ChaCha8Rng::seed_from_u64(rng.random());
        Ok(Self {
            model,
            best: None,
            optimizer,
            data,
            batch_size: settings.batch_size,
            shuffle: settings.shuffle,
            rng: shuffle_rng,
            test_predictions: Vec::new(),
        })
    }
}

impl EpochRunner for SnnRunner<'_> {
    fn train_epoch(&mut self) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        if self.shuffle {
            order.shuffle(&mut self.rng);
        }
        let stats = do_epoch(
            &mut self.model,
            &mut self.optimizer,
            &self.data.train,
            self.batch_size,
            Mode::Train,
            Some(&order),
        )?;
        Ok((stats.accuracy, stats.loss))
    }

    fn val_epoch(&mut self) -> Result<(f64, f64)> {
        let stats = do_epoch(
            &mut self.model,
            &mut self.optimizer,
            &self.data.val,
            self.batch_size,
            Mode::Val,
            None,
        )?;
        Ok((stats.accuracy, stats.loss))
    }

    fn checkpoint(&mut self) {
        self.best = Some(self.model.clone());
    }

    fn test_checkpoint(&mut self) -> Result<(f64, f64)> {
        let mut model = self.best.clone().unwrap_or_else(|| self.model.clone());
        let stats = do_epoch(
            &mut model,
            &mut self.optimizer,
            &self.data.test,
            self.batch_size,
            Mode::Test,
            None,
        )?;
        self.test_predictions = stats.predictions;
        Ok((stats.accuracy, stats.loss))
    }
}

/// File holding a trial's test-set labels and predictions.
pub fn predictions_path(result_dir: &Path, trial_id: &str) -> PathBuf {
    result_dir.join(format!("{trial_id}_test_predictions"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPredictions {
    pub n_classes: usize,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Artifact directories handed to the built-in trial.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArtifactDirs {
    pub reports: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub results: Option<PathBuf>,
}

impl ArtifactDirs {
    pub fn from_env() -> Self {
        let dir = |key: &str| std::env::var_os(key).map(PathBuf::from);
        Self {
            reports: dir(protocol::ENV_REPORT_DIR),
            models: dir(protocol::ENV_MODEL_DIR),
            results: dir(protocol::ENV_RESULT_DIR),
        }
    }
}

/// Run one built-in trial against the protocol context.
pub fn run_builtin_trial(
    ctx: TrialContext,
    mut settings: TrialSettings,
    seed: u64,
    dirs: &ArtifactDirs,
) -> Result<TrialOutcome> {
    let params = ctx.get_next_parameter()?;
    settings.apply(&params)?;
    let (_, trial_id, sequence_id) = ctx.identity();
    let trial_id = trial_id.to_owned();
    log::info!("trial {} (ID {trial_id}) with {params}", sequence_id + 1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(sequence_id));
    let random_split = rng.random_range(0..10);
    let data = generate_dataset(&settings.dataset, random_split)?;
    let mut runner = SnnRunner::new(&settings, &data, &mut rng)?;
    let mut reporter = Reporter::new(ctx);
    let outcome = train_trial(&mut runner, &mut reporter, settings.epochs)?;

    if let Some(results) = &dirs.results {
        fs::create_dir_all(results).map_err(|e| Error::io(results, e))?;
        let s = &outcome.series;
        for (name, values) in [
            ("train_acc", &s.train_acc),
            ("train_loss", &s.train_loss),
            ("val_acc", &s.val_acc),
            ("val_loss", &s.val_loss),
            ("test_acc", &s.test_acc),
            ("test_loss", &s.test_loss),
        ] {
            write_json(&results.join(format!("{trial_id}_{name}")), values)?;
        }
        write_json(
            &predictions_path(results, &trial_id),
            &TestPredictions {
                n_classes: data.spec.n_classes,
                labels: data.test.labels.clone(),
                predictions: runner.test_predictions.clone(),
            },
        )?;
    }
    if let Some(reports) = &dirs.reports {
        fs::create_dir_all(reports).map_err(|e| Error::io(reports, e))?;
        let test_acc = round_to(outcome.test_acc, 4);
        append_report(reports, test_acc, sequence_id, &trial_id)?;
        if let Some(models) = &dirs.models {
            let best = runner.best.as_ref().unwrap_or(&runner.model);
            let kept = retain_best_model(reports, test_acc, || {
                fs::create_dir_all(models).map_err(|e| Error::io(models, e))?;
                let meta = json!({
                    "trial_id": trial_id,
                    "sequence_id": sequence_id,
                    "test_acc": test_acc,
                    "params": params,
                    "series": outcome.series,
                });
                let path = models.join("best_model");
                fs::write(&path, best.to_blob(&meta)).map_err(|e| Error::io(&path, e))
            })?;
            if kept {
                log::info!("retained model of trial {trial_id} (test accuracy {test_acc})");
            }
        }
    }
    Ok(outcome)
}
