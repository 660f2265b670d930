use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use spikehpo::engine::{self, Engine, ExperimentConfig, ExperimentPaths};
use spikehpo::journal::{self, now_millis};
use spikehpo::objective::{self, ArtifactDirs, DatasetSpec, TestPredictions, TrialSettings};
use spikehpo::protocol::{self, TrialContext};
use spikehpo::report::{self, ConfusionMatrix};
use spikehpo::snn::ResetMechanism;

#[derive(Parser)]
#[command(
    name = "spikehpo",
    version,
    about = "Hyperparameter optimization for recurrent spiking networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    Run { config: PathBuf },
    /// Summarize an experiment directory.
    Status { dir: PathBuf },
    /// Export succeeded trials as a parallel-coordinates CSV.
    ExportParcoords {
        dir: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the test-set confusion matrix of a built-in trial.
    Confusion { dir: PathBuf, trial_id: String },
    /// Ask a running experiment to stop.
    Stop { dir: PathBuf },
    /// Close out the journal of an experiment whose engine died.
    Recover { dir: PathBuf },
    /// Built-in spiking-network trial; reads the protocol environment.
    TrialBuiltin(BuiltinArgs),
}

#[derive(Args)]
struct BuiltinArgs {
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, num_args = 3, default_values_t = [0.05, 0.05, 1.0])]
    lr_layer_norm: Vec<f64>,
    #[arg(long, num_args = 3, default_values_t = [0.5, 0.1, 0.5])]
    w_init_gain: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    n_rec: usize,
    #[arg(long, default_value_t = 0.9)]
    threshold: f64,
    #[arg(long, default_value_t = 250e-3)]
    tau_mem: f64,
    #[arg(long, default_value_t = 5e-3)]
    tau_out: f64,
    #[arg(long, default_value_t = 0.0)]
    bias_out: f64,
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 10)]
    delay_targets: usize,
    #[arg(long, default_value = "subtract")]
    reset_mechanism: String,
    #[arg(long, default_value_t = 5)]
    n_classes: usize,
    #[arg(long, default_value_t = 20)]
    n_inputs: usize,
    #[arg(long, default_value_t = 100)]
    n_steps: usize,
    #[arg(long, default_value_t = 500)]
    train_len: usize,
    #[arg(long, default_value_t = 100)]
    val_len: usize,
    #[arg(long, default_value_t = 100)]
    test_len: usize,
    #[arg(long, default_value_t = objective::DATA_SEED)]
    data_seed: u64,
    /// Fallback when the engine does not export a seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl BuiltinArgs {
    fn settings(&self) -> anyhow::Result<TrialSettings> {
        let triple = |v: &[f64]| -> anyhow::Result<[f64; 3]> {
            v.try_into().map_err(|_| anyhow::anyhow!("expected three values"))
        };
        Ok(TrialSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_layer_norm: triple(&self.lr_layer_norm)?,
            w_init_gain: triple(&self.w_init_gain)?,
            n_rec: self.n_rec,
            threshold: self.threshold,
            tau_mem: self.tau_mem,
            tau_out: self.tau_out,
            bias_out: self.bias_out,
            gamma: self.gamma,
            dt: self.dt,
            delay_targets: self.delay_targets,
            reset_mechanism: self.reset_mechanism.parse::<ResetMechanism>()?,
            shuffle: true,
            dataset: DatasetSpec {
                n_classes: self.n_classes,
                n_in: self.n_inputs,
                steps: self.n_steps,
                train_len: self.train_len,
                val_len: self.val_len,
                test_len: self.test_len,
                seed: self.data_seed,
            },
        })
    }
}

/// Point a leading `spikehpo` in the trial command at this executable.
fn resolve_self_command(command: &str) -> String {
    let trimmed = command.trim_start();
    match trimmed.strip_prefix("spikehpo") {
        Some(rest) if rest.is_empty() || rest.starts_with(char::is_whitespace) => match std::env::current_exe() {
            Ok(exe) => format!("'{}'{rest}", exe.display().to_string().replace('\'', r"'\''")),
            Err(_) => command.to_owned(),
        },
        _ => command.to_owned(),
    }
}

fn run(config_path: &Path) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    config.trial_command = resolve_self_command(&config.trial_command);
    let engine = Engine::start(config)?;
    let dir = engine.paths().experiment_dir.clone();
    println!("experiment {} in {}", engine.experiment_id(), dir.display());
    let replay = engine.run()?;
    print!("{}", report::status(&replay, now_millis()));
    Ok(())
}

fn confusion(dir: &Path, trial_id: &str) -> anyhow::Result<()> {
    let replay = report::load_experiment(dir)?;
    if replay.trial(trial_id).is_none() {
        bail!("no trial {trial_id} in {}", dir.display());
    }
    let paths = ExperimentPaths::from_experiment_dir(dir)?;
    let path = objective::predictions_path(&paths.results, trial_id);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let preds: TestPredictions = serde_json::from_str(&text)?;
    let matrix = ConfusionMatrix::new(&preds.predictions, &preds.labels, preds.n_classes)?;
    print!("{}", matrix.to_csv()?);
    println!("accuracy: {:.4}%", matrix.accuracy()?);
    Ok(())
}

fn trial_builtin(args: &BuiltinArgs) -> anyhow::Result<()> {
    let settings = args.settings()?;
    let ctx = TrialContext::from_env()?;
    let seed = match std::env::var(protocol::ENV_SEED) {
        Ok(s) => s.parse().with_context(|| format!("bad {}", protocol::ENV_SEED))?,
        Err(_) => args.seed,
    };
    objective::run_builtin_trial(ctx, settings, seed, &ArtifactDirs::from_env())?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => run(&config),
        Command::Status { dir } => {
            let replay = report::load_experiment(&dir)?;
            print!("{}", report::status(&replay, now_millis()));
            Ok(())
        }
        Command::ExportParcoords { dir, output } => {
            let csv = report::export_parallel_coordinates(&report::load_experiment(&dir)?)?;
            match output {
                Some(path) => fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Confusion { dir, trial_id } => confusion(&dir, &trial_id),
        Command::Stop { dir } => {
            engine::request_stop(&dir)?;
            println!("stop requested for {}", dir.display());
            Ok(())
        }
        Command::Recover { dir } => {
            let replay = journal::recover(&dir.join("journal"))?;
            print!("{}", report::status(&replay, now_millis()));
            Ok(())
        }
        Command::TrialBuiltin(args) => trial_builtin(&args),
    }
}
