mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

use spikehpo::journal::{self, TrialStatus};
use spikehpo::objective::{predictions_path, TestPredictions};
use spikehpo::report::ConfusionMatrix;

fn spikehpo(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_spikehpo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "spikehpo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn builtin_experiment_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    // Relative paths resolve against the config file's directory.
    let config = json!({
        "experiment_name": "cli",
        "working_dir": "work",
        "trial_command": "spikehpo trial-builtin --epochs 3 --n-steps 30 --train-len 40 --val-len 10 --test-len 20",
        "search_space": {
            "n_rec": {"_type": "quniform", "_value": [8, 16, 8]},
            "lr": {"_type": "choice", "_value": [0.005, 0.01]},
            "reset_mechanism": {"_type": "choice", "_value": ["subtract", "zero"]}
        },
        "max_trial_number": 3,
        "trial_concurrency": 2,
        "seed": 3
    });
    fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    let out = spikehpo(&["run", config_path.to_str().unwrap()], elsewhere.path());
    let text = stdout(&out);
    assert!(text.contains("ended (max trial number reached)"), "{text}");

    let work = dir.path().join("work");
    let exp = common::experiment_dir(&work, "cli");
    let exp_str = exp.to_str().unwrap();
    let state = journal::replay(&exp.join("journal")).unwrap();
    assert_eq!(state.count(TrialStatus::Succeeded), 3, "{state:#?}");

    let status = stdout(&spikehpo(&["status", exp_str], dir.path()));
    assert!(status.contains("Succeeded 3"), "{status}");

    let csv_path = dir.path().join("parcoords.csv");
    spikehpo(
        &["export-parcoords", exp_str, "-o", csv_path.to_str().unwrap()],
        dir.path(),
    );
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n_rec,lr,reset_mechanism,best training,default,test");
    assert_eq!(lines.len(), 4);
    let printed = stdout(&spikehpo(&["export-parcoords", exp_str], dir.path()));
    assert_eq!(printed, csv, "export is a pure function of the journal");

    let trial = &state.trials[0];
    let confusion = stdout(&spikehpo(&["confusion", exp_str, &trial.trial_id], dir.path()));
    assert!(confusion.starts_with("true\\pred,0,1,2,3,4\n"), "{confusion}");
    let preds_file = predictions_path(
        &work.join("results").join("cli").join(&state.experiment_id),
        &trial.trial_id,
    );
    let preds: TestPredictions = serde_json::from_str(&fs::read_to_string(preds_file).unwrap()).unwrap();
    let matrix = ConfusionMatrix::new(&preds.predictions, &preds.labels, preds.n_classes).unwrap();
    assert_eq!(matrix.total(), 20);
    let test = trial.final_report.as_ref().unwrap().values()["test"];
    assert!((matrix.accuracy().unwrap() - test).abs() < 1e-12);
    assert!(confusion.contains(&format!("accuracy: {:.4}%", test)), "{confusion}");

    let report_dir = work.join("reports").join("cli").join(&state.experiment_id);
    let report = fs::read_to_string(report_dir.join("report_test")).unwrap();
    assert_eq!(report.lines().count(), 3);
    for t in &state.trials {
        assert!(report.contains(&t.trial_id));
    }
    let models = work.join("models").join("cli").join(&state.experiment_id);
    assert!(models.join("best_model").exists());

    // An ended journal is left untouched by recovery.
    let before = fs::read(exp.join("journal")).unwrap();
    spikehpo(&["recover", exp_str], dir.path());
    assert_eq!(fs::read(exp.join("journal")).unwrap(), before);

    spikehpo(&["stop", exp_str], dir.path());
    assert!(exp.join("stop").exists());
}

#[test]
fn confusion_rejects_unknown_trial() {
    let dir = tempfile::tempdir().unwrap();
    let script = common::write_script(
        dir.path(),
        "trial.sh",
        &common::emit(r#"{"kind":"final","values":{"default":1}}"#),
    );
    let config = common::toy_config(dir.path(), &script.display().to_string(), 1, 1);
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, config.to_string()).unwrap();
    spikehpo(&["run", config_path.to_str().unwrap()], dir.path());
    let exp = common::experiment_dir(dir.path(), "toy");
    let out = Command::new(env!("CARGO_BIN_EXE_spikehpo"))
        .args(["confusion", exp.to_str().unwrap(), "nosuchid"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn builtin_trial_needs_protocol_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_spikehpo"))
        .args(["trial-builtin", "--epochs", "1"])
        .env_remove("HPO_PARAMS_FILE")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn status_of_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_spikehpo"))
        .args(["status", dir.path().join("nothing").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
