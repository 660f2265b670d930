//! Shared oracles and fixtures for the integration tests.

#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use spikehpo::snn::{ResetMechanism, Srnn, SrnnConfig};

/// Small network with enough drive to spike a few times in 5 steps.
pub fn tiny_network(seed: u64, reset: ResetMechanism) -> (Srnn, Array2<f64>, usize) {
    let config = SrnnConfig {
        n_in: 3,
        n_rec: 4,
        n_out: 3,
        thr: 0.6,
        tau_mem: 20e-3,
        tau_out: 10e-3,
        dt: 1e-3,
        gamma: 0.3,
        b_o: 0.1,
        reset,
        t_crop: 3,
        w_init_gain: [1.5, 1.0, 1.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Srnn::new(&config, &mut rng).unwrap();
    let x = Array2::from_shape_simple_fn((5, 3), || f64::from(u8::from(rng.random_bool(0.6))));
    let label = rng.random_range(0..3);
    (model, x, label)
}

fn step_spikes(model: &Srnn, u: f64) -> (f64, f64) {
    if u >= model.thr {
        match model.reset {
            ResetMechanism::Subtract => (1.0, u - model.thr),
            ResetMechanism::Zero => (1.0, 0.0),
        }
    } else {
        (0.0, u)
    }
}

/// Element-by-element forward recursion: returns (u, z, y) per step.
pub fn naive_forward(model: &Srnn, x: ArrayView2<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n_rec, n_in, n_out) = (model.n_rec(), model.n_in(), model.n_out());
    let mut v = vec![0.0; n_rec];
    let mut z = vec![0.0; n_rec];
    let mut y = vec![0.0; n_out];
    let (mut us, mut zs, mut ys) = (vec![], vec![], vec![]);
    for t in 0..x.nrows() {
        let mut u = vec![0.0; n_rec];
        for j in 0..n_rec {
            let mut acc = model.alpha * v[j];
            for i in 0..n_in {
                acc += model.w_in[[j, i]] * x[[t, i]];
            }
            for i in 0..n_rec {
                acc += model.w_rec[[j, i]] * z[i];
            }
            u[j] = acc;
        }
        for j in 0..n_rec {
            let (zj, vj) = step_spikes(model, u[j]);
            z[j] = zj;
            v[j] = vj;
        }
        for k in 0..n_out {
            let mut acc = model.kappa * y[k] + model.b_o;
            for j in 0..n_rec {
                acc += model.w_out[[k, j]] * z[j];
            }
            y[k] = acc;
        }
        us.push(u);
        zs.push(z.clone());
        ys.push(y.clone());
    }
    (us, zs, ys)
}

fn softmax(y: &[f64]) -> Vec<f64> {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean cross-entropy over the last `t_crop` steps.
pub fn cropped_loss(model: &Srnn, x: ArrayView2<f64>, label: usize) -> f64 {
    let (_, _, ys) = naive_forward(model, x);
    let steps = ys.len();
    let mut total = 0.0;
    for y in &ys[steps - model.t_crop..] {
        total -= softmax(y)[label].ln();
    }
    total / model.t_crop as f64
}

/// Straight-line e-prop: every synapse's eligibility trace is run through
/// its own recursion and multiplied into the learning signal step by step.
pub fn unrolled_eprop(model: &Srnn, x: ArrayView2<f64>, label: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n_rec, n_in, n_out) = (model.n_rec(), model.n_in(), model.n_out());
    let (us, zs, ys) = naive_forward(model, x);
    let steps = ys.len();
    let mut delta = vec![vec![0.0; n_out]; steps];
    for t in steps - model.t_crop..steps {
        let p = softmax(&ys[t]);
        for k in 0..n_out {
            let target = if k == label { 1.0 } else { 0.0 };
            delta[t][k] = (p[k] - target) / model.t_crop as f64;
        }
    }
    let learning: Vec<Vec<f64>> = delta
        .iter()
        .map(|d| {
            (0..n_rec)
                .map(|j| (0..n_out).map(|k| model.w_out[[k, j]] * d[k]).sum())
                .collect()
        })
        .collect();
    let surrogate = |u: f64| model.gamma * (1.0 - (u - model.thr).abs() / model.thr).max(0.0);

    let mut g_in = Array2::zeros((n_rec, n_in));
    for j in 0..n_rec {
        for i in 0..n_in {
            let (mut eps, mut ebar, mut g) = (0.0, 0.0, 0.0);
            for t in 0..steps {
                eps = model.alpha * eps + x[[t, i]];
                let e = surrogate(us[t][j]) * eps;
                ebar = model.kappa * ebar + e;
                g += learning[t][j] * ebar;
            }
            g_in[[j, i]] = g;
        }
    }
    let mut g_rec = Array2::zeros((n_rec, n_rec));
    for j in 0..n_rec {
        for i in 0..n_rec {
            if i == j {
                continue;
            }
            let (mut eps, mut ebar, mut g) = (0.0, 0.0, 0.0);
            for t in 0..steps {
                let pre = if t == 0 { 0.0 } else { zs[t - 1][i] };
                eps = model.alpha * eps + pre;
                let e = surrogate(us[t][j]) * eps;
                ebar = model.kappa * ebar + e;
                g += learning[t][j] * ebar;
            }
            g_rec[[j, i]] = g;
        }
    }
    let mut g_out = Array2::zeros((n_out, n_rec));
    for k in 0..n_out {
        for j in 0..n_rec {
            let (mut zbar, mut g) = (0.0, 0.0);
            for t in 0..steps {
                zbar = model.kappa * zbar + zs[t][j];
                g += delta[t][k] * zbar;
            }
            g_out[[k, j]] = g;
        }
    }
    (g_in, g_rec, g_out)
}

/// Central finite differences of the cropped loss with respect to W_out.
pub fn finite_diff_w_out(model: &Srnn, x: ArrayView2<f64>, label: usize, h: f64) -> Array2<f64> {
    let mut out = Array2::zeros(model.w_out.raw_dim());
    for ((k, j), slot) in out.indexed_iter_mut() {
        let mut plus = model.clone();
        plus.w_out[[k, j]] += h;
        let mut minus = model.clone();
        minus.w_out[[k, j]] -= h;
        *slot = (cropped_loss(&plus, x, label) - cropped_loss(&minus, x, label)) / (2.0 * h);
    }
    out
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn relative_error(a: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(reference.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

pub fn spike_count(model: &Srnn, x: ArrayView2<f64>) -> f64 {
    let (_, zs, _) = naive_forward(model, x);
    zs.iter().flatten().sum()
}

pub fn as_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).unwrap()
}

pub fn vector(values: &[f64]) -> Array1<f64> {
    Array1::from(values.to_vec())
}

/// Write an executable shell script.
pub fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{body}")).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

/// Experiment config over a two-parameter toy space.
pub fn toy_config(working_dir: &Path, command: &str, trials: u64, concurrency: usize) -> Value {
    json!({
        "experiment_name": "toy",
        "working_dir": working_dir,
        "trial_command": command,
        "trial_code_dir": working_dir,
        "search_space": {
            "a": {"_type": "quniform", "_value": [-5, 5, 1]},
            "b": {"_type": "quniform", "_value": [-5, 5, 1]}
        },
        "max_trial_number": trials,
        "max_experiment_duration": "10m",
        "trial_concurrency": concurrency,
        "seed": 7
    })
}

/// Shell snippet appending one metrics line.
pub fn emit(line: &str) -> String {
    format!("printf '%s\\n' '{line}' >> \"$HPO_METRICS_FILE\"\n")
}

/// The only experiment directory below `working_dir` for `name`.
pub fn experiment_dir(working_dir: &Path, name: &str) -> PathBuf {
    let parent = working_dir.join("experiments").join(name);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&parent).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "expected one experiment under {}", parent.display());
    dirs.pop().unwrap()
}
