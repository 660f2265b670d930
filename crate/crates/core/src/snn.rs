//! Recurrent LIF network with a leaky readout, trained with e-prop.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetMechanism {
    Subtract,
    Zero,
}

impl FromStr for ResetMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subtract" => Ok(Self::Subtract),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown reset mechanism `{other}`"))),
        }
    }
}

impl fmt::Display for ResetMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Subtract => "subtract",
            Self::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrnnConfig {
    pub n_in: usize,
    pub n_rec: usize,
    pub n_out: usize,
    pub thr: f64,
    pub tau_mem: f64,
    pub tau_out: f64,
    pub dt: f64,
    pub gamma: f64,
    pub b_o: f64,
    pub reset: ResetMechanism,
    pub t_crop: usize,
    /// He-normal gains for the input, recurrent and output layers.
    pub w_init_gain: [f64; 3],
}

impl SrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_rec == 0 || self.n_out == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("threshold", self.thr)?;
        positive("tau_mem", self.tau_mem)?;
        positive("tau_out", self.tau_out)?;
        positive("dt", self.dt)?;
        positive("gamma", self.gamma)?;
        if !self.thr.is_finite() || !self.gamma.is_finite() || !self.b_o.is_finite() || !self.dt.is_finite() {
            return Err(Error::Config("network constants must be finite".into()));
        }
        if self.t_crop == 0 {
            return Err(Error::Config("delay_targets must be at least 1".into()));
        }
        if self.w_init_gain.iter().any(|g| *g < 0.0 || !g.is_finite()) {
            return Err(Error::Config(
                "initialization gains must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Membrane potentials, spikes and readout at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub v: Array1<f64>,
    pub z: Array1<f64>,
    pub y: Array1<f64>,
}

impl NetState {
    pub fn zeros(n_rec: usize, n_out: usize) -> Self {
        Self {
            v: Array1::zeros(n_rec),
            z: Array1::zeros(n_rec),
            y: Array1::zeros(n_out),
        }
    }
}

/// Per-step records of a forward pass, each `[T × n]`. `u` is the membrane
/// potential before reset, `v` after.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub z: Array2<f64>,
    pub y: Array2<f64>,
}

impl ForwardTrace {
    pub fn steps(&self) -> usize {
        self.y.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_o: f64,
}

impl Gradients {
    pub fn zeros_like(model: &Srnn) -> Self {
        Self {
            w_in: Array2::zeros(model.w_in.raw_dim()),
            w_rec: Array2::zeros(model.w_rec.raw_dim()),
            w_out: Array2::zeros(model.w_out.raw_dim()),
            b_o: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.w_in += &other.w_in;
        self.w_rec += &other.w_rec;
        self.w_out += &other.w_out;
        self.b_o += other.b_o;
    }

    pub fn scale(&mut self, k: f64) {
        self.w_in *= k;
        self.w_rec *= k;
        self.w_out *= k;
        self.b_o *= k;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Srnn {
    pub w_in: Array2<f64>,
    pub w_rec: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_o: f64,
    pub thr: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub reset: ResetMechanism,
    pub t_crop: usize,
    pub dt: f64,
}

/// Entries i.i.d. Normal(0, (gain·sqrt(2/cols))²).
pub fn he_normal_init<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let sigma = gain * (2.0 / cols.max(1) as f64).sqrt();
    if sigma == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn softmax(y: ArrayView1<f64>) -> Array1<f64> {
    let max = y.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let e = y.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

impl Srnn {
    pub fn new<R: Rng + ?Sized>(config: &SrnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [g_in, g_rec, g_out] = config.w_init_gain;
        let w_in = he_normal_init(config.n_rec, config.n_in, g_in, rng);
        let mut w_rec = he_normal_init(config.n_rec, config.n_rec, g_rec, rng);
        w_rec.diag_mut().fill(0.0);
        let w_out = he_normal_init(config.n_out, config.n_rec, g_out, rng);
        Ok(Self {
            w_in,
            w_rec,
            w_out,
            b_o: config.b_o,
            thr: config.thr,
            alpha: (-config.dt / config.tau_mem).exp(),
            kappa: (-config.dt / config.tau_out).exp(),
            gamma: config.gamma,
            reset: config.reset,
            t_crop: config.t_crop,
            dt: config.dt,
        })
    }

    /// Build from explicit weights; the recurrent diagonal must be zero.
    #[allow(clippy::too_many_arguments)]
    pub fn from_weights(
        w_in: Array2<f64>,
        w_rec: Array2<f64>,
        w_out: Array2<f64>,
        b_o: f64,
        thr: f64,
        alpha: f64,
        kappa: f64,
        gamma: f64,
        reset: ResetMechanism,
        t_crop: usize,
    ) -> Result<Self> {
        let n_rec = w_in.nrows();
        if w_rec.dim() != (n_rec, n_rec) || w_out.ncols() != n_rec {
            return Err(Error::Shape(format!(
                "inconsistent weight shapes {:?} {:?} {:?}",
                w_in.dim(),
                w_rec.dim(),
                w_out.dim()
            )));
        }
        if w_rec.diag().iter().any(|d| *d != 0.0) {
            return Err(Error::Shape("recurrent weights must have a zero diagonal".into()));
        }
        if thr.is_nan() || thr <= 0.0 || t_crop == 0 {
            return Err(Error::Config("threshold must be positive and t_crop at least 1".into()));
        }
        Ok(Self {
            w_in,
            w_rec,
            w_out,
            b_o,
            thr,
            alpha,
            kappa,
            gamma,
            reset,
            t_crop,
            dt: 1e-3,
        })
    }

    pub fn n_in(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn n_rec(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w_out.nrows()
    }

    /// Triangular surrogate derivative, peak `gamma` at the threshold.
    pub fn pseudo_deriv(&self, v: f64) -> f64 {
        self.gamma * (1.0 - (v - self.thr).abs() / self.thr).max(0.0)
    }

    fn fire_and_reset(&self, u: f64) -> (f64, f64) {
        if u >= self.thr {
            let v = match self.reset {
                ResetMechanism::Subtract => u - self.thr,
                ResetMechanism::Zero => 0.0,
            };
            (1.0, v)
        } else {
            (0.0, u)
        }
    }

    /// Advance the recurrent layer one step; `y` is carried over unchanged.
    pub fn lif_step(&self, state: &NetState, x_t: ArrayView1<f64>) -> NetState {
        let u = self.alpha * &state.v + self.w_in.dot(&x_t) + self.w_rec.dot(&state.z);
        let mut z = Array1::zeros(u.len());
        let mut v = Array1::zeros(u.len());
        for j in 0..u.len() {
            let (zj, vj) = self.fire_and_reset(u[j]);
            z[j] = zj;
            v[j] = vj;
        }
        NetState {
            v,
            z,
            y: state.y.clone(),
        }
    }

    pub fn readout_step(&self, state: &NetState) -> Array1<f64> {
        self.kappa * &state.y + self.w_out.dot(&state.z) + self.b_o
    }

    /// Run from the all-zero state over `x` (`[T × n_in]`).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardTrace> {
        let steps = x.nrows();
        if steps == 0 {
            return Err(Error::Shape("input has no time steps".into()));
        }
        if x.ncols() != self.n_in() {
            return Err(Error::Shape(format!(
                "input width {} != n_in {}",
                x.ncols(),
                self.n_in()
            )));
        }
        let n_rec = self.n_rec();
        let drive = x.dot(&self.w_in.t());
        let mut u = Array2::zeros((steps, n_rec));
        let mut v = Array2::zeros((steps, n_rec));
        let mut z = Array2::zeros((steps, n_rec));
        let mut v_prev = Array1::<f64>::zeros(n_rec);
        let mut active: Vec<usize> = Vec::with_capacity(n_rec);
        for t in 0..steps {
            let mut u_t = drive.row(t).to_owned();
            u_t.scaled_add(self.alpha, &v_prev);
            for &i in &active {
                u_t += &self.w_rec.column(i);
            }
            active.clear();
            for j in 0..n_rec {
                let uj = u_t[j];
                if !uj.is_finite() {
                    return Err(Error::NumericOverflow { step: t });
                }
                let (zj, vj) = self.fire_and_reset(uj);
                if zj > 0.0 {
                    active.push(j);
                }
                z[[t, j]] = zj;
                v_prev[j] = vj;
            }
            u.row_mut(t).assign(&u_t);
            v.row_mut(t).assign(&v_prev);
        }
        let mut y = z.dot(&self.w_out.t());
        y += self.b_o;
        for t in 1..steps {
            let (prev, mut cur) = y.multi_slice_mut((s![t - 1, ..], s![t, ..]));
            cur.scaled_add(self.kappa, &prev);
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { step: t });
            }
        }
        if y.row(0).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { step: 0 });
        }
        Ok(ForwardTrace { u, v, z, y })
    }

    fn check_crop(&self, steps: usize) -> Result<()> {
        if self.t_crop > steps {
            return Err(Error::Config(format!(
                "delay_targets {} exceeds sequence length {steps}",
                self.t_crop
            )));
        }
        Ok(())
    }

    /// Output error δ (`[T × n_out]`): softmax minus one-hot on the last
    /// `t_crop` steps divided by `t_crop`, zero elsewhere.
    pub fn output_error(&self, trace: &ForwardTrace, label: usize) -> Result<Array2<f64>> {
        let steps = trace.steps();
        self.check_crop(steps)?;
        if label >= self.n_out() {
            return Err(Error::Data(format!("label {label} out of range")));
        }
        let mut delta = Array2::zeros(trace.y.raw_dim());
        let scale = 1.0 / self.t_crop as f64;
        for t in steps - self.t_crop..steps {
            let mut pi = softmax(trace.y.row(t));
            pi[label] -= 1.0;
            delta.row_mut(t).assign(&(pi * scale));
        }
        Ok(delta)
    }

    /// Mean cross-entropy over the cropped steps.
    pub fn loss(&self, trace: &ForwardTrace, label: usize) -> Result<f64> {
        let steps = trace.steps();
        self.check_crop(steps)?;
        let mut total = 0.0;
        for t in steps - self.t_crop..steps {
            let row = trace.y.row(t);
            let max = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
            total += lse - row[label];
        }
        Ok(total / self.t_crop as f64)
    }

    /// Class with the largest readout summed over the cropped steps; ties go
    /// to the lowest index.
    pub fn infer(&self, trace: &ForwardTrace) -> usize {
        let steps = trace.steps();
        let from = steps.saturating_sub(self.t_crop);
        let sums = trace.y.slice(s![from.., ..]).sum_axis(Axis(0));
        let mut best = 0;
        for k in 1..sums.len() {
            if sums[k] > sums[best] {
                best = k;
            }
        }
        best
    }

    /// e-prop gradients for one sample given its forward trace.
    pub fn eprop_grads(&self, x: ArrayView2<f64>, label: usize, trace: &ForwardTrace) -> Result<Gradients> {
        let delta = self.output_error(trace, label)?;
        Ok(self.eprop_grads_from_error(x, trace, &delta))
    }

    /// Gradients for an arbitrary output error; linear in `delta`.
    pub fn eprop_grads_from_error(&self, x: ArrayView2<f64>, trace: &ForwardTrace, delta: &Array2<f64>) -> Gradients {
        let steps = trace.steps();
        // Learning signal, then its backward κ-filter so the κ-filtered
        // eligibility sum collapses into one matrix product per layer.
        let mut lbar = delta.dot(&self.w_out);
        for t in (0..steps.saturating_sub(1)).rev() {
            let (mut cur, next) = lbar.multi_slice_mut((s![t, ..], s![t + 1, ..]));
            cur.scaled_add(self.kappa, &next);
        }
        Zip::from(&mut lbar)
            .and(&trace.u)
            .for_each(|l, &u| *l *= self.pseudo_deriv(u));

        let eps_in = low_pass(x, self.alpha, false);
        let eps_rec = low_pass(trace.z.view(), self.alpha, true);
        let w_in = lbar.t().dot(&eps_in);
        let mut w_rec = lbar.t().dot(&eps_rec);
        w_rec.diag_mut().fill(0.0);

        let zbar = low_pass(trace.z.view(), self.kappa, false);
        let w_out = delta.t().dot(&zbar);
        Gradients {
            w_in,
            w_rec,
            w_out,
            b_o: delta.sum(),
        }
    }

    /// Mean gradient, mean loss and per-sample predictions over a batch.
    pub fn batch_gradients(&self, xs: &[Array2<f64>], labels: &[usize]) -> Result<(Gradients, f64, Vec<usize>)> {
        let mut total = Gradients::zeros_like(self);
        let mut loss = 0.0;
        let mut predictions = Vec::with_capacity(xs.len());
        for (x, &label) in xs.iter().zip(labels) {
            let trace = self.forward(x.view())?;
            total.add_assign(&self.eprop_grads(x.view(), label, &trace)?);
            loss += self.loss(&trace, label)?;
            predictions.push(self.infer(&trace));
        }
        let n = xs.len().max(1) as f64;
        total.scale(1.0 / n);
        Ok((total, loss / n, predictions))
    }

    /// Serialize as a one-line JSON header followed by little-endian f64
    /// values of W_in, W_rec, W_out and b_o, each matrix row-major.
    pub fn to_blob(&self, metadata: &Value) -> Vec<u8> {
        let header = json!({
            "format": "srnn-f64le",
            "shapes": {
                "w_in": [self.w_in.nrows(), self.w_in.ncols()],
                "w_rec": [self.w_rec.nrows(), self.w_rec.ncols()],
                "w_out": [self.w_out.nrows(), self.w_out.ncols()],
                "b_o": [1],
            },
            "thr": self.thr,
            "alpha": self.alpha,
            "kappa": self.kappa,
            "gamma": self.gamma,
            "reset_mechanism": self.reset,
            "t_crop": self.t_crop,
            "dt": self.dt,
            "metadata": metadata,
        });
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for m in [&self.w_in, &self.w_rec, &self.w_out] {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.b_o.to_le_bytes());
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<(Self, Value)> {
        let bad = |msg: &str| Error::Invalid(format!("model blob: {msg}"));
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| bad("missing header"))?;
        let header: Value = serde_json::from_slice(&bytes[..nl])?;
        if header["format"] != "srnn-f64le" {
            return Err(bad("unknown format"));
        }
        let shape = |key: &str| -> Result<(usize, usize)> {
            let dims: Vec<usize> = serde_json::from_value(header["shapes"][key].clone())?;
            match dims.as_slice() {
                [r, c] => Ok((*r, *c)),
                _ => Err(bad("bad shape")),
            }
        };
        let mut data = bytes[nl + 1..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |(r, c): (usize, usize)| -> Result<Array2<f64>> {
            let values: Vec<f64> = data.by_ref().take(r * c).collect();
            Array2::from_shape_vec((r, c), values).map_err(|_| bad("truncated data"))
        };
        let w_in = take(shape("w_in")?)?;
        let w_rec = take(shape("w_rec")?)?;
        let w_out = take(shape("w_out")?)?;
        let b_o = data.next().ok_or_else(|| bad("truncated data"))?;
        if data.next().is_some() || !(bytes.len() - nl - 1).is_multiple_of(8) {
            return Err(bad("trailing bytes"));
        }
        let num = |key: &str| header[key].as_f64().ok_or_else(|| bad(key));
        let reset: ResetMechanism = serde_json::from_value(header["reset_mechanism"].clone())?;
        let t_crop = header["t_crop"].as_u64().ok_or_else(|| bad("t_crop"))? as usize;
        let mut model = Self::from_weights(
            w_in,
            w_rec,
            w_out,
            b_o,
            num("thr")?,
            num("alpha")?,
            num("kappa")?,
            num("gamma")?,
            reset,
            t_crop,
        )?;
        model.dt = num("dt")?;
        Ok((model, header["metadata"].clone()))
    }
}

/// `out[t] = k·out[t−1] + src[t]`, or `src[t−1]` when `shifted`.
fn low_pass(src: ArrayView2<f64>, k: f64, shifted: bool) -> Array2<f64> {
    let mut out = Array2::zeros(src.raw_dim());
    for t in 0..src.nrows() {
        if t > 0 {
            let (prev, mut cur) = out.multi_slice_mut((s![t - 1, ..], s![t, ..]));
            cur.scaled_add(k, &prev);
        }
        if shifted {
            if t > 0 {
                out.row_mut(t).scaled_add(1.0, &src.row(t - 1));
            }
        } else {
            out.row_mut(t).scaled_add(1.0, &src.row(t));
        }
    }
    out
}

/// Adam first and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: i32,
}

impl AdamMoments {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update at rate `base_lr * layer_factor`.
pub fn adam_step(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    base_lr: f64,
    layer_factor: f64,
    moments: &mut AdamMoments,
) {
    moments.t += 1;
    let lr = base_lr * layer_factor;
    let c1 = 1.0 - ADAM_BETA1.powi(moments.t);
    let c2 = 1.0 - ADAM_BETA2.powi(moments.t);
    Zip::from(param)
        .and(grad)
        .and(&mut moments.m)
        .and(&mut moments.v)
        .for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
}

/// Adam over all four parameter groups; the bias shares the output factor.
#[derive(Debug, Clone)]
pub struct SrnnOptimizer {
    pub base_lr: f64,
    pub layer_factors: [f64; 3],
    m_in: AdamMoments,
    m_rec: AdamMoments,
    m_out: AdamMoments,
    m_b: AdamMoments,
}

impl SrnnOptimizer {
    pub fn new(model: &Srnn, base_lr: f64, layer_factors: [f64; 3]) -> Self {
        Self {
            base_lr,
            layer_factors,
            m_in: AdamMoments::zeros(model.w_in.dim()),
            m_rec: AdamMoments::zeros(model.w_rec.dim()),
            m_out: AdamMoments::zeros(model.w_out.dim()),
            m_b: AdamMoments::zeros((1, 1)),
        }
    }

    pub fn step(&mut self, model: &mut Srnn, grads: &Gradients) {
        let [f_in, f_rec, f_out] = self.layer_factors;
        adam_step(&mut model.w_in, &grads.w_in, self.base_lr, f_in, &mut self.m_in);
        adam_step(&mut model.w_rec, &grads.w_rec, self.base_lr, f_rec, &mut self.m_rec);
        model.w_rec.diag_mut().fill(0.0);
        adam_step(&mut model.w_out, &grads.w_out, self.base_lr, f_out, &mut self.m_out);
        let mut b = Array2::from_elem((1, 1), model.b_o);
        adam_step(
            &mut b,
            &Array2::from_elem((1, 1), grads.b_o),
            self.base_lr,
            f_out,
            &mut self.m_b,
        );
        model.b_o = b[[0, 0]];
    }
}
