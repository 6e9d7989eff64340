//! Free-response networks: two stacked LSTM layers followed by two dense
//! layers, one network per prediction step `j`.
//!
//! The regressor is presented as a sequence of `3T + 1` per-tick triples
//! `(cgm, insulin, cho)`, oldest first. Inputs are standardized per channel;
//! outputs are standardized glucose increments `y_{k+i} - y_k`.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::predictor::{history_len, FreeResponse, PredictorState};
use crate::tensors::TensorFile;
use crate::util::{mean, rng_from, sample_std};

pub const INPUT_CHANNELS: usize = 3;
const FT_FORMAT: &str = "glucose-mpc/free-response";

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Offsets of each parameter block inside the flat parameter vector.
/// Gate rows are ordered input, forget, output, candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    input: usize,
    hidden: usize,
    output: usize,
    l1_w: usize,
    l1_b: usize,
    l2_w: usize,
    l2_b: usize,
    f1_w: usize,
    f1_b: usize,
    f2_w: usize,
    f2_b: usize,
    total: usize,
}

impl Layout {
    fn new(input: usize, hidden: usize, output: usize) -> Self {
        let g = 4 * hidden;
        let l1_w = 0;
        let l1_b = l1_w + g * (input + hidden);
        let l2_w = l1_b + g;
        let l2_b = l2_w + g * 2 * hidden;
        let f1_w = l2_b + g;
        let f1_b = f1_w + hidden * hidden;
        let f2_w = f1_b + hidden;
        let f2_b = f2_w + output * hidden;
        let total = f2_b + output;
        Layout {
            input,
            hidden,
            output,
            l1_w,
            l1_b,
            l2_w,
            l2_b,
            f1_w,
            f1_b,
            f2_w,
            f2_b,
            total,
        }
    }

    /// `(name, offset, shape)` for every block.
    fn blocks(&self) -> [(&'static str, usize, [usize; 2]); 8] {
        let (i, h, o) = (self.input, self.hidden, self.output);
        [
            ("lstm1.weight", self.l1_w, [4 * h, i + h]),
            ("lstm1.bias", self.l1_b, [4 * h, 1]),
            ("lstm2.weight", self.l2_w, [4 * h, 2 * h]),
            ("lstm2.bias", self.l2_b, [4 * h, 1]),
            ("fc1.weight", self.f1_w, [h, h]),
            ("fc1.bias", self.f1_b, [h, 1]),
            ("fc2.weight", self.f2_w, [o, h]),
            ("fc2.bias", self.f2_b, [o, 1]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNetwork {
    layout: Layout,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`LstmNetwork::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    steps: usize,
    // per layer: concatenated [x_t; h_{t-1}], post-activation gates, cell
    // states (with the zero initial state first), tanh of cell states, hidden outputs
    z1: Vec<f64>,
    gates1: Vec<f64>,
    c1: Vec<f64>,
    tc1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    gates2: Vec<f64>,
    c2: Vec<f64>,
    tc2: Vec<f64>,
    h2: Vec<f64>,
    fc1: Vec<f64>,
    pub out: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    w: &[f64],
    b: &[f64],
    in_dim: usize,
    h: usize,
    steps: usize,
    x: &[f64],
    z: &mut Vec<f64>,
    gates: &mut Vec<f64>,
    c: &mut Vec<f64>,
    tc: &mut Vec<f64>,
    hs: &mut Vec<f64>,
) {
    let zw = in_dim + h;
    z.clear();
    z.resize(steps * zw, 0.0);
    gates.clear();
    gates.resize(steps * 4 * h, 0.0);
    c.clear();
    c.resize((steps + 1) * h, 0.0);
    tc.clear();
    tc.resize(steps * h, 0.0);
    hs.clear();
    hs.resize(steps * h, 0.0);
    for t in 0..steps {
        {
            let zt = &mut z[t * zw..(t + 1) * zw];
            zt[..in_dim].copy_from_slice(&x[t * in_dim..(t + 1) * in_dim]);
            if t > 0 {
                zt[in_dim..].copy_from_slice(&hs[(t - 1) * h..t * h]);
            }
        }
        let zt = &z[t * zw..(t + 1) * zw];
        let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for r in 0..4 * h {
            let a = b[r] + dot(&w[r * zw..(r + 1) * zw], zt);
            g[r] = if r < 3 * h { sigmoid(a) } else { a.tanh() };
        }
        for k in 0..h {
            let (i, f, o, gg) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let cn = f * c[t * h + k] + i * gg;
            c[(t + 1) * h + k] = cn;
            let tcn = cn.tanh();
            tc[t * h + k] = tcn;
            hs[t * h + k] = o * tcn;
        }
    }
}

/// Backpropagation through time for one layer. `dh_ext` is the loss
/// gradient arriving at each hidden output from above; gradients of the
/// layer inputs are written to `dx` when requested.
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    w: &[f64],
    in_dim: usize,
    h: usize,
    steps: usize,
    z: &[f64],
    gates: &[f64],
    c: &[f64],
    tc: &[f64],
    dh_ext: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let zw = in_dim + h;
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    let mut dz = vec![0.0; zw];
    for t in (0..steps).rev() {
        let g = &gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let (i, f, o, gg) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tck = tc[t * h + k];
            let dh = dh_ext[t * h + k] + dh_next[k];
            let dc = dh * o * (1.0 - tck * tck) + dc_next[k];
            dc_next[k] = dc * f;
            da[k] = dc * gg * i * (1.0 - i);
            da[h + k] = dc * c[t * h + k] * f * (1.0 - f);
            da[2 * h + k] = dh * tck * o * (1.0 - o);
            da[3 * h + k] = dc * i * (1.0 - gg * gg);
        }
        let zt = &z[t * zw..(t + 1) * zw];
        dz.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..4 * h {
            let d = da[r];
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            axpy(&mut gw[r * zw..(r + 1) * zw], d, zt);
            axpy(&mut dz, d, &w[r * zw..(r + 1) * zw]);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dx[t * in_dim..(t + 1) * in_dim].copy_from_slice(&dz[..in_dim]);
        }
        dh_next.copy_from_slice(&dz[in_dim..]);
    }
}

impl LstmNetwork {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::InvalidArgument(
                "network dimensions must be >= 1".into(),
            ));
        }
        let layout = Layout::new(input, hidden, output);
        Ok(LstmNetwork {
            layout,
            params: vec![0.0; layout.total],
        })
    }

    /// Uniform `±1/sqrt(fan)` initialization with forget-gate biases at 1.
    pub fn init(input: usize, hidden: usize, output: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input, hidden, output)?;
        let mut rng = rng_from(seed, &[0x1157]);
        let l = net.layout;
        let lim_h = 1.0 / (hidden as f64).sqrt();
        for (name, off, shape) in l.blocks() {
            let n = shape[0] * shape[1];
            let block = &mut net.params[off..off + n];
            if name.ends_with("weight") {
                for p in block.iter_mut() {
                    *p = rng.random_range(-lim_h..lim_h);
                }
            }
        }
        for k in 0..hidden {
            net.params[l.l1_b + hidden + k] = 1.0;
            net.params[l.l2_b + hidden + k] = 1.0;
        }
        Ok(net)
    }

    pub fn input_size(&self) -> usize {
        self.layout.input
    }

    pub fn hidden_size(&self) -> usize {
        self.layout.hidden
    }

    pub fn output_size(&self) -> usize {
        self.layout.output
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn steps_of(&self, seq: &[f64]) -> Result<usize> {
        let i = self.layout.input;
        if seq.is_empty() || !seq.len().is_multiple_of(i) {
            return Err(Error::DimensionMismatch {
                context: "network input sequence",
                expected: i * (seq.len() / i).max(1),
                actual: seq.len(),
            });
        }
        Ok(seq.len() / i)
    }

    /// Forward pass over a flattened `[steps x input]` sequence, recording
    /// activations into `tape`.
    pub fn forward_tape(&self, seq: &[f64], tape: &mut Tape) -> Result<()> {
        let steps = self.steps_of(seq)?;
        let l = self.layout;
        let (h, p) = (l.hidden, &self.params);
        tape.steps = steps;
        layer_forward(
            &p[l.l1_w..l.l1_b],
            &p[l.l1_b..l.l2_w],
            l.input,
            h,
            steps,
            seq,
            &mut tape.z1,
            &mut tape.gates1,
            &mut tape.c1,
            &mut tape.tc1,
            &mut tape.h1,
        );
        let h1 = std::mem::take(&mut tape.h1);
        layer_forward(
            &p[l.l2_w..l.l2_b],
            &p[l.l2_b..l.f1_w],
            h,
            h,
            steps,
            &h1,
            &mut tape.z2,
            &mut tape.gates2,
            &mut tape.c2,
            &mut tape.tc2,
            &mut tape.h2,
        );
        tape.h1 = h1;
        let last = &tape.h2[(steps - 1) * h..steps * h];
        tape.fc1.clear();
        for r in 0..h {
            tape.fc1
                .push((p[l.f1_b + r] + dot(&p[l.f1_w + r * h..l.f1_w + (r + 1) * h], last)).tanh());
        }
        tape.out.clear();
        for r in 0..l.output {
            tape.out
                .push(p[l.f2_b + r] + dot(&p[l.f2_w + r * h..l.f2_w + (r + 1) * h], &tape.fc1));
        }
        if tape.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(())
    }

    pub fn forward(&self, seq: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.forward_tape(seq, &mut tape)?;
        Ok(tape.out)
    }

    /// Accumulate `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut [f64]) -> Result<()> {
        let l = self.layout;
        if d_out.len() != l.output {
            return Err(Error::DimensionMismatch {
                context: "output gradient",
                expected: l.output,
                actual: d_out.len(),
            });
        }
        if grad.len() != l.total {
            return Err(Error::DimensionMismatch {
                context: "parameter gradient",
                expected: l.total,
                actual: grad.len(),
            });
        }
        let (h, p, steps) = (l.hidden, &self.params, tape.steps);
        let last = &tape.h2[(steps - 1) * h..steps * h];

        let mut d_fc1 = vec![0.0; h];
        for (r, &d) in d_out.iter().enumerate() {
            grad[l.f2_b + r] += d;
            axpy(
                &mut grad[l.f2_w + r * h..l.f2_w + (r + 1) * h],
                d,
                &tape.fc1,
            );
            axpy(&mut d_fc1, d, &p[l.f2_w + r * h..l.f2_w + (r + 1) * h]);
        }
        let mut dh2 = vec![0.0; steps * h];
        {
            let dh_last = &mut dh2[(steps - 1) * h..];
            for r in 0..h {
                let u = tape.fc1[r];
                let d = d_fc1[r] * (1.0 - u * u);
                grad[l.f1_b + r] += d;
                axpy(&mut grad[l.f1_w + r * h..l.f1_w + (r + 1) * h], d, last);
                axpy(dh_last, d, &p[l.f1_w + r * h..l.f1_w + (r + 1) * h]);
            }
        }

        let mut dh1 = vec![0.0; steps * h];
        let (g_head, g_l2b) = grad.split_at_mut(l.l2_b);
        let (g_head, g_l2w) = g_head.split_at_mut(l.l2_w);
        layer_backward(
            &p[l.l2_w..l.l2_b],
            h,
            h,
            steps,
            &tape.z2,
            &tape.gates2,
            &tape.c2,
            &tape.tc2,
            &dh2,
            g_l2w,
            &mut g_l2b[..4 * h],
            Some(&mut dh1),
        );
        let (g_l1w, g_l1b) = g_head.split_at_mut(l.l1_b);
        layer_backward(
            &p[l.l1_w..l.l1_b],
            l.input,
            h,
            steps,
            &tape.z1,
            &tape.gates1,
            &tape.c1,
            &tape.tc1,
            &dh1,
            g_l1w,
            &mut g_l1b[..4 * h],
            None,
        );
        Ok(())
    }

    fn to_tensors(&self, file: &mut TensorFile, prefix: &str) -> Result<()> {
        for (name, off, shape) in self.layout.blocks() {
            let n = shape[0] * shape[1];
            file.push(
                &format!("{prefix}{name}"),
                &shape,
                self.params[off..off + n].to_vec(),
            )?;
        }
        Ok(())
    }

    fn from_tensors(
        file: &TensorFile,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        let mut net = Self::zeros(input, hidden, output)?;
        for (name, off, shape) in net.layout.blocks() {
            let data = file.take(&format!("{prefix}{name}"), &shape)?;
            net.params[off..off + data.len()].copy_from_slice(&data);
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(net)
    }
}

/// `ŷ_{k+j}` is the last element of the `f_j` output.
pub fn select_multi_step_sample(outputs: &[f64], j: usize) -> Result<f64> {
    if j == 0 || outputs.len() != j {
        return Err(Error::DimensionMismatch {
            context: "f_j output length",
            expected: j,
            actual: outputs.len(),
        });
    }
    Ok(outputs[j - 1])
}

/// Per-channel affine scaling of the input triples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; INPUT_CHANNELS],
    pub std: [f64; INPUT_CHANNELS],
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer {
            mean: [0.0; INPUT_CHANNELS],
            std: [1.0; INPUT_CHANNELS],
        }
    }

    /// Channel statistics over every tick of every window, with the standard
    /// deviation floored at `floor` per channel.
    pub fn fit(windows: &[&Window], floor: [f64; INPUT_CHANNELS]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::InsufficientData(
                "no windows to fit input scaling".into(),
            ));
        }
        let mut s = Standardizer::identity();
        for ch in 0..INPUT_CHANNELS {
            let vals: Vec<f64> = windows
                .iter()
                .flat_map(|w| match ch {
                    0 => w.state.cgm_hist(),
                    1 => w.state.ins_hist(),
                    _ => w.state.cho_hist(),
                })
                .copied()
                .collect();
            s.mean[ch] = mean(&vals);
            s.std[ch] = sample_std(&vals).max(floor[ch]).max(1e-12);
        }
        Ok(s)
    }

    /// Oldest-first flattened sequence of standardized triples.
    pub fn sequence(&self, x: &PredictorState) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.cgm_hist().len() * INPUT_CHANNELS);
        for tri in x.sequence() {
            for ch in 0..INPUT_CHANNELS {
                out.push((tri[ch] - self.mean[ch]) / self.std[ch]);
            }
        }
        out
    }

    pub fn standardize(&self, ch: usize, v: f64) -> f64 {
        (v - self.mean[ch]) / self.std[ch]
    }

    pub fn destandardize(&self, ch: usize, z: f64) -> f64 {
        z * self.std[ch] + self.mean[ch]
    }
}

/// Trained `f_j`: network plus the input and output scalings.
#[derive(Debug, Clone, PartialEq)]
pub struct FtModel {
    pub j: usize,
    pub net: LstmNetwork,
    pub input_scaling: Standardizer,
    /// Mean and std of `y_{k+i} - y_k`, `i = 1..=j`.
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl FtModel {
    /// Predicted glucose `[ŷ_{k+1}, .., ŷ_{k+j}]`.
    pub fn predict(&self, x: &PredictorState) -> Result<Vec<f64>> {
        let out = self.net.forward(&self.input_scaling.sequence(x))?;
        Ok(self.decode(x.current_cgm(), &out))
    }

    fn decode(&self, y_k: f64, out: &[f64]) -> Vec<f64> {
        out.iter()
            .zip(self.target_mean.iter().zip(&self.target_std))
            .map(|(o, (m, s))| y_k + m + s * o)
            .collect()
    }
}

/// The `T` free-response networks stacked into `F_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FtBank {
    pub horizon: usize,
    pub models: Vec<FtModel>,
}

impl FtBank {
    pub fn new(models: Vec<FtModel>) -> Result<Self> {
        let horizon = models.len();
        if horizon == 0 {
            return Err(Error::InvalidArgument("free-response bank is empty".into()));
        }
        for (idx, m) in models.iter().enumerate() {
            if m.j != idx + 1 || m.net.output_size() != m.j {
                return Err(Error::InvalidArgument(format!(
                    "model {idx} is not f_{}",
                    idx + 1
                )));
            }
        }
        Ok(FtBank { horizon, models })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = TensorFile::new(FT_FORMAT);
        f.set_meta("horizon", self.horizon);
        f.set_meta("hidden_size", self.models[0].net.hidden_size());
        f.set_meta("input_size", self.models[0].net.input_size());
        for m in &self.models {
            let p = format!("f{}.", m.j);
            m.net.to_tensors(&mut f, &p)?;
            f.push(
                &format!("{p}input_mean"),
                &[INPUT_CHANNELS],
                m.input_scaling.mean.to_vec(),
            )?;
            f.push(
                &format!("{p}input_std"),
                &[INPUT_CHANNELS],
                m.input_scaling.std.to_vec(),
            )?;
            f.push(&format!("{p}target_mean"), &[m.j], m.target_mean.clone())?;
            f.push(&format!("{p}target_std"), &[m.j], m.target_std.clone())?;
        }
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::load(path, FT_FORMAT)?;
        let horizon = f.meta_usize("horizon")?;
        let hidden = f.meta_usize("hidden_size")?;
        let input = f.meta_usize("input_size")?;
        let mut models = Vec::with_capacity(horizon);
        for j in 1..=horizon {
            let p = format!("f{j}.");
            let arr = |name: &str| -> Result<[f64; INPUT_CHANNELS]> {
                let v = f.take(&format!("{p}{name}"), &[INPUT_CHANNELS])?;
                Ok([v[0], v[1], v[2]])
            };
            models.push(FtModel {
                j,
                net: LstmNetwork::from_tensors(&f, &p, input, hidden, j)?,
                input_scaling: Standardizer {
                    mean: arr("input_mean")?,
                    std: arr("input_std")?,
                },
                target_mean: f.take(&format!("{p}target_mean"), &[j])?,
                target_std: f.take(&format!("{p}target_std"), &[j])?,
            });
        }
        FtBank::new(models)
    }
}

impl FreeResponse for FtBank {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn free_response(&self, x: &PredictorState) -> Result<Vec<f64>> {
        if history_len(x.horizon()) != history_len(self.horizon) {
            return Err(Error::DimensionMismatch {
                context: "predictor state horizon",
                expected: self.horizon,
                actual: x.horizon(),
            });
        }
        self.models
            .iter()
            .map(|m| select_multi_step_sample(&m.predict(x)?, m.j))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Candidate batch sizes for forward-chaining selection.
    pub batch_sizes: Vec<usize>,
    pub max_epochs: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub early_stop_patience: usize,
    pub hidden_size: usize,
    /// Keep every `window_stride`-th window.
    pub window_stride: usize,
    /// Tail fraction of each subject's windows held out for early stopping
    /// when training the deployed model.
    pub holdout_fraction: f64,
    pub input_std_floor: [f64; INPUT_CHANNELS],
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            batch_sizes: vec![64, 128, 256],
            max_epochs: 300,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            early_stop_patience: 20,
            hidden_size: 32,
            window_stride: 1,
            holdout_fraction: 0.2,
            // insulin floor ~ one meal bolus
            input_std_floor: [1.0, 4.0, 1.0],
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 || self.batch_sizes.contains(&0) {
            return bad("batch sizes must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || self.rmsprop_epsilon <= 0.0 {
            return bad("rmsprop_decay must lie in [0, 1) and rmsprop_epsilon be > 0");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be >= 1");
        }
        if self.hidden_size == 0 || self.window_stride == 0 {
            return bad("hidden_size and window_stride must be >= 1");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if self.input_std_floor.iter().any(|v| !(*v >= 0.0)) {
            return bad("input_std_floor entries must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFt {
    pub model: FtModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Inputs and standardized targets for one `j`, laid out contiguously.
struct Prepared {
    steps_len: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    anchors: Vec<f64>,
    last_truth: Vec<f64>,
}

impl Prepared {
    fn new(
        windows: &[&Window],
        j: usize,
        scaling: &Standardizer,
        t_mean: &[f64],
        t_std: &[f64],
    ) -> Self {
        let steps_len = windows
            .first()
            .map_or(0, |w| w.state.cgm_hist().len() * INPUT_CHANNELS);
        let mut p = Prepared {
            steps_len,
            inputs: Vec::with_capacity(windows.len() * steps_len),
            targets: Vec::with_capacity(windows.len() * j),
            anchors: Vec::with_capacity(windows.len()),
            last_truth: Vec::with_capacity(windows.len()),
        };
        for w in windows {
            p.inputs.extend(scaling.sequence(&w.state));
            let yk = w.state.current_cgm();
            for i in 0..j {
                p.targets
                    .push((w.future_outputs[i] - yk - t_mean[i]) / t_std[i]);
            }
            p.anchors.push(yk);
            p.last_truth.push(w.future_outputs[j - 1]);
        }
        p
    }

    fn len(&self) -> usize {
        self.anchors.len()
    }

    fn input(&self, n: usize) -> &[f64] {
        &self.inputs[n * self.steps_len..(n + 1) * self.steps_len]
    }
}

fn target_stats(windows: &[&Window], j: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = Vec::with_capacity(j);
    let mut s = Vec::with_capacity(j);
    for i in 0..j {
        let d: Vec<f64> = windows
            .iter()
            .map(|w| w.future_outputs[i] - w.state.current_cgm())
            .collect();
        m.push(mean(&d));
        s.push(sample_std(&d).max(1.0));
    }
    (m, s)
}

/// MAE in mg/dL of the `j`-th predicted sample.
fn evaluate(model: &FtModel, data: &Prepared, tape: &mut Tape) -> Result<f64> {
    let j = model.j;
    let mut acc = 0.0;
    for n in 0..data.len() {
        model.net.forward_tape(data.input(n), tape)?;
        let y =
            data.anchors[n] + model.target_mean[j - 1] + model.target_std[j - 1] * tape.out[j - 1];
        acc += (y - data.last_truth[n]).abs();
    }
    Ok(acc / data.len() as f64)
}

fn strided(windows: &[Window], stride: usize) -> impl Iterator<Item = &Window> {
    windows.iter().step_by(stride)
}

/// Train `f_j` with an L1 loss and RMSProp. The returned weights are those of
/// the epoch with the lowest validation MAE (training MAE when `val` is
/// empty).
pub fn train_ft(
    train: &[&Window],
    val: &[&Window],
    j: usize,
    cfg: &TrainingConfig,
) -> Result<TrainedFt> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let horizon = train[0].future_outputs.len();
    if j == 0 || j > horizon {
        return Err(Error::InvalidArgument(format!(
            "step j={j} outside 1..={horizon}"
        )));
    }
    let scaling = Standardizer::fit(train, cfg.input_std_floor)?;
    let (t_mean, t_std) = target_stats(train, j);
    let tr = Prepared::new(train, j, &scaling, &t_mean, &t_std);
    let va = if val.is_empty() {
        None
    } else {
        Some(Prepared::new(val, j, &scaling, &t_mean, &t_std))
    };

    let seed = crate::util::derive_seed(cfg.seed, &[j as u64]);
    let mut model = FtModel {
        j,
        net: LstmNetwork::init(INPUT_CHANNELS, cfg.hidden_size, j, seed)?,
        input_scaling: scaling,
        target_mean: t_mean,
        target_std: t_std,
    };
    let np = model.net.num_params();
    let mut grad = vec![0.0; np];
    let mut sq = vec![0.0; np];
    let mut tape = Tape::default();
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut best = (f64::INFINITY, 0usize, model.net.params.clone());
    let mut log = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_from(seed, &[0xe90c, epoch as u64]);
        order.shuffle(&mut rng);
        let mut train_abs = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (batch.len() * j) as f64;
            let mut d_out = vec![0.0; j];
            for &n in batch {
                model.net.forward_tape(tr.input(n), &mut tape)?;
                let tgt = &tr.targets[n * j..(n + 1) * j];
                for i in 0..j {
                    let e = tape.out[i] - tgt[i];
                    d_out[i] = if e > 0.0 {
                        scale
                    } else if e < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                }
                train_abs += (tape.out[j - 1] - tgt[j - 1]).abs() * model.target_std[j - 1];
                model.net.backward(&tape, &d_out, &mut grad)?;
            }
            let (rho, eps, lr) = (cfg.rmsprop_decay, cfg.rmsprop_epsilon, cfg.learning_rate);
            for ((p, g), s) in model.net.params.iter_mut().zip(&grad).zip(sq.iter_mut()) {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            }
        }
        let train_mae = train_abs / tr.len() as f64;
        if !train_mae.is_finite() || model.net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: train_mae,
            });
        }
        let val_mae = match &va {
            Some(v) => evaluate(&model, v, &mut tape)?,
            None => train_mae,
        };
        log.push(EpochLog {
            epoch,
            train_mae,
            val_mae,
        });
        log::debug!("f_{j} epoch {epoch}: train {train_mae:.4} val {val_mae:.4}");
        if val_mae < best.0 {
            best = (val_mae, epoch, model.net.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    model.net.params = best.2;
    Ok(TrainedFt {
        model,
        log,
        best_epoch: best.1,
    })
}

/// Split each subject's windows into a training head and a held-out tail,
/// dropping the windows whose spans straddle the cut.
pub fn holdout_split<'a>(
    subjects: &'a [Vec<Window>],
    cfg: &TrainingConfig,
) -> (Vec<&'a Window>, Vec<&'a Window>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ws in subjects {
        let n = ws.len();
        let n_val = (n as f64 * cfg.holdout_fraction).round() as usize;
        if n_val == 0 {
            train.extend(strided(ws, cfg.window_stride));
            continue;
        }
        let gap = ws.first().map_or(0, |w| {
            history_len(w.state.horizon()) + w.future_outputs.len()
        });
        let cut = n - n_val;
        let head_end = cut.saturating_sub(gap);
        train.extend(strided(&ws[..head_end], cfg.window_stride));
        val.extend(strided(&ws[cut..], cfg.window_stride));
    }
    (train, val)
}

/// Deployed `f_j`: all subjects, early stopping on each subject's tail.
pub fn train_final(subjects: &[Vec<Window>], j: usize, cfg: &TrainingConfig) -> Result<TrainedFt> {
    let (train, val) = holdout_split(subjects, cfg);
    train_ft(&train, &val, j, cfg)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    /// Number of leading subjects used for training.
    pub train_subjects: usize,
    pub val_mae: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Forward chaining across subjects in order: fold `k` trains on subjects
/// `1..=k` and validates on subject `k + 1`.
pub fn forward_chain_validate(
    subjects: &[Vec<Window>],
    j: usize,
    cfg: &TrainingConfig,
) -> Result<Vec<FoldResult>> {
    if subjects.len() < 2 {
        return Err(Error::InsufficientData(
            "forward chaining needs at least two subjects".into(),
        ));
    }
    let mut folds = Vec::with_capacity(subjects.len() - 1);
    for k in 1..subjects.len() {
        let train: Vec<&Window> = subjects[..k]
            .iter()
            .flat_map(|ws| strided(ws, cfg.window_stride))
            .collect();
        let val: Vec<&Window> = strided(&subjects[k], cfg.window_stride).collect();
        let r = train_ft(&train, &val, j, cfg)?;
        folds.push(FoldResult {
            train_subjects: k,
            val_mae: r.log[r.best_epoch - 1].val_mae,
            best_epoch: r.best_epoch,
            log: r.log,
        });
    }
    Ok(folds)
}

/// Pick the batch size with the lowest mean forward-chaining validation MAE.
pub fn select_batch_size(
    subjects: &[Vec<Window>],
    j: usize,
    cfg: &TrainingConfig,
) -> Result<(usize, Vec<(usize, Vec<FoldResult>)>)> {
    let mut all = Vec::new();
    let mut best = (f64::INFINITY, cfg.batch_size);
    for &b in &cfg.batch_sizes {
        let c = TrainingConfig {
            batch_size: b,
            ..cfg.clone()
        };
        let folds = forward_chain_validate(subjects, j, &c)?;
        let m = mean(&folds.iter().map(|f| f.val_mae).collect::<Vec<_>>());
        if m < best.0 {
            best = (m, b);
        }
        all.push((b, folds));
    }
    Ok((best.1, all))
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mae", "val_mae"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.train_mae),
            format!("{:.6}", e.val_mae),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience for callers holding a shared bank.
pub fn shared(bank: FtBank) -> Arc<dyn FreeResponse> {
    Arc::new(bank)
}
