//! Continuous-time recurrent dynamics with learnable time constants, trained
//! by differentiating through a fixed RK4 unroll.
//!
//! The latent state follows
//! `dh/dt = (-h + W_h tanh(h) + W_x x + b) / tau_c` with `tau_c = exp(log_tau_c)`,
//! and each sample is read out as `softmax(W_out h + b_out)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{softmax_scaled, EmotionVector, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::odecore::{dopri5_solve, rk4_step, FnField, SolverConfig};
use crate::seed::component_rng;

/// Cyclic encodings (6), delay and affective magnitude.
pub const NUM_FEATURES: usize = 8;

pub const BLOCK_NAMES: [&str; 6] = ["W_h", "W_x", "b", "log_tau_c", "W_out", "b_out"];

/// All trainable tensors, matrices stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub d: usize,
    pub k: usize,
    /// d x d
    pub w_h: Vec<f64>,
    /// d x k
    pub w_x: Vec<f64>,
    pub b: Vec<f64>,
    pub log_tau_c: Vec<f64>,
    /// 6 x d
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = DynamicsParams;

impl DynamicsParams {
    pub fn zeros(d: usize, k: usize) -> Self {
        DynamicsParams {
            d,
            k,
            w_h: vec![0.0; d * d],
            w_x: vec![0.0; d * k],
            b: vec![0.0; d],
            log_tau_c: vec![0.0; d],
            w_out: vec![0.0; NUM_EMOTIONS * d],
            b_out: vec![0.0; NUM_EMOTIONS],
        }
    }

    /// Uniform fan-in initialisation; biases zero, time constants one.
    pub fn init(d: usize, k: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "affectmodel.init");
        let mut p = Self::zeros(d, k);
        let sh = 1.0 / (d as f64).sqrt();
        let sx = 1.0 / (k.max(1) as f64).sqrt();
        p.w_h.iter_mut().for_each(|w| *w = rng.random_range(-sh..sh));
        p.w_x.iter_mut().for_each(|w| *w = rng.random_range(-sx..sx));
        p.w_out.iter_mut().for_each(|w| *w = rng.random_range(-sh..sh));
        p
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 6] {
        [
            (BLOCK_NAMES[0], &self.w_h),
            (BLOCK_NAMES[1], &self.w_x),
            (BLOCK_NAMES[2], &self.b),
            (BLOCK_NAMES[3], &self.log_tau_c),
            (BLOCK_NAMES[4], &self.w_out),
            (BLOCK_NAMES[5], &self.b_out),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w_h,
            &mut self.w_x,
            &mut self.b,
            &mut self.log_tau_c,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn tau_c(&self) -> Vec<f64> {
        self.log_tau_c.iter().map(|l| l.exp()).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = (self.d, self.k);
        if d == 0 {
            return Err(Error::domain("latent dimension must be positive"));
        }
        let expected = [d * d, d * k, d, d, NUM_EMOTIONS * d, NUM_EMOTIONS];
        for ((name, block), want) in self.blocks().iter().zip(expected) {
            if block.len() != want {
                return Err(Error::domain(format!(
                    "{name} has {} entries, expected {want}",
                    block.len()
                )));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("{name} contains non-finite entries")));
            }
        }
        Ok(())
    }

    fn check_finite_gradient(&self) -> Result<()> {
        for (name, block) in self.blocks() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub features: Vec<f64>,
    pub target: EmotionVector,
}

fn field_into(p: &DynamicsParams, h: &[f64], x: &[f64], out: &mut [f64]) {
    let (d, k) = (p.d, p.k);
    let th: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
    for i in 0..d {
        let mut acc = -h[i] + p.b[i];
        let row = &p.w_h[i * d..(i + 1) * d];
        for j in 0..d {
            acc += row[j] * th[j];
        }
        let row = &p.w_x[i * k..(i + 1) * k];
        for j in 0..k {
            acc += row[j] * x[j];
        }
        out[i] = acc / p.log_tau_c[i].exp();
    }
}

/// Evaluates `dh/dt` for the given state and held features.
pub fn dynamics(p: &DynamicsParams, t: f64, h: &[f64], features: &[f64]) -> Result<Vec<f64>> {
    if h.len() != p.d || features.len() != p.k {
        return Err(Error::domain(format!(
            "state/features have {}/{} entries, model expects {}/{}",
            h.len(),
            features.len(),
            p.d,
            p.k
        )));
    }
    let mut out = vec![0.0; p.d];
    field_into(p, h, features, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericBlowup { t });
    }
    Ok(out)
}

fn logits(p: &DynamicsParams, h: &[f64]) -> Vec<f64> {
    (0..NUM_EMOTIONS)
        .map(|j| {
            let row = &p.w_out[j * p.d..(j + 1) * p.d];
            p.b_out[j] + row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

pub fn readout(p: &DynamicsParams, h: &[f64]) -> EmotionVector {
    let y = softmax_scaled(&logits(p, h), 1.0);
    let mut out = [0.0; NUM_EMOTIONS];
    out.copy_from_slice(&y);
    EmotionVector(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    /// RK4 steps on the sample grid (the training discretisation).
    #[default]
    Fixed,
    /// Error-controlled Dormand-Prince between samples.
    Adaptive,
}

impl std::str::FromStr for SolveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SolveMode::Fixed),
            "adaptive" => Ok(SolveMode::Adaptive),
            other => Err(Error::domain(format!("unknown mode `{other}` (fixed|adaptive)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationOptions {
    pub solver: SolverConfig,
    /// Upper bound on a fixed RK4 step; `None` takes one step per interval.
    pub max_substep: Option<f64>,
}

impl IntegrationOptions {
    fn substeps(&self, dt: f64) -> usize {
        match self.max_substep {
            Some(m) if m > 0.0 => ((dt / m).ceil() as usize).max(1),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub predictions: Vec<EmotionVector>,
    pub states: Vec<Vec<f64>>,
    pub nfe: usize,
}

fn check_samples(p: &DynamicsParams, samples: &[TrajectorySample], h_init: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::domain("trajectory needs at least one sample"));
    }
    if h_init.len() != p.d {
        return Err(Error::domain(format!(
            "initial state has {} entries, model expects {}",
            h_init.len(),
            p.d
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != p.k {
            return Err(Error::domain(format!(
                "sample {i} has {} features, model expects {}",
                s.features.len(),
                p.k
            )));
        }
        if !s.t.is_finite() || s.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("sample {i} is not finite")));
        }
        if i > 0 && !(s.t > samples[i - 1].t) {
            return Err(Error::domain(format!("sample times must increase (sample {i})")));
        }
    }
    Ok(())
}

/// Integrates the latent state through the samples, holding each sample's
/// features over the following interval, and reads out at every sample time.
pub fn forward_trajectory(
    p: &DynamicsParams,
    samples: &[TrajectorySample],
    mode: SolveMode,
    h_init: &[f64],
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    check_samples(p, samples, h_init)?;
    let mut h = h_init.to_vec();
    let mut nfe = 0;
    let mut states = vec![h.clone()];
    for w in samples.windows(2) {
        let x = &w[0].features;
        let field = FnField::new(p.d, |_, h: &[f64], out: &mut [f64]| field_into(p, h, x, out));
        let dt = w[1].t - w[0].t;
        match mode {
            SolveMode::Fixed => {
                let n = opts.substeps(dt);
                let step = dt / n as f64;
                for s in 0..n {
                    h = rk4_step(&field, w[0].t + s as f64 * step, &h, step)?;
                }
                nfe += 4 * n;
            }
            SolveMode::Adaptive => {
                let sol = dopri5_solve(&field, w[0].t, w[1].t, &h, &opts.solver, None)?;
                h = sol.last_state().to_vec();
                nfe += sol.n_fev;
            }
        }
        states.push(h.clone());
    }
    let predictions = states.iter().map(|h| readout(p, h)).collect();
    Ok(Trajectory {
        predictions,
        states,
        nfe,
    })
}

/// One explicit Euler update per interval.
pub fn discrete_baseline(p: &DynamicsParams, samples: &[TrajectorySample], h_init: &[f64]) -> Result<Trajectory> {
    check_samples(p, samples, h_init)?;
    let mut h = h_init.to_vec();
    let mut states = vec![h.clone()];
    let mut slope = vec![0.0; p.d];
    for w in samples.windows(2) {
        field_into(p, &h, &w[0].features, &mut slope);
        let dt = w[1].t - w[0].t;
        for (v, s) in h.iter_mut().zip(&slope) {
            *v += dt * s;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericBlowup { t: w[1].t });
        }
        states.push(h.clone());
    }
    let nfe = samples.len() - 1;
    let predictions = states.iter().map(|h| readout(p, h)).collect();
    Ok(Trajectory {
        predictions,
        states,
        nfe,
    })
}

/// Mean squared error over samples and the six components.
pub fn loss(predictions: &[EmotionVector], targets: &[EmotionVector]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::domain("loss of an empty trajectory"));
    }
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .flat_map(|(p, t)| p.0.iter().zip(&t.0).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    Ok(sse / (predictions.len() * NUM_EMOTIONS) as f64)
}

/// Pulls the cotangent `g` of `f(h)` back to `h`, accumulating parameter
/// cotangents into `grads`.
fn field_vjp(p: &DynamicsParams, h: &[f64], x: &[f64], g: &[f64], grads: &mut Gradients) -> Vec<f64> {
    let (d, k) = (p.d, p.k);
    let th: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
    let mut f = vec![0.0; d];
    field_into(p, h, x, &mut f);
    let gp: Vec<f64> = (0..d).map(|i| g[i] / p.log_tau_c[i].exp()).collect();
    let mut dh: Vec<f64> = gp.iter().map(|v| -v).collect();
    for i in 0..d {
        for j in 0..d {
            dh[j] += gp[i] * p.w_h[i * d + j] * (1.0 - th[j] * th[j]);
            grads.w_h[i * d + j] += gp[i] * th[j];
        }
        for j in 0..k {
            grads.w_x[i * k + j] += gp[i] * x[j];
        }
        grads.b[i] += gp[i];
        grads.log_tau_c[i] -= g[i] * f[i];
    }
    dh
}

fn rk4_vjp(p: &DynamicsParams, h: &[f64], x: &[f64], dt: f64, gbar: &[f64], grads: &mut Gradients) -> Vec<f64> {
    let d = p.d;
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    field_into(p, h, x, &mut k1);
    let h2: Vec<f64> = (0..d).map(|i| h[i] + 0.5 * dt * k1[i]).collect();
    field_into(p, &h2, x, &mut k2);
    let h3: Vec<f64> = (0..d).map(|i| h[i] + 0.5 * dt * k2[i]).collect();
    field_into(p, &h3, x, &mut k3);
    let h4: Vec<f64> = (0..d).map(|i| h[i] + dt * k3[i]).collect();

    let mut hbar = gbar.to_vec();
    let mut kb1: Vec<f64> = gbar.iter().map(|g| dt / 6.0 * g).collect();
    let mut kb2: Vec<f64> = gbar.iter().map(|g| dt / 3.0 * g).collect();
    let mut kb3 = kb2.clone();
    let kb4 = kb1.clone();

    let d4 = field_vjp(p, &h4, x, &kb4, grads);
    for i in 0..d {
        hbar[i] += d4[i];
        kb3[i] += dt * d4[i];
    }
    let d3 = field_vjp(p, &h3, x, &kb3, grads);
    for i in 0..d {
        hbar[i] += d3[i];
        kb2[i] += 0.5 * dt * d3[i];
    }
    let d2 = field_vjp(p, &h2, x, &kb2, grads);
    for i in 0..d {
        hbar[i] += d2[i];
        kb1[i] += 0.5 * dt * d2[i];
    }
    let d1 = field_vjp(p, h, x, &kb1, grads);
    for i in 0..d {
        hbar[i] += d1[i];
    }
    hbar
}

/// Forward RK4 unroll plus reverse sweep for one segment. The loss terms
/// are weighted by `scale`; returns the unscaled squared-error sum.
fn accumulate_segment(
    p: &DynamicsParams,
    samples: &[TrajectorySample],
    h_init: &[f64],
    opts: &IntegrationOptions,
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    check_samples(p, samples, h_init)?;
    let d = p.d;
    let mut states = vec![h_init.to_vec()];
    // (substep starts, substep length) per interval
    let mut tape: Vec<(Vec<Vec<f64>>, f64)> = Vec::with_capacity(samples.len().saturating_sub(1));
    let mut h = h_init.to_vec();
    for w in samples.windows(2) {
        let x = &w[0].features;
        let field = FnField::new(d, |_, h: &[f64], out: &mut [f64]| field_into(p, h, x, out));
        let dt = w[1].t - w[0].t;
        let n = opts.substeps(dt);
        let step = dt / n as f64;
        let mut starts = Vec::with_capacity(n);
        for s in 0..n {
            starts.push(h.clone());
            h = rk4_step(&field, w[0].t + s as f64 * step, &h, step)?;
        }
        tape.push((starts, step));
        states.push(h.clone());
    }

    let mut sse = 0.0;
    let mut hbar = vec![0.0; d];
    for n in (0..samples.len()).rev() {
        let y = readout(p, &states[n]);
        let target = &samples[n].target.0;
        let gy: Vec<f64> = (0..NUM_EMOTIONS)
            .map(|j| {
                let r = y.0[j] - target[j];
                sse += r * r;
                2.0 * scale * r
            })
            .collect();
        let dot: f64 = gy.iter().zip(&y.0).map(|(a, b)| a * b).sum();
        for j in 0..NUM_EMOTIONS {
            let dz = y.0[j] * (gy[j] - dot);
            for i in 0..d {
                grads.w_out[j * d + i] += dz * states[n][i];
                hbar[i] += p.w_out[j * d + i] * dz;
            }
            grads.b_out[j] += dz;
        }
        if n > 0 {
            let x = &samples[n - 1].features;
            let (starts, step) = &tape[n - 1];
            for start in starts.iter().rev() {
                hbar = rk4_vjp(p, start, x, *step, &hbar, grads);
            }
        }
    }
    Ok(sse)
}

/// Loss and exact gradients of the fixed-RK4 objective for one segment
/// started from `h_init`.
pub fn backward(
    p: &DynamicsParams,
    samples: &[TrajectorySample],
    h_init: &[f64],
    opts: &IntegrationOptions,
) -> Result<(f64, Gradients)> {
    let mut grads = DynamicsParams::zeros(p.d, p.k);
    let scale = 1.0 / (samples.len() * NUM_EMOTIONS) as f64;
    let sse = accumulate_segment(p, samples, h_init, opts, scale, &mut grads)?;
    grads.check_finite_gradient()?;
    Ok((sse * scale, grads))
}

/// Pooled loss and gradients over several segments, each started from the
/// zero state. Accumulates in the order given.
pub fn batch_gradient(
    p: &DynamicsParams,
    segments: &[&[TrajectorySample]],
    opts: &IntegrationOptions,
) -> Result<(f64, Gradients)> {
    let total: usize = segments.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(Error::domain("empty batch"));
    }
    let scale = 1.0 / (total * NUM_EMOTIONS) as f64;
    let h0 = vec![0.0; p.d];
    let mut grads = DynamicsParams::zeros(p.d, p.k);
    let mut sse = 0.0;
    for seg in segments {
        sse += accumulate_segment(p, seg, &h0, opts, scale, &mut grads)?;
    }
    grads.check_finite_gradient()?;
    Ok((sse * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d: usize,
    pub lr: f64,
    pub batch_segments: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub patience_window: usize,
    pub stop_eps: f64,
    /// Append the previous sample's emotion vector to the inputs.
    pub lagged_emotions: bool,
    pub integration: IntegrationOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 16,
            lr: 1e-2,
            batch_segments: 8,
            max_steps: 5000,
            seed: 0,
            patience_window: 5,
            stop_eps: 1e-2,
            lagged_emotions: false,
            integration: IntegrationOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if self.d == 0 || self.batch_segments == 0 || self.max_steps == 0 || self.patience_window == 0 {
            return Err(Error::domain("d, batch_segments, max_steps and patience_window must be positive"));
        }
        if !(self.stop_eps >= 0.0) {
            return Err(Error::domain("stop_eps must be non-negative"));
        }
        self.integration.solver.validate()
    }

    /// Input width implied by the feature options.
    pub fn num_inputs(&self) -> usize {
        NUM_FEATURES + if self.lagged_emotions { NUM_EMOTIONS } else { 0 }
    }
}

/// True once every loss at steps `T - window ..= T` (the latest step `T`
/// and the `window` before it) sits within `eps` of the minimum seen so far.
pub fn early_stop(history: &[f64], window: usize, eps: f64) -> bool {
    if history.len() <= window {
        return false;
    }
    let min = history.iter().copied().fold(f64::INFINITY, f64::min);
    history[history.len() - window - 1..]
        .iter()
        .all(|l| (l - min).abs() <= eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: DynamicsParams,
    pub adam: AdamState,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub stop: StopReason,
}

/// Segment indices used at `step`: epoch-wise seeded permutations cut into
/// consecutive batches, each batch sorted.
pub fn batch_for_step(n_segments: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n_segments.div_ceil(batch);
    let epoch = step / per_epoch;
    let chunk = step % per_epoch;
    let mut order: Vec<usize> = (0..n_segments).collect();
    order.shuffle(&mut component_rng(seed, &format!("affectmodel.shuffle.{epoch}")));
    let mut picked = order[chunk * batch..((chunk + 1) * batch).min(n_segments)].to_vec();
    picked.sort_unstable();
    picked
}

pub fn train(dataset: &[Vec<TrajectorySample>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_resume(dataset, cfg, None)
}

/// Runs Adam until the stopping rule fires or the history holds
/// `max_steps` losses. A resumed state keeps its history and moments.
pub fn train_resume(
    dataset: &[Vec<TrajectorySample>],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("training dataset is empty"));
    }
    let k = dataset[0].first().map_or(0, |s| s.features.len());
    let mut state = match resume {
        Some(s) => {
            s.params.validate()?;
            if s.adam.m.len() != s.params.num_params() || s.adam.v.len() != s.params.num_params() {
                return Err(Error::domain("optimizer state does not match the parameters"));
            }
            s
        }
        None => {
            let params = DynamicsParams::init(cfg.d, k, cfg.seed);
            let adam = AdamState::new(params.num_params());
            TrainState {
                params,
                adam,
                history: Vec::new(),
            }
        }
    };
    let h0 = vec![0.0; state.params.d];
    for seg in dataset {
        check_samples(&state.params, seg, &h0)?;
    }

    while state.history.len() < cfg.max_steps {
        if early_stop(&state.history, cfg.patience_window, cfg.stop_eps) {
            break;
        }
        let step = state.history.len();
        let picked = batch_for_step(dataset.len(), cfg.batch_segments, cfg.seed, step);
        let batch: Vec<&[TrajectorySample]> = picked.iter().map(|&i| dataset[i].as_slice()).collect();
        let (l, grads) = batch_gradient(&state.params, &batch, &cfg.integration)?;
        if !l.is_finite() {
            return Err(Error::Divergence { step, loss: l });
        }
        state.history.push(l);
        log::debug!("step {step}: loss {l:.6e}");
        if early_stop(&state.history, cfg.patience_window, cfg.stop_eps) {
            break;
        }
        let mut flat = state.params.to_flat();
        state.adam.step(&mut flat, &grads.to_flat(), cfg.lr);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, loss: l });
        }
        state.params.set_flat(&flat);
    }
    let stop = if early_stop(&state.history, cfg.patience_window, cfg.stop_eps) {
        StopReason::EarlyStop
    } else {
        StopReason::MaxSteps
    };
    Ok(TrainOutcome { state, stop })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    /// Seconds per model time unit.
    pub time_scale: f64,
    pub config: TrainConfig,
    pub params: DynamicsParams,
    pub adam: Option<AdamState>,
    pub history: Vec<f64>,
    pub stop: Option<StopReason>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, cfg: &TrainConfig, time_scale: f64) -> Self {
        let p = &outcome.state.params;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            d: p.d,
            k: p.k,
            seed: cfg.seed,
            time_scale,
            config: cfg.clone(),
            params: p.clone(),
            adam: Some(outcome.state.adam.clone()),
            history: outcome.state.history.clone(),
            stop: Some(outcome.stop),
        }
    }

    pub fn resume_state(&self) -> TrainState {
        TrainState {
            params: self.params.clone(),
            adam: self
                .adam
                .clone()
                .unwrap_or_else(|| AdamState::new(self.params.num_params())),
            history: self.history.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.params.validate()?;
        if ck.params.d != ck.d || ck.params.k != ck.k {
            return Err(Error::Schema("checkpoint header disagrees with parameter shapes".into()));
        }
        if !(ck.time_scale > 0.0) {
            return Err(Error::Schema("checkpoint time_scale must be positive".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_samples(k: usize, n: usize, seed: u64) -> Vec<TrajectorySample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0.0;
        (0..n)
            .map(|_| {
                t += rng.random_range(0.3..1.2);
                let features = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let raw: Vec<f64> = (0..NUM_EMOTIONS).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut target = [0.0; NUM_EMOTIONS];
                for j in 0..NUM_EMOTIONS {
                    target[j] = raw[j] / s;
                }
                TrajectorySample {
                    t,
                    features,
                    target: EmotionVector(target),
                }
            })
            .collect()
    }

    fn random_params(d: usize, k: usize, seed: u64) -> DynamicsParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DynamicsParams::init(d, k, seed);
        p.b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p.log_tau_c.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p.b_out.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p
    }

    #[test]
    fn dynamics_examples() {
        let mut p = DynamicsParams::zeros(3, 2);
        let h = [0.5, -1.0, 2.0];
        assert_eq!(dynamics(&p, 0.0, &h, &[0.3, 0.1]).unwrap(), [-0.5, 1.0, -2.0]);
        assert_eq!(dynamics(&p, 0.0, &[0.0; 3], &[0.0; 2]).unwrap(), [0.0; 3]);

        p.w_h.iter_mut().enumerate().for_each(|(i, w)| *w = 0.1 * i as f64);
        p.w_x.iter_mut().enumerate().for_each(|(i, w)| *w = -0.2 * i as f64);
        let base = dynamics(&p, 0.0, &h, &[0.3, 0.1]).unwrap();
        assert_eq!(std::f64::consts::LN_2.exp(), 2.0);
        p.log_tau_c = vec![std::f64::consts::LN_2; 3];
        let halved = dynamics(&p, 0.0, &h, &[0.3, 0.1]).unwrap();
        for (a, b) in base.iter().zip(&halved) {
            assert_eq!(a / 2.0, *b);
        }
        assert!(dynamics(&p, 0.0, &h[..2], &[0.3, 0.1]).is_err());
    }

    #[test]
    fn readout_examples() {
        let mut p = DynamicsParams::zeros(4, 1);
        assert_eq!(readout(&p, &[1.0, 2.0, 3.0, 4.0]), EmotionVector::uniform());
        let p2 = random_params(4, 1, 3);
        let h = [0.2, -0.4, 0.9, 0.1];
        let base = readout(&p2, &h);
        let mut shifted = p2.clone();
        shifted.b_out.iter_mut().for_each(|b| *b += 3.5);
        let moved = readout(&shifted, &h);
        for j in 0..NUM_EMOTIONS {
            assert!((base.0[j] - moved.0[j]).abs() < 1e-15);
        }
        let z = logits(&p2, &h);
        assert_eq!(base.argmax(), crate::annotate::argmax(&z));
        p.b_out[2] = 1.0;
        assert_eq!(readout(&p, &h).argmax(), 2);
    }

    #[test]
    fn single_sample_has_no_integration() {
        let p = random_params(4, 2, 1);
        let s = toy_samples(2, 1, 1);
        let h0 = vec![0.1, 0.2, 0.3, 0.4];
        for mode in [SolveMode::Fixed, SolveMode::Adaptive] {
            let tr = forward_trajectory(&p, &s, mode, &h0, &IntegrationOptions::default()).unwrap();
            assert_eq!(tr.nfe, 0);
            assert_eq!(tr.predictions, vec![readout(&p, &h0)]);
        }
    }

    #[test]
    fn zero_dynamics_give_constant_output() {
        let mut p = DynamicsParams::zeros(3, 2);
        p.w_out.iter_mut().enumerate().for_each(|(i, w)| *w = 0.1 * i as f64);
        let s = toy_samples(2, 6, 2);
        let h0 = vec![0.0; 3];
        for tr in [
            forward_trajectory(&p, &s, SolveMode::Fixed, &h0, &IntegrationOptions::default()).unwrap(),
            forward_trajectory(&p, &s, SolveMode::Adaptive, &h0, &IntegrationOptions::default()).unwrap(),
            discrete_baseline(&p, &s, &h0).unwrap(),
        ] {
            assert!(tr.predictions.iter().all(|y| *y == tr.predictions[0]));
        }
    }

    #[test]
    fn adaptive_matches_analytic_decay() {
        let mut p = DynamicsParams::zeros(3, 1);
        p.log_tau_c = vec![0.0, 0.7, -0.4];
        let s = toy_samples(1, 8, 5);
        let h0 = vec![1.0, -2.0, 0.5];
        let opts = IntegrationOptions::default();
        let tr = forward_trajectory(&p, &s, SolveMode::Adaptive, &h0, &opts).unwrap();
        let tau = p.tau_c();
        for (n, h) in tr.states.iter().enumerate() {
            let dt = s[n].t - s[0].t;
            for i in 0..3 {
                let want = h0[i] * (-dt / tau[i]).exp();
                assert!((h[i] - want).abs() <= 10.0 * opts.solver.rtol * want.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn nfe_ordering() {
        let p = random_params(5, 3, 9);
        let s = toy_samples(3, 12, 9);
        let h0 = vec![0.0; 5];
        let opts = IntegrationOptions::default();
        let a = forward_trajectory(&p, &s, SolveMode::Adaptive, &h0, &opts).unwrap();
        let f = forward_trajectory(&p, &s, SolveMode::Fixed, &h0, &opts).unwrap();
        let e = discrete_baseline(&p, &s, &h0).unwrap();
        assert_eq!(f.nfe, 4 * 11);
        assert_eq!(e.nfe, 11);
        assert!(a.nfe >= f.nfe && f.nfe >= e.nfe);
    }

    #[test]
    fn euler_baseline_converges_to_rk4() {
        let p = random_params(4, 2, 11);
        let samples: Vec<TrajectorySample> = (0..1000)
            .map(|i| {
                let t = i as f64 * 1e-3;
                TrajectorySample {
                    t,
                    features: vec![(3.0 * t).sin(), (2.0 * t).cos()],
                    target: EmotionVector::uniform(),
                }
            })
            .collect();
        let h0 = vec![0.3, -0.2, 0.1, 0.0];
        let rk = forward_trajectory(&p, &samples, SolveMode::Fixed, &h0, &IntegrationOptions::default()).unwrap();
        let eu = discrete_baseline(&p, &samples, &h0).unwrap();
        for (a, b) in rk.predictions.iter().zip(&eu.predictions) {
            for j in 0..NUM_EMOTIONS {
                assert!((a.0[j] - b.0[j]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let a = vec![EmotionVector::one_hot(1), EmotionVector::uniform()];
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
        let shifted: Vec<EmotionVector> = a.iter().map(|e| EmotionVector(e.0.map(|v| v + 0.1))).collect();
        assert!((loss(&shifted, &a).unwrap() - 0.01).abs() < 1e-15);
        assert!(loss(&a, &a[..1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<EmotionVector> = (0..7).map(|_| EmotionVector(std::array::from_fn(|_| rng.random()))).collect();
        let t: Vec<EmotionVector> = (0..7).map(|_| EmotionVector(std::array::from_fn(|_| rng.random()))).collect();
        let mut oracle = 0.0;
        for j in 0..NUM_EMOTIONS {
            for n in 0..7 {
                oracle += (t[n].0[j] - p[n].0[j]).powi(2);
            }
        }
        assert!((loss(&p, &t).unwrap() - oracle / 42.0).abs() < 1e-12);
    }

    fn fd_gradient(p: &DynamicsParams, s: &[TrajectorySample], h0: &[f64], opts: &IntegrationOptions) -> Vec<f64> {
        let eps = 1e-5;
        let base = p.to_flat();
        let eval = |flat: &[f64]| {
            let mut q = p.clone();
            q.set_flat(flat);
            let tr = forward_trajectory(&q, s, SolveMode::Fixed, h0, opts).unwrap();
            let targets: Vec<EmotionVector> = s.iter().map(|x| x.target).collect();
            loss(&tr.predictions, &targets).unwrap()
        };
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i] += eps;
                minus[i] -= eps;
                (eval(&plus) - eval(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let opts = IntegrationOptions {
            max_substep: Some(0.4),
            ..Default::default()
        };
        for seed in 0..5 {
            let p = random_params(3, 2, seed);
            let s = toy_samples(2, 3, seed + 100);
            let h0 = vec![0.1, -0.3, 0.2];
            let (l, g) = backward(&p, &s, &h0, &opts).unwrap();
            let tr = forward_trajectory(&p, &s, SolveMode::Fixed, &h0, &opts).unwrap();
            let targets: Vec<EmotionVector> = s.iter().map(|x| x.target).collect();
            assert!((l - loss(&tr.predictions, &targets).unwrap()).abs() < 1e-15);
            let fd = fd_gradient(&p, &s, &h0, &opts);
            let an = g.to_flat();
            for (a, b) in an.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_parameters_force_zero_blocks() {
        let p = DynamicsParams::zeros(3, 2);
        let s = toy_samples(2, 4, 8);
        let (_, g) = backward(&p, &s, &[0.0; 3], &IntegrationOptions::default()).unwrap();
        assert!(g.w_h.iter().all(|v| *v == 0.0));
        assert!(g.w_out.iter().all(|v| *v == 0.0));
        assert!(g.log_tau_c.iter().all(|v| *v == 0.0));
        assert!(g.b_out.iter().any(|v| *v != 0.0));

        let uniform: Vec<TrajectorySample> = s
            .iter()
            .map(|x| TrajectorySample {
                target: EmotionVector::uniform(),
                ..x.clone()
            })
            .collect();
        let (l, g) = backward(&p, &uniform, &[0.0; 3], &IntegrationOptions::default()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn time_constant_gradient_flips_with_targets() {
        let p = random_params(3, 2, 21);
        let s = toy_samples(2, 4, 21);
        let h0 = vec![0.4, -0.2, 0.3];
        let opts = IntegrationOptions::default();
        let tr = forward_trajectory(&p, &s, SolveMode::Fixed, &h0, &opts).unwrap();
        let with_offset = |sign: f64| -> Vec<TrajectorySample> {
            s.iter()
                .zip(&tr.predictions)
                .map(|(x, y)| TrajectorySample {
                    target: EmotionVector(std::array::from_fn(|j| y.0[j] + sign * 0.05 * (j as f64 - 2.5))),
                    ..x.clone()
                })
                .collect()
        };
        let (_, up) = backward(&p, &with_offset(1.0), &h0, &opts).unwrap();
        let (_, down) = backward(&p, &with_offset(-1.0), &h0, &opts).unwrap();
        for (a, b) in up.log_tau_c.iter().zip(&down.log_tau_c) {
            assert!(*a != 0.0);
            assert!((a + b).abs() <= 1e-12 * a.abs().max(1e-300));
            assert!(a.signum() != b.signum());
        }
    }

    #[test]
    fn early_stop_examples() {
        let h = [0.5, 0.3, 0.11, 0.105, 0.102, 0.101, 0.100, 0.103];
        let first = (1..=h.len()).find(|&n| early_stop(&h[..n], 5, 1e-2));
        assert_eq!(first, Some(8));
        assert!(!early_stop(&h[..5], 5, 1e-2));
        assert!(!early_stop(&[0.0; 5], 5, 1e-2));
        assert!(early_stop(&[0.0; 6], 5, 1e-2));
    }

    proptest! {
        #[test]
        fn early_stop_matches_rescan(hist in proptest::collection::vec(0.0f64..1.0, 0..30),
                                     window in 1usize..8, eps in 0.0f64..0.2) {
            let mut expected = hist.len() > window;
            if expected {
                let mut min = f64::INFINITY;
                for l in &hist {
                    if *l < min { min = *l; }
                }
                for i in hist.len() - window - 1..hist.len() {
                    if hist[i] - min > eps { expected = false; }
                }
            }
            prop_assert_eq!(early_stop(&hist, window, eps), expected);
        }

        #[test]
        fn readout_is_simplex(h in proptest::collection::vec(-50.0f64..50.0, 4), seed in 0u64..1000) {
            let p = random_params(4, 1, seed);
            let y = readout(&p, &h);
            prop_assert!((y.sum() - 1.0).abs() < 1e-6);
            prop_assert!(y.0.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn known_parameters_stop_immediately() {
        let p = random_params(4, 3, 31);
        let h0 = vec![0.0; 4];
        let dataset: Vec<Vec<TrajectorySample>> = (0..3)
            .map(|i| {
                let mut s = toy_samples(3, 6, 40 + i);
                let tr = forward_trajectory(&p, &s, SolveMode::Fixed, &h0, &IntegrationOptions::default()).unwrap();
                for (x, y) in s.iter_mut().zip(tr.predictions) {
                    x.target = y;
                }
                s
            })
            .collect();
        let cfg = TrainConfig {
            d: 4,
            ..Default::default()
        };
        let resume = TrainState {
            params: p.clone(),
            adam: AdamState::new(p.num_params()),
            history: vec![],
        };
        let out = train_resume(&dataset, &cfg, Some(resume)).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStop);
        assert_eq!(out.state.history.len(), cfg.patience_window + 1);
        assert!(out.state.history.iter().all(|l| *l == 0.0));
        assert_eq!(out.state.params, p);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let dataset: Vec<Vec<TrajectorySample>> = (0..4).map(|i| toy_samples(NUM_FEATURES, 5, i)).collect();
        let cfg = TrainConfig {
            d: 4,
            max_steps: 12,
            batch_segments: 3,
            stop_eps: 0.0,
            lr: 0.05,
            seed: 17,
            ..Default::default()
        };
        let a = train(&dataset, &cfg).unwrap();
        let b = train(&dataset, &cfg).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.stop, StopReason::MaxSteps);
        assert_eq!(a.state.history.len(), 12);

        let short = TrainConfig { max_steps: 7, ..cfg.clone() };
        let half = train(&dataset, &short).unwrap();
        let ck = Checkpoint::from_outcome(&half, &short, 1.0);
        let ck = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let resumed = train_resume(&dataset, &cfg, Some(ck.resume_state())).unwrap();
        assert_eq!(resumed.state, a.state);
    }

    #[test]
    fn batches_cover_each_epoch() {
        for step in 0..3 {
            let _ = batch_for_step(7, 3, 5, step);
        }
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_for_step(7, 3, 5, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(batch_for_step(7, 3, 5, 4), batch_for_step(7, 3, 5, 4));
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let p = random_params(5, 8, 77);
        let cfg = TrainConfig::default();
        let outcome = TrainOutcome {
            state: TrainState {
                adam: AdamState::new(p.num_params()),
                params: p,
                history: vec![0.1, 1.0 / 3.0, std::f64::consts::PI * 1e-7],
            },
            stop: StopReason::MaxSteps,
        };
        let ck = Checkpoint::from_outcome(&outcome, &cfg, 61.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);

        let mut bad = ck.clone();
        bad.version = 99;
        assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = ck;
        bad.params.w_h.pop();
        assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn train_rejects_empty_dataset() {
        assert!(train(&[], &TrainConfig::default()).is_err());
    }
}
