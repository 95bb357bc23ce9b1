//! Velocity-field network `v(x_t, t, c)` with hand-written reverse mode.
//!
//! The network is a plain MLP: SiLU on every hidden layer, linear output of
//! width 2. Its input is the concatenation of the current point (2), the time
//! embedding ([`TIME_WIDTH`]) and the condition slot ([`COND_WIDTH`]). The
//! condition slot holds either an embedded polar condition or the learned
//! null embedding, which stands for "no condition".
//!
//! All parameters live in one flat `Vec<f64>`; layers are views into it. That
//! keeps the optimizer, finite-difference checks and checkpointing trivial.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Polar;
use crate::error::{Result, SpfmError};
use crate::rng::{self, domain};

/// Sinusoidal pairs in the time embedding.
pub const TIME_PAIRS: usize = 8;
/// Raw `t` followed by `TIME_PAIRS` sines and `TIME_PAIRS` cosines.
pub const TIME_WIDTH: usize = 1 + 2 * TIME_PAIRS;
/// `(cos θ, sin θ, r)`.
pub const COND_WIDTH: usize = 3;
pub const DATA_DIM: usize = 2;
pub const INPUT_WIDTH: usize = DATA_DIM + TIME_WIDTH + COND_WIDTH;
/// Offset of the condition slot inside the input row.
pub const COND_OFFSET: usize = DATA_DIM + TIME_WIDTH;

/// Default hidden widths: three layers of 128.
pub fn default_widths() -> Vec<usize> {
    vec![INPUT_WIDTH, 128, 128, 128, DATA_DIM]
}

/// Embed a polar condition as `(cos θ, sin θ, r)`.
pub fn embed_condition(c: Polar) -> Result<[f64; COND_WIDTH]> {
    if !c.angle.is_finite() || !c.radius.is_finite() {
        return Err(SpfmError::Input(format!(
            "non-finite condition ({}, {})",
            c.angle, c.radius
        )));
    }
    if c.radius < 0.0 {
        return Err(SpfmError::Input(format!(
            "condition radius must be >= 0, got {}",
            c.radius
        )));
    }
    Ok([c.angle.cos(), c.angle.sin(), c.radius])
}

/// Frequency of sinusoidal pair `k`: `π · 2^k`.
pub fn time_frequency(k: usize) -> f64 {
    PI * (1u64 << k) as f64
}

/// `[t, sin(f_0 t) .. sin(f_7 t), cos(f_0 t) .. cos(f_7 t)]` with
/// `f_k = π 2^k`.
pub fn embed_time(t: f64) -> Result<[f64; TIME_WIDTH]> {
    check_time(t)?;
    let mut out = [0.0; TIME_WIDTH];
    out[0] = t;
    for k in 0..TIME_PAIRS {
        let phase = time_frequency(k) * t;
        out[1 + k] = phase.sin();
        out[1 + TIME_PAIRS + k] = phase.cos();
    }
    Ok(out)
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(SpfmError::Input(format!("time must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// What goes into the condition slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CondInput {
    Embedded([f64; COND_WIDTH]),
    /// The learned null embedding.
    Null,
}

impl CondInput {
    pub fn polar(c: Polar) -> Result<Self> {
        Ok(CondInput::Embedded(embed_condition(c)?))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, CondInput::Null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetInput {
    pub x_t: [f64; 2],
    pub t: f64,
    pub cond: CondInput,
}

impl NetInput {
    pub fn new(x_t: [f64; 2], t: f64, cond: CondInput) -> Result<Self> {
        check_time(t)?;
        Ok(NetInput { x_t, t, cond })
    }
}

/// Weights, biases and the null embedding, stored contiguously.
///
/// Layer `l` maps width `widths[l]` to `widths[l + 1]`; its weight is stored
/// row-major with shape `(in, out)` followed by its bias of length `out`. The
/// null embedding sits at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    widths: Vec<usize>,
    data: Vec<f64>,
}

fn layout_len(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + COND_WIDTH
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(SpfmError::Config(format!(
            "network needs at least input and output widths, got {widths:?}"
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(SpfmError::Config(format!(
            "network widths must be positive, got {widths:?}"
        )));
    }
    if widths[0] != INPUT_WIDTH {
        return Err(SpfmError::Config(format!(
            "first width must be the input width {INPUT_WIDTH}, got {}",
            widths[0]
        )));
    }
    if *widths.last().unwrap() != DATA_DIM {
        return Err(SpfmError::Config(format!(
            "last width must be {DATA_DIM}, got {}",
            widths.last().unwrap()
        )));
    }
    Ok(())
}

impl ModelParameters {
    /// All-zero parameters; the resulting field is identically zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(ModelParameters {
            widths: widths.to_vec(),
            data: vec![0.0; layout_len(widths)],
        })
    }

    /// Rebuild from a flat buffer, e.g. when loading a checkpoint.
    pub fn from_flat(widths: &[usize], data: Vec<f64>) -> Result<Self> {
        check_widths(widths)?;
        if data.len() != layout_len(widths) {
            return Err(SpfmError::Internal(format!(
                "parameter buffer has {} entries, widths {widths:?} need {}",
                data.len(),
                layout_len(widths)
            )));
        }
        Ok(ModelParameters {
            widths: widths.to_vec(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParameters {
            widths: self.widths.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn offset(&self, layer: usize) -> usize {
        self.widths[..=layer]
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn weight_range(&self, layer: usize) -> (usize, usize, usize) {
        let start = self.offset(layer);
        (start, self.widths[layer], self.widths[layer + 1])
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (start, i, o) = self.weight_range(layer);
        ArrayView2::from_shape((i, o), &self.data[start..start + i * o]).expect("layout")
    }

    pub fn weight_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, f64> {
        let (start, i, o) = self.weight_range(layer);
        ArrayViewMut2::from_shape((i, o), &mut self.data[start..start + i * o]).expect("layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (start, i, o) = self.weight_range(layer);
        ArrayView1::from(&self.data[start + i * o..start + i * o + o])
    }

    pub fn bias_mut(&mut self, layer: usize) -> ArrayViewMut1<'_, f64> {
        let (start, i, o) = self.weight_range(layer);
        ArrayViewMut1::from(&mut self.data[start + i * o..start + i * o + o])
    }

    pub fn null_embedding(&self) -> &[f64] {
        &self.data[self.data.len() - COND_WIDTH..]
    }

    pub fn null_embedding_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        &mut self.data[n - COND_WIDTH..]
    }

    fn same_shape(&self, other: &ModelParameters, what: &str) -> Result<()> {
        if self.widths != other.widths || self.data.len() != other.data.len() {
            return Err(SpfmError::Internal(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.widths, other.widths
            )));
        }
        Ok(())
    }
}

/// Seeded initialization.
///
/// Every weight and bias of a layer with fan-in `n` is drawn from
/// `U(-1/√n, 1/√n)`; the null embedding uses fan-in [`COND_WIDTH`]. Draws
/// come from the `INIT` stream of `seed`, layer by layer (weights row-major,
/// then bias), null embedding last.
pub fn init_params(seed: u64, widths: &[usize]) -> Result<ModelParameters> {
    let mut params = ModelParameters::zeros(widths)?;
    let mut rng = rng::stream(seed, domain::INIT, 0);
    let mut fill = |slice: &mut [f64], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in slice.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    };
    let mut cursor = 0;
    for w in widths.windows(2) {
        let len = w[0] * w[1] + w[1];
        fill(&mut params.data[cursor..cursor + len], w[0]);
        cursor += len;
    }
    fill(&mut params.data[cursor..], COND_WIDTH);
    Ok(params)
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Assemble the `(batch, INPUT_WIDTH)` input matrix.
fn input_matrix(params: &ModelParameters, inputs: &[NetInput]) -> Result<Array2<f64>> {
    let mut x = Array2::<f64>::zeros((inputs.len(), INPUT_WIDTH));
    for (mut row, inp) in x.axis_iter_mut(Axis(0)).zip(inputs) {
        let te = embed_time(inp.t)?;
        row[0] = inp.x_t[0];
        row[1] = inp.x_t[1];
        for (k, v) in te.iter().enumerate() {
            row[DATA_DIM + k] = *v;
        }
        let cond: &[f64] = match &inp.cond {
            CondInput::Embedded(e) => e,
            CondInput::Null => params.null_embedding(),
        };
        for (k, v) in cond.iter().enumerate() {
            row[COND_OFFSET + k] = *v;
        }
    }
    Ok(x)
}

struct Tape {
    /// Layer inputs: `acts[0]` is the network input, `acts[l]` the activated
    /// output of hidden layer `l - 1`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

fn run(params: &ModelParameters, x: Array2<f64>, keep: bool) -> Tape {
    let layers = params.layer_count();
    let mut acts = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    let mut h = x;
    for l in 0..layers {
        let mut z = h.dot(&params.weight(l));
        z += &params.bias(l);
        if keep {
            acts.push(h);
        }
        if l + 1 == layers {
            return Tape { acts, pre, out: z };
        }
        let a = z.mapv(silu);
        if keep {
            pre.push(z);
        }
        h = a;
    }
    unreachable!("network has at least one layer")
}

fn check_params(params: &ModelParameters) -> Result<()> {
    if params.data.len() != layout_len(&params.widths) {
        return Err(SpfmError::Internal(
            "parameter buffer does not match widths (corrupted checkpoint?)".into(),
        ));
    }
    Ok(())
}

/// Velocities for a batch of inputs, one row per input.
pub fn forward_batch(params: &ModelParameters, inputs: &[NetInput]) -> Result<Vec<[f64; 2]>> {
    check_params(params)?;
    let x = input_matrix(params, inputs)?;
    let out = run(params, x, false).out;
    Ok(out.outer_iter().map(|r| [r[0], r[1]]).collect())
}

pub fn forward(params: &ModelParameters, input: &NetInput) -> Result<[f64; 2]> {
    Ok(forward_batch(params, std::slice::from_ref(input))?[0])
}

/// Squared Euclidean distance between two 2-vectors.
pub fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Mean over the batch of `‖v(input) − target‖²` and its exact gradient,
/// including the null embedding wherever the condition slot is null.
pub fn loss_and_grad(
    params: &ModelParameters,
    batch: &[(NetInput, [f64; 2])],
) -> Result<(f64, ModelParameters)> {
    if batch.is_empty() {
        return Err(SpfmError::Input("loss_and_grad needs a non-empty batch".into()));
    }
    check_params(params)?;
    let inputs: Vec<NetInput> = batch.iter().map(|(i, _)| *i).collect();
    let x = input_matrix(params, &inputs)?;
    let tape = run(params, x, true);
    let n = batch.len() as f64;

    let mut loss = 0.0;
    let mut g = Array2::<f64>::zeros((batch.len(), DATA_DIM));
    for (b, (_, target)) in batch.iter().enumerate() {
        let d0 = tape.out[[b, 0]] - target[0];
        let d1 = tape.out[[b, 1]] - target[1];
        loss += d0 * d0 + d1 * d1;
        g[[b, 0]] = 2.0 * d0 / n;
        g[[b, 1]] = 2.0 * d1 / n;
    }
    loss /= n;

    let mut grad = params.zeros_like();
    let any_null = inputs.iter().any(|i| i.cond.is_null());
    for l in (0..params.layer_count()).rev() {
        grad.weight_mut(l).assign(&tape.acts[l].t().dot(&g));
        grad.bias_mut(l).assign(&g.sum_axis(Axis(0)));
        if l > 0 {
            let mut da = g.dot(&params.weight(l).t());
            da.zip_mut_with(&tape.pre[l - 1], |d, &z| *d *= silu_grad(z));
            g = da;
        } else if any_null {
            let dx = g.dot(&params.weight(0).t());
            let dnull = grad.null_embedding_mut();
            for (row, inp) in dx.outer_iter().zip(&inputs) {
                if inp.cond.is_null() {
                    for (k, d) in dnull.iter_mut().enumerate() {
                        *d += row[COND_OFFSET + k];
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(SpfmError::Config(format!("training.adam.lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(SpfmError::Config(format!(
                    "training.adam.{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(SpfmError::Config(format!("training.adam.eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam moment accumulators, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParameters,
    pub v: ModelParameters,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// In-place Adam update with bias correction.
///
/// Nothing is modified when the gradient holds a non-finite entry.
pub fn adam_update(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut OptimizerState,
    hyper: &AdamConfig,
) -> Result<()> {
    params.same_shape(grads, "optimizer gradient")?;
    params.same_shape(&state.m, "optimizer first moment")?;
    params.same_shape(&state.v, "optimizer second moment")?;
    if let Some(idx) = grads.data.iter().position(|g| !g.is_finite()) {
        return Err(SpfmError::Numeric(format!(
            "non-finite gradient entry {idx} ({}) at optimizer step {}",
            grads.data[idx],
            state.step + 1
        )));
    }
    state.step += 1;
    let step = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(step);
    let c2 = 1.0 - hyper.beta2.powi(step);
    let m = state.m.data.iter_mut();
    let v = state.v.data.iter_mut();
    for (((p, g), m), v) in params.data.iter_mut().zip(&grads.data).zip(m).zip(v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    if let Some(idx) = params.data.iter().position(|p| !p.is_finite()) {
        return Err(SpfmError::Numeric(format!(
            "parameter {idx} became non-finite at optimizer step {}",
            state.step
        )));
    }
    Ok(())
}

/// Functional form of [`adam_update`].
pub fn optimizer_step(
    params: &ModelParameters,
    grads: &ModelParameters,
    state: &OptimizerState,
    hyper: &AdamConfig,
) -> Result<(ModelParameters, OptimizerState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_update(&mut p, grads, &mut s, hyper)?;
    Ok((p, s))
}
