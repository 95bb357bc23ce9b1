//! Flow-matching objective, condition dropout and the self-purifying gate.
//!
//! One training step, per sample:
//!
//! 1. open the sample's stream `(train_seed, epoch, dataset index)` and draw,
//!    in this order, the gate noise `x0'`, the dropout uniform, the training
//!    time `t` and the training noise `x0` ([`SampleDraws`]);
//! 2. if the gate is active (SPFM enabled and past warm-up), evaluate the
//!    conditional and unconditional losses at `t'` on the shared point
//!    `x_{t'} = (1 - t') x0' + t' x1`, without gradients;
//! 3. a sample whose conditional loss strictly exceeds its unconditional loss
//!    is trained with the null condition; every other sample keeps its
//!    condition unless classifier-free dropout fires;
//! 4. one Adam step on the mean loss over the batch.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Polar, Sample};
use crate::error::{Result, SpfmError};
use crate::net::{self, AdamConfig, CondInput, ModelParameters, NetInput, OptimizerState};
use crate::rng::{self, domain};

/// Which time the optimized loss uses once the gate is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReuseMode {
    /// Gate at `t'`, train at a fresh `t ~ U(0, 1)` with fresh noise.
    #[default]
    SeparateT,
    /// Train on the gate's own `t'` and noise.
    ReuseGateT,
}

/// Which gate records a run keeps in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRecording {
    #[default]
    All,
    FinalEpoch,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub cfg_dropout_rate: f64,
    pub gate_time: f64,
    pub spfm_enabled: bool,
    pub gate_reuse_mode: GateReuseMode,
    pub hidden_widths: Vec<usize>,
    pub adam: AdamConfig,
    pub train_seed: u64,
    pub gate_recording: GateRecording,
    /// Fill the `wall_ms` metric column; off by default so metric files are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 100,
            warmup_epochs: 4,
            batch_size: 128,
            cfg_dropout_rate: 0.1,
            gate_time: 0.5,
            spfm_enabled: true,
            gate_reuse_mode: GateReuseMode::SeparateT,
            hidden_widths: vec![128, 128, 128],
            adam: AdamConfig::default(),
            train_seed: 0,
            gate_recording: GateRecording::All,
            record_wall_time: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(SpfmError::Config(format!(
                "training.warmup_epochs ({}) must not exceed training.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(SpfmError::Config("training.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_rate) {
            return Err(SpfmError::Config(format!(
                "training.cfg_dropout_rate must lie in [0, 1], got {}",
                self.cfg_dropout_rate
            )));
        }
        if !(self.gate_time > 0.0 && self.gate_time < 1.0) {
            return Err(SpfmError::Config(format!(
                "training.gate_time must lie in (0, 1), got {}",
                self.gate_time
            )));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(SpfmError::Config(format!(
                "training.hidden_widths must be positive, got {:?}",
                self.hidden_widths
            )));
        }
        self.adam.validate()
    }

    /// Full layer widths, input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(net::INPUT_WIDTH);
        w.extend_from_slice(&self.hidden_widths);
        w.push(net::DATA_DIM);
        w
    }

    /// Whether the gate runs in the given (1-based) epoch.
    pub fn gate_active(&self, epoch: usize) -> bool {
        self.spfm_enabled && epoch > self.warmup_epochs
    }
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: [f64; 2], x1: [f64; 2], t: f64) -> Result<[f64; 2]> {
    if !(0.0..=1.0).contains(&t) {
        return Err(SpfmError::Input(format!(
            "interpolation time must lie in [0, 1], got {t}"
        )));
    }
    Ok([(1.0 - t) * x0[0] + t * x1[0], (1.0 - t) * x0[1] + t * x1[1]])
}

/// Regression target of the flow-matching loss, `x1 - x0`.
pub fn fm_target(x0: [f64; 2], x1: [f64; 2]) -> [f64; 2] {
    [x1[0] - x0[0], x1[1] - x0[1]]
}

/// Classifier-free guidance dropout: `true` with probability `rate`.
pub fn cfg_dropout<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> bool {
    rng.random::<f64>() < rate
}

fn standard_normal_2d<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    TrainConditional,
    TrainUnconditional,
}

impl GateDecision {
    /// Strict rule: ties keep the condition.
    pub fn from_losses(l_cond: f64, l_uncond: f64) -> Self {
        if l_cond > l_uncond {
            GateDecision::TrainUnconditional
        } else {
            GateDecision::TrainConditional
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GateDecision::TrainConditional => "conditional",
            GateDecision::TrainUnconditional => "unconditional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub sample_index: usize,
    pub epoch: usize,
    pub l_cond: f64,
    pub l_uncond: f64,
    pub decision: GateDecision,
    pub t_prime: f64,
    pub x0: [f64; 2],
}

/// Gate losses for a batch of `(x1, condition, x0)` triples at `t'`.
///
/// Both forward passes of a triple see the identical point `x_{t'}`; no
/// gradients are taken. Records carry `sample_index = position` and
/// `epoch = 0` for the caller to fill in.
pub fn gate_batch(
    params: &ModelParameters,
    items: &[([f64; 2], Polar, [f64; 2])],
    t_prime: f64,
) -> Result<Vec<GateRecord>> {
    let mut inputs = Vec::with_capacity(2 * items.len());
    for &(x1, c, x0) in items {
        let x_t = interpolate(x0, x1, t_prime)?;
        inputs.push(NetInput::new(x_t, t_prime, CondInput::polar(c)?)?);
        inputs.push(NetInput::new(x_t, t_prime, CondInput::Null)?);
    }
    let out = net::forward_batch(params, &inputs)?;
    items
        .iter()
        .enumerate()
        .map(|(i, &(x1, _, x0))| {
            let target = fm_target(x0, x1);
            let l_cond = net::sq_dist(out[2 * i], target);
            let l_uncond = net::sq_dist(out[2 * i + 1], target);
            if !l_cond.is_finite() || !l_uncond.is_finite() {
                return Err(SpfmError::Numeric(format!(
                    "gate losses non-finite for item {i}: l_cond={l_cond}, l_uncond={l_uncond}, x1={x1:?}, x0={x0:?}"
                )));
            }
            Ok(GateRecord {
                sample_index: i,
                epoch: 0,
                l_cond,
                l_uncond,
                decision: GateDecision::from_losses(l_cond, l_uncond),
                t_prime,
                x0,
            })
        })
        .collect()
}

/// The gate for a single sample.
pub fn spfm_gate(
    params: &ModelParameters,
    x1: [f64; 2],
    c: Polar,
    x0: [f64; 2],
    t_prime: f64,
) -> Result<GateRecord> {
    Ok(gate_batch(params, &[(x1, c, x0)], t_prime)?[0])
}

/// Everything random about one sample in one epoch, drawn in a fixed order
/// from its own stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDraws {
    pub gate_x0: [f64; 2],
    pub dropout_u: f64,
    pub t: f64,
    pub x0: [f64; 2],
}

impl SampleDraws {
    pub fn draw(train_seed: u64, epoch: usize, sample_index: usize) -> Self {
        let mut r = rng::stream(
            train_seed,
            domain::TRAIN_SAMPLE,
            rng::epoch_sample_index(epoch, sample_index),
        );
        let gate_x0 = standard_normal_2d(&mut r);
        let dropout_u = r.random::<f64>();
        let t = r.random::<f64>();
        let x0 = standard_normal_2d(&mut r);
        SampleDraws {
            gate_x0,
            dropout_u,
            t,
            x0,
        }
    }

    pub fn dropped(&self, rate: f64) -> bool {
        self.dropout_u < rate
    }
}

/// How a sample ended up being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    /// Flagged by the gate.
    Gated,
    /// Classifier-free dropout.
    Dropped,
}

/// Build the regression item for one sample given its branch.
///
/// `reuse_gate` selects the gate's `t'` and noise instead of the fresh
/// training draws.
pub fn training_item(
    sample: &Sample,
    draws: &SampleDraws,
    branch: Branch,
    reuse_gate: Option<f64>,
) -> Result<(NetInput, [f64; 2])> {
    let (t, x0) = match reuse_gate {
        Some(t_prime) => (t_prime, draws.gate_x0),
        None => (draws.t, draws.x0),
    };
    let cond = match branch {
        Branch::Conditional => CondInput::polar(sample.condition)?,
        Branch::Gated | Branch::Dropped => CondInput::Null,
    };
    let x_t = interpolate(x0, sample.x1, t)?;
    Ok((NetInput::new(x_t, t, cond)?, fm_target(x0, sample.x1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub loss: f64,
    pub batch_size: usize,
    pub conditional: usize,
    pub gated: usize,
    pub dropped: usize,
}

/// Decide branches for a batch of `(dataset index, sample)` pairs and build
/// the regression items. Gate records follow the batch order.
pub fn plan_batch(
    params: &ModelParameters,
    batch: &[(usize, &Sample)],
    config: &TrainingConfig,
    epoch: usize,
) -> Result<(Vec<(NetInput, [f64; 2])>, Vec<Branch>, Vec<GateRecord>)> {
    let draws: Vec<SampleDraws> = batch
        .iter()
        .map(|&(idx, _)| SampleDraws::draw(config.train_seed, epoch, idx))
        .collect();
    let gate_on = config.gate_active(epoch);
    let records = if gate_on {
        let items: Vec<_> = batch
            .iter()
            .zip(&draws)
            .map(|(&(_, s), d)| (s.x1, s.condition, d.gate_x0))
            .collect();
        let mut recs = gate_batch(params, &items, config.gate_time)?;
        for (rec, &(idx, _)) in recs.iter_mut().zip(batch) {
            rec.sample_index = idx;
            rec.epoch = epoch;
        }
        recs
    } else {
        Vec::new()
    };
    let reuse = (gate_on && config.gate_reuse_mode == GateReuseMode::ReuseGateT)
        .then_some(config.gate_time);

    let mut items = Vec::with_capacity(batch.len());
    let mut branches = Vec::with_capacity(batch.len());
    for (pos, (&(_, sample), d)) in batch.iter().zip(&draws).enumerate() {
        let flagged = gate_on && records[pos].decision == GateDecision::TrainUnconditional;
        let branch = if flagged {
            Branch::Gated
        } else if d.dropped(config.cfg_dropout_rate) {
            Branch::Dropped
        } else {
            Branch::Conditional
        };
        items.push(training_item(sample, d, branch, reuse)?);
        branches.push(branch);
    }
    Ok((items, branches, records))
}

/// One optimizer step on the mean loss of `items`; returns that loss.
pub fn apply_items(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    items: &[(NetInput, [f64; 2])],
    adam: &AdamConfig,
) -> Result<f64> {
    let (loss, grad) = net::loss_and_grad(params, items)?;
    if !loss.is_finite() {
        return Err(SpfmError::Numeric(format!(
            "training loss is non-finite ({loss}) at optimizer step {}",
            opt.step + 1
        )));
    }
    net::adam_update(params, &grad, opt, adam)?;
    Ok(loss)
}

/// Gate, build items, and take one optimizer step.
pub fn train_step(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    batch: &[(usize, &Sample)],
    config: &TrainingConfig,
    epoch: usize,
) -> Result<(StepMetrics, Vec<GateRecord>)> {
    if batch.is_empty() {
        return Err(SpfmError::Input("train_step needs a non-empty batch".into()));
    }
    let (items, branches, records) = plan_batch(params, batch, config, epoch)?;
    let loss = apply_items(params, opt, &items, &config.adam)?;
    let count = |b: Branch| branches.iter().filter(|&&x| x == b).count();
    let metrics = StepMetrics {
        loss,
        batch_size: batch.len(),
        conditional: count(Branch::Conditional),
        gated: count(Branch::Gated),
        dropped: count(Branch::Dropped),
    };
    Ok((metrics, records))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub gated_fraction: f64,
    pub dropped_fraction: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: ModelParameters,
    pub opt_state: OptimizerState,
    pub metrics: Vec<EpochMetrics>,
    pub gate_records: Vec<GateRecord>,
}

/// A run that stopped on an error. `params`/`opt_state` are the state at the
/// end of the last completed epoch.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: SpfmError,
    pub epoch: usize,
    pub batch: usize,
    pub params: ModelParameters,
    pub opt_state: OptimizerState,
    pub metrics: Vec<EpochMetrics>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted in epoch {} batch {}: {}", self.epoch, self.batch, self.error)
    }
}

impl std::error::Error for TrainAbort {}

impl From<TrainAbort> for SpfmError {
    fn from(a: TrainAbort) -> Self {
        match a.error {
            SpfmError::Numeric(msg) => {
                SpfmError::Numeric(format!("epoch {} batch {}: {msg}", a.epoch, a.batch))
            }
            other => other,
        }
    }
}

/// Epoch order for a (1-based) epoch.
pub fn epoch_order(train_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(train_seed, domain::SHUFFLE, epoch as u64));
    order
}

pub fn train_run(dataset: &Dataset, config: &TrainingConfig) -> Result<RunOutput, TrainAbort> {
    let params = init_params_for(config).map_err(|error| abort_early(error, config))?;
    train_from(dataset, config, params, |_| {})
}

fn init_params_for(config: &TrainingConfig) -> Result<ModelParameters> {
    config.validate()?;
    net::init_params(config.train_seed, &config.widths())
}

fn abort_early(error: SpfmError, config: &TrainingConfig) -> TrainAbort {
    let params = ModelParameters::zeros(&config.widths())
        .unwrap_or_else(|_| ModelParameters::zeros(&net::default_widths()).expect("default widths"));
    TrainAbort {
        error,
        epoch: 0,
        batch: 0,
        opt_state: OptimizerState::new(&params),
        params,
        metrics: Vec::new(),
    }
}

/// [`train_run`] with a per-epoch callback.
pub fn train_run_with(
    dataset: &Dataset,
    config: &TrainingConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput, TrainAbort> {
    let params = init_params_for(config).map_err(|error| abort_early(error, config))?;
    train_from(dataset, config, params, on_epoch)
}

/// Train starting from given parameters with a fresh optimizer state.
pub fn train_from(
    dataset: &Dataset,
    config: &TrainingConfig,
    mut params: ModelParameters,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput, TrainAbort> {
    let mut opt = OptimizerState::new(&params);
    if let Err(error) = config.validate() {
        return Err(TrainAbort { error, epoch: 0, batch: 0, params, opt_state: opt, metrics: Vec::new() });
    }
    if dataset.is_empty() {
        return Err(TrainAbort {
            error: SpfmError::Input("cannot train on an empty dataset".into()),
            epoch: 0,
            batch: 0,
            params,
            opt_state: opt,
            metrics: Vec::new(),
        });
    }
    let n = dataset.len();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut records = Vec::new();
    let mut last_good = (params.clone(), opt.clone());

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = epoch_order(config.train_seed, epoch, n);
        let mut loss_sum = 0.0;
        let (mut gated, mut dropped) = (0usize, 0usize);
        let mut epoch_records = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(usize, &Sample)> =
                chunk.iter().map(|&i| (i, &dataset.samples[i])).collect();
            match train_step(&mut params, &mut opt, &batch, config, epoch) {
                Ok((m, recs)) => {
                    loss_sum += m.loss * m.batch_size as f64;
                    gated += m.gated;
                    dropped += m.dropped;
                    epoch_records.extend(recs);
                }
                Err(error) => {
                    return Err(TrainAbort {
                        error,
                        epoch,
                        batch: b + 1,
                        params: last_good.0,
                        opt_state: last_good.1,
                        metrics,
                    })
                }
            }
        }
        epoch_records.sort_by_key(|r| r.sample_index);
        let keep = match config.gate_recording {
            GateRecording::All => true,
            GateRecording::FinalEpoch => epoch == config.epochs,
            GateRecording::None => false,
        };
        if keep {
            records.extend(epoch_records);
        }
        let m = EpochMetrics {
            epoch,
            mean_loss: loss_sum / n as f64,
            gated_fraction: gated as f64 / n as f64,
            dropped_fraction: dropped as f64 / n as f64,
            wall_ms: if config.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        on_epoch(&m);
        metrics.push(m);
        last_good = (params.clone(), opt.clone());
    }
    Ok(RunOutput {
        params,
        opt_state: opt,
        metrics,
        gate_records: records,
    })
}

/// Records of the last epoch that has any, e.g. for a purification report.
pub fn final_epoch_records(records: &[GateRecord]) -> Vec<GateRecord> {
    match records.iter().map(|r| r.epoch).max() {
        Some(last) => records.iter().filter(|r| r.epoch == last).copied().collect(),
        None => Vec::new(),
    }
}
