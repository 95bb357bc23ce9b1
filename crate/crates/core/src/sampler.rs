//! Euler integration of the learned field with classifier-free guidance.
//!
//! Noise is drawn per item from stream `key` of the sampler seed, so a batch
//! is exactly the item-by-item result, and an item's output depends only on
//! its key and condition, never on its position in the batch.

use std::cell::Cell;

use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Polar;
use crate::error::{Result, SpfmError};
use crate::net::{self, CondInput, ModelParameters, NetInput};
use crate::rng::{self, domain};

/// Anything that can evaluate the velocity field on a batch.
pub trait VelocityField {
    fn velocities(&self, inputs: &[NetInput]) -> Result<Vec<[f64; 2]>>;
}

impl VelocityField for ModelParameters {
    fn velocities(&self, inputs: &[NetInput]) -> Result<Vec<[f64; 2]>> {
        net::forward_batch(self, inputs)
    }
}

/// Wraps a field and counts conditional and unconditional evaluations.
pub struct CountingField<'a, F: VelocityField> {
    pub inner: &'a F,
    pub conditional: Cell<usize>,
    pub unconditional: Cell<usize>,
}

impl<'a, F: VelocityField> CountingField<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        CountingField {
            inner,
            conditional: Cell::new(0),
            unconditional: Cell::new(0),
        }
    }
}

impl<F: VelocityField> VelocityField for CountingField<'_, F> {
    fn velocities(&self, inputs: &[NetInput]) -> Result<Vec<[f64; 2]>> {
        let nulls = inputs.iter().filter(|i| i.cond.is_null()).count();
        self.unconditional.set(self.unconditional.get() + nulls);
        self.conditional.set(self.conditional.get() + inputs.len() - nulls);
        self.inner.velocities(inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Guidance scale ω; 0 disables guidance.
    pub guidance: f64,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            guidance: 0.0,
            n_steps: 100,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(SpfmError::Config("sampler.n_steps must be >= 1".into()));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(SpfmError::Config(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.guidance
            )));
        }
        Ok(())
    }
}

/// `(1 + ω) v_cond − ω v_uncond`, evaluated as `v_cond + ω (v_cond − v_uncond)`
/// so equal branches and `ω = 0` give back `v_cond` exactly.
pub fn guided_velocity(v_cond: [f64; 2], v_uncond: [f64; 2], omega: f64) -> [f64; 2] {
    [
        v_cond[0] + omega * (v_cond[0] - v_uncond[0]),
        v_cond[1] + omega * (v_cond[1] - v_uncond[1]),
    ]
}

/// Base noise for stream `key`.
pub fn initial_noise(seed: u64, key: u64) -> [f64; 2] {
    let mut r = rng::stream(seed, domain::SAMPLER, key);
    [r.sample(StandardNormal), r.sample(StandardNormal)]
}

/// Integrate every `(key, condition)` item from its noise at `t = 0` to
/// `t = 1` with `n_steps` left-endpoint Euler steps.
pub fn sample_keyed<F: VelocityField + ?Sized>(
    field: &F,
    items: &[(u64, Polar)],
    cfg: &SamplerConfig,
) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(SpfmError::Input("sampling needs at least one condition".into()));
    }
    let conds = items
        .iter()
        .enumerate()
        .map(|(i, &(_, c))| {
            CondInput::polar(c).map_err(|e| SpfmError::Input(format!("condition {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut xs: Vec<[f64; 2]> = items
        .iter()
        .map(|&(key, _)| initial_noise(cfg.seed, key))
        .collect();
    let guided = cfg.guidance > 0.0;
    let dt = 1.0 / cfg.n_steps as f64;
    let mut inputs = Vec::with_capacity(items.len() * if guided { 2 } else { 1 });
    for k in 0..cfg.n_steps {
        let t = k as f64 * dt;
        inputs.clear();
        for (x, c) in xs.iter().zip(&conds) {
            inputs.push(NetInput::new(*x, t, *c)?);
        }
        if guided {
            for x in &xs {
                inputs.push(NetInput::new(*x, t, CondInput::Null)?);
            }
        }
        let v = field.velocities(&inputs)?;
        let n = xs.len();
        for (i, x) in xs.iter_mut().enumerate() {
            let vel = if guided {
                guided_velocity(v[i], v[n + i], cfg.guidance)
            } else {
                v[i]
            };
            x[0] += dt * vel[0];
            x[1] += dt * vel[1];
            if !x[0].is_finite() || !x[1].is_finite() {
                return Err(SpfmError::Numeric(format!(
                    "sampling state became non-finite at step {k} for item {i}"
                )));
            }
        }
    }
    Ok(xs)
}

/// One generated point; uses noise stream 0.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    condition: Polar,
    cfg: &SamplerConfig,
) -> Result<[f64; 2]> {
    Ok(sample_keyed(field, &[(0, condition)], cfg)?[0])
}

/// Generated points for `conditions`, item `i` using noise stream `i`.
pub fn sample_batch<F: VelocityField + ?Sized>(
    field: &F,
    conditions: &[Polar],
    cfg: &SamplerConfig,
) -> Result<Vec<[f64; 2]>> {
    let items: Vec<(u64, Polar)> = conditions
        .iter()
        .enumerate()
        .map(|(i, &c)| (i as u64, c))
        .collect();
    sample_keyed(field, &items, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{default_widths, init_params};

    fn constant_field(c: [f64; 2]) -> ModelParameters {
        let mut p = ModelParameters::zeros(&default_widths()).unwrap();
        let last = p.layer_count() - 1;
        p.bias_mut(last)[0] = c[0];
        p.bias_mut(last)[1] = c[1];
        p
    }

    #[test]
    fn guided_velocity_identities() {
        let vc = [0.7, -1.3];
        let vu = [2.5, 0.1];
        assert_eq!(guided_velocity(vc, vu, 0.0), vc);
        for w in [0.0, 0.3, 1.0, 7.5] {
            assert_eq!(guided_velocity(vc, vc, w), vc);
        }
        assert_eq!(guided_velocity([1.0, 0.0], [0.0, 1.0], 1.0), [2.0, -1.0]);
    }

    #[test]
    fn zero_field_returns_the_noise() {
        let p = ModelParameters::zeros(&default_widths()).unwrap();
        for w in [0.0, 1.0] {
            let cfg = SamplerConfig { guidance: w, n_steps: 17, seed: 3 };
            let out = sample(&p, Polar::new(0.4, 1.0), &cfg).unwrap();
            assert_eq!(out, initial_noise(3, 0));
        }
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let c = [0.75, -1.5];
        let p = constant_field(c);
        for n_steps in [1, 2, 7, 100, 333] {
            let cfg = SamplerConfig { guidance: 0.0, n_steps, seed: 9 };
            let out = sample(&p, Polar::new(1.0, 2.0), &cfg).unwrap();
            let x0 = initial_noise(9, 0);
            assert!((out[0] - (x0[0] + c[0])).abs() < 1e-12, "{n_steps}");
            assert!((out[1] - (x0[1] + c[1])).abs() < 1e-12, "{n_steps}");
        }
    }

    #[test]
    fn unguided_sampling_skips_unconditional_passes() {
        let p = init_params(1, &default_widths()).unwrap();
        let conds = [Polar::new(0.1, 1.0), Polar::new(2.0, 2.0)];
        let counter = CountingField::new(&p);
        sample_batch(&counter, &conds, &SamplerConfig { guidance: 0.0, n_steps: 10, seed: 0 }).unwrap();
        assert_eq!(counter.unconditional.get(), 0);
        assert_eq!(counter.conditional.get(), 20);

        let counter = CountingField::new(&p);
        sample_batch(&counter, &conds, &SamplerConfig { guidance: 0.5, n_steps: 10, seed: 0 }).unwrap();
        assert_eq!(counter.unconditional.get(), 20);
    }

    #[test]
    fn batch_equals_items_and_is_deterministic() {
        let p = init_params(2, &default_widths()).unwrap();
        let cfg = SamplerConfig { guidance: 0.5, n_steps: 20, seed: 4 };
        let conds: Vec<Polar> = (0..25).map(|i| Polar::new(0.25 * i as f64, 1.0 + (i % 2) as f64)).collect();
        let batch = sample_batch(&p, &conds, &cfg).unwrap();
        assert_eq!(batch, sample_batch(&p, &conds, &cfg).unwrap());
        assert_eq!(sample(&p, conds[0], &cfg).unwrap(), batch[0]);
        for (i, c) in conds.iter().enumerate() {
            let single = sample_keyed(&p, &[(i as u64, *c)], &cfg).unwrap()[0];
            assert_eq!(single, batch[i]);
        }
    }

    #[test]
    fn permuting_keyed_items_permutes_outputs() {
        let p = init_params(2, &default_widths()).unwrap();
        let cfg = SamplerConfig { guidance: 1.0, n_steps: 15, seed: 5 };
        let items: Vec<(u64, Polar)> = (0..12).map(|i| (i as u64, Polar::new(0.5 * i as f64, 2.0))).collect();
        let out = sample_keyed(&p, &items, &cfg).unwrap();
        let perm = [5usize, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6];
        let permuted: Vec<_> = perm.iter().map(|&j| items[j]).collect();
        let out2 = sample_keyed(&p, &permuted, &cfg).unwrap();
        for (k, &j) in perm.iter().enumerate() {
            assert_eq!(out2[k], out[j]);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let p = ModelParameters::zeros(&default_widths()).unwrap();
        let c = Polar::new(0.0, 1.0);
        assert!(sample(&p, c, &SamplerConfig { guidance: 0.0, n_steps: 0, seed: 0 }).is_err());
        assert!(sample(&p, c, &SamplerConfig { guidance: -0.5, n_steps: 1, seed: 0 }).is_err());
        assert!(sample(&p, Polar::new(f64::NAN, 1.0), &SamplerConfig::default()).is_err());
        assert!(sample_batch(&p, &[], &SamplerConfig::default()).is_err());
    }

    #[test]
    fn diverging_field_is_a_numeric_error() {
        let mut p = ModelParameters::zeros(&[net::INPUT_WIDTH, 2]).unwrap();
        p.weight_mut(0)[[0, 0]] = 1e300;
        p.weight_mut(0)[[1, 1]] = 1e300;
        let cfg = SamplerConfig { guidance: 1.0, n_steps: 4, seed: 0 };
        let err = sample(&p, Polar::new(0.0, 1.0), &cfg).unwrap_err();
        assert!(matches!(err, SpfmError::Numeric(ref m) if m.contains("step")), "{err}");
    }
}
