//! Shared oracles for the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use spfm::data::Polar;
use spfm::net::{self, CondInput, ModelParameters, NetInput};
use spfm::rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this magnitude both derivatives count as zero; central differences
/// cannot resolve smaller values against rounding in the loss.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// A random small network and batch for gradient checking.
pub fn random_instance(seed: u64, widths: &[usize], batch: usize) -> (ModelParameters, Vec<(NetInput, [f64; 2])>) {
    let mut r = rng::stream(seed, 0xFD, 0);
    let mut params = net::init_params(seed, widths).unwrap();
    for p in params.as_mut_slice() {
        *p += 0.1 * r.sample::<f64, _>(StandardNormal);
    }
    let items = (0..batch)
        .map(|i| {
            let x_t = [r.sample(StandardNormal), r.sample(StandardNormal)];
            let t: f64 = r.random();
            let cond = if i % 2 == 0 {
                CondInput::Null
            } else {
                CondInput::polar(Polar::new(r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.0..3.0))).unwrap()
            };
            let target = [r.sample(StandardNormal), r.sample(StandardNormal)];
            (NetInput::new(x_t, t, cond).unwrap(), target)
        })
        .collect();
    (params, items)
}

/// Worst `|analytic − numeric| / max(|analytic|, |numeric|)` over all
/// parameters, ignoring pairs that are both below [`FD_ABS_FLOOR`].
pub fn gradient_check(params: &ModelParameters, batch: &[(NetInput, [f64; 2])]) -> f64 {
    let (_, grad) = net::loss_and_grad(params, batch).unwrap();
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for i in 0..params.len() {
        let orig = p.as_slice()[i];
        p.as_mut_slice()[i] = orig + FD_STEP;
        let up = net::loss_and_grad(&p, batch).unwrap().0;
        p.as_mut_slice()[i] = orig - FD_STEP;
        let down = net::loss_and_grad(&p, batch).unwrap().0;
        p.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grad.as_slice()[i];
        let scale = analytic.abs().max(numeric.abs());
        if scale < FD_ABS_FLOOR {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

/// Widths of the `k`-th gradient-check instance, cycling through small shapes.
pub fn instance_widths(k: usize) -> Vec<usize> {
    match k % 4 {
        0 => vec![net::INPUT_WIDTH, 8, 2],
        1 => vec![net::INPUT_WIDTH, 16, 16, 2],
        2 => vec![net::INPUT_WIDTH, 4, 8, 2],
        _ => vec![net::INPUT_WIDTH, 2],
    }
}
