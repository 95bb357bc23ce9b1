mod common;

use spfm::net::{self, AdamConfig, CondInput, ModelParameters, NetInput, OptimizerState};

#[test]
fn analytic_gradients_match_finite_differences() {
    for k in 0..20 {
        let widths = common::instance_widths(k);
        let (params, batch) = common::random_instance(k as u64, &widths, 1 + k % 8);
        let err = common::gradient_check(&params, &batch);
        assert!(err < common::FD_REL_TOL, "instance {k} widths {widths:?}: relative error {err}");
    }
}

#[test]
fn spec_sized_instance_matches() {
    let (params, batch) = common::random_instance(99, &[net::INPUT_WIDTH, 8, 2], 4);
    assert!(common::gradient_check(&params, &batch) < common::FD_REL_TOL);
}

#[test]
fn matching_targets_give_zero_loss_and_gradient() {
    let (params, batch) = common::random_instance(7, &[net::INPUT_WIDTH, 8, 2], 5);
    let exact: Vec<_> = batch
        .iter()
        .map(|(i, _)| (*i, net::forward(&params, i).unwrap()))
        .collect();
    let (loss, grad) = net::loss_and_grad(&params, &exact).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut params = ModelParameters::zeros(&[net::INPUT_WIDTH, 2]).unwrap();
    let mut grad = params.zeros_like();
    grad.as_mut_slice()[5] = 1.0;
    let hyper = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut state = OptimizerState::new(&params);
    net::adam_update(&mut params, &grad, &mut state, &hyper).unwrap();
    assert_eq!(state.step, 1);
    assert!((params.as_slice()[5] + 0.1).abs() < 1e-9);
    let moved = params.as_slice().iter().filter(|&&p| p != 0.0).count();
    assert_eq!(moved, 1);
}

#[test]
fn adam_is_deterministic() {
    let (params, batch) = common::random_instance(3, &[net::INPUT_WIDTH, 8, 2], 4);
    let (_, grad) = net::loss_and_grad(&params, &batch).unwrap();
    let state = OptimizerState::new(&params);
    let a = net::optimizer_step(&params, &grad, &state, &AdamConfig::default()).unwrap();
    let b = net::optimizer_step(&params, &grad, &state, &AdamConfig::default()).unwrap();
    assert_eq!(a.0.as_slice(), b.0.as_slice());
    assert_eq!(a.1, b.1);
}

#[test]
fn one_step_moves_null_embedding() {
    let mut params = net::init_params(1, &net::default_widths()).unwrap();
    let before = params.null_embedding().to_vec();
    let batch = vec![(NetInput::new([0.3, -0.2], 0.4, CondInput::Null).unwrap(), [5.0, -5.0])];
    let (loss, grad) = net::loss_and_grad(&params, &batch).unwrap();
    assert!(loss > 0.0);
    let mut state = OptimizerState::new(&params);
    net::adam_update(&mut params, &grad, &mut state, &AdamConfig::default()).unwrap();
    assert_ne!(params.null_embedding(), &before[..]);
}
