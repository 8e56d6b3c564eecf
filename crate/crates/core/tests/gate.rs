mod common;

use dyncap::gate::{
    gate_ordered, gate_per_unit, mc_normalized_error, GateState, OrderedKState, LAMBDA_MAX, SIGMA_INIT,
};
use dyncap::{RngStream, Tensor};

fn column_variance(t: &Tensor, j: usize) -> f64 {
    let col = t.column(j).unwrap();
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64
}

#[test]
fn training_mix_preserves_variance_once_sigma_is_learned() {
    let lambdas = vec![0.1, 0.4, 0.7, 0.95];
    let scales = [0.3, 1.0, 2.5, 6.0];
    let mut state = GateState::with_lambdas(lambdas, 0.01).unwrap();
    let rng = RngStream::new(17);
    let batch = |k: u64, rows: usize| {
        let raw = common::normal(&rng.derive(k), &[rows, 4]);
        raw.mul_row(&Tensor::vector(scales.to_vec())).unwrap()
    };
    assert!(state.sigma_ema().iter().all(|&s| s == SIGMA_INIT));
    for k in 0..2000 {
        state.update_sigma_ema(&batch(k, 64)).unwrap();
    }
    let x = batch(u64::MAX, 100_000);
    let y = gate_per_unit(&x, &state, &rng.derive(1 << 40), true).unwrap();
    for j in 0..4 {
        let ratio = column_variance(&y, j) / column_variance(&x, j);
        assert!((ratio - 1.0).abs() < 0.05, "unit {j}: {ratio}");
    }
}

#[test]
fn evaluation_mode_is_deterministic_scaling() {
    let state = GateState::with_lambdas(vec![0.0625, LAMBDA_MAX], 0.0625).unwrap();
    let x = Tensor::vector(vec![4.0, -2.0]);
    let a = gate_per_unit(&x, &state, &RngStream::new(1), false).unwrap();
    let b = gate_per_unit(&x, &state, &RngStream::new(2), false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.data()[0], 1.0);
    assert!((a.data()[1] + 2.0 * LAMBDA_MAX.sqrt()).abs() < 1e-15);
}

#[test]
fn training_mode_draws_fresh_noise_per_stream() {
    let state = GateState::with_lambdas(vec![0.5; 3], 0.01).unwrap();
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let a = gate_per_unit(&x, &state, &RngStream::new(1), true).unwrap();
    let b = gate_per_unit(&x, &state, &RngStream::new(2), true).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, gate_per_unit(&x, &state, &RngStream::new(1), true).unwrap());
}

#[test]
fn ordered_gate_examples() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    let sigma = [1.0; 5];
    let noise = RngStream::new(3);
    let full = gate_ordered(&x, &OrderedKState::new(5.0, 1, 5).unwrap(), &noise, &sigma).unwrap();
    assert_eq!(full, x);
    let cut = gate_ordered(&x, &OrderedKState::new(3.0, 1, 5).unwrap(), &noise, &sigma).unwrap();
    assert_eq!(cut.data(), &[1.0, 2.0, 3.0, 0.0, 0.0]);
    let again = gate_ordered(&cut, &OrderedKState::new(3.0, 1, 5).unwrap(), &noise, &sigma).unwrap();
    assert_eq!(again, cut);
    assert!(OrderedKState::new(0.5, 1, 5).is_err());
}

#[test]
fn error_law_at_a_few_fractions() {
    assert_eq!(mc_normalized_error(0.0, 10_000, 1).unwrap(), 0.0);
    for lambda in [0.3, 0.9] {
        let e = mc_normalized_error(lambda, 1_000_000, 2).unwrap();
        assert!((e - lambda).abs() < 0.01, "{lambda}: {e}");
    }
    assert!(mc_normalized_error(0.5, 100, 2).is_err());
}
