#![allow(clippy::needless_range_loop)]
mod common;

use neft_core::model::forward;
use neft_core::trainer::compute_gradients;
use neft_core::{Activation, Example, ModelConfig, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(activation: Activation, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 6,
        d_hidden: 10,
        n_layers: 2,
        n_classes: 3,
        activation,
        seed,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn forward_matches_straight_line_reference() {
    for activation in [Activation::Silu, Activation::Gelu, Activation::Relu] {
        let cfg = config(activation, 3);
        let params = ParameterSet::<f64>::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = common::random_batch(&cfg, 5, 4, &mut rng);
        let out = forward(&params, &batch, true).unwrap();
        let (logits, trace) = common::forward(&params, &batch);
        let (rows, cols) = out.logits.dims2().unwrap();
        for r in 0..rows {
            for c in 0..cols {
                assert!(close(out.logits.row(r)[c], logits[r][c], 1e-12), "{activation:?} logit {r},{c}");
            }
        }
        let got = out.trace.unwrap();
        assert_eq!(got.token_count, 20);
        assert_eq!(got.values.len(), trace.len());
        for (a, b) in got.values.iter().zip(&trace) {
            assert!(a.iter().zip(b).all(|(x, y)| close(*x, *y, 1e-12)), "{activation:?} trace");
        }
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let cfg = config(Activation::Silu, 8);
    let p64 = ParameterSet::<f64>::init(&cfg).unwrap();
    let p32: ParameterSet<f32> = p64.cast();
    let batch = common::random_batch(&cfg, 3, 6, &mut ChaCha8Rng::seed_from_u64(2));
    let a = forward(&p64, &batch, false).unwrap().logits;
    let b = forward(&p32, &batch, false).unwrap().logits;
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}

fn finite_difference_check(activation: Activation, seed: u64) {
    let cfg = config(activation, seed);
    let params = ParameterSet::<f64>::init(&cfg).unwrap();
    let batch = common::random_batch(&cfg, 3, 4, &mut ChaCha8Rng::seed_from_u64(seed + 100));
    let refs: Vec<&Example> = batch.iter().collect();
    let (loss, grads) = compute_gradients(&params, &refs).unwrap();
    assert!(close(loss, common::loss(&params, &batch), 1e-12));

    let h = 1e-5;
    for (ti, (name, g)) in grads.named_tensors().into_iter().enumerate() {
        let analytic = g.data();
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for k in 0..analytic.len() {
            let mut p = params.clone();
            p.named_tensors_mut()[ti].1.data_mut()[k] += h;
            let up = common::loss(&p, &batch);
            p.named_tensors_mut()[ti].1.data_mut()[k] -= 2.0 * h;
            let down = common::loss(&p, &batch);
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (numeric - analytic[k]).abs() <= 1e-6 + 1e-4 * numeric.abs(),
                "{activation:?} seed {seed} {name}[{k}]: {} vs {numeric}",
                analytic[k]
            );
            diff2 += (numeric - analytic[k]).powi(2);
            norm2 += numeric * numeric;
        }
        assert!(diff2.sqrt() <= 1e-6 * (1.0 + norm2.sqrt()), "{name}: norm-wise error");
    }
}

#[test]
fn silu_gradients_match_finite_differences() {
    for seed in 0..4 {
        finite_difference_check(Activation::Silu, seed);
    }
}

#[test]
fn gelu_gradients_match_finite_differences() {
    for seed in 0..4 {
        finite_difference_check(Activation::Gelu, seed);
    }
}

#[test]
fn gradients_are_independent_of_batch_order() {
    let cfg = config(Activation::Silu, 5);
    let params = ParameterSet::<f64>::init(&cfg).unwrap();
    let batch = common::random_batch(&cfg, 4, 3, &mut ChaCha8Rng::seed_from_u64(9));
    let fwd: Vec<&Example> = batch.iter().collect();
    let rev: Vec<&Example> = batch.iter().rev().collect();
    let (la, ga) = compute_gradients(&params, &fwd).unwrap();
    let (lb, gb) = compute_gradients(&params, &rev).unwrap();
    assert!(close(la, lb, 1e-12));
    for ((_, a), (_, b)) in ga.named_tensors().into_iter().zip(gb.named_tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| close(*x, *y, 1e-10)));
    }
}
