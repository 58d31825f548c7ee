use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, dim, labels).unwrap()
}

fn state_with(spec: &MlpSpec, values: Vec<f64>) -> MlpState {
    MlpState::from_params(spec, ParamVector::from_vec(values)).unwrap()
}

#[test]
fn spec_rejects_invalid_shapes() {
    assert!(MlpSpec::uniform(vec![3], Activation::Relu, false, 0.0).is_err());
    assert!(MlpSpec::uniform(vec![3, 0, 2], Activation::Relu, false, 0.0).is_err());
    assert!(MlpSpec::uniform(vec![3, 2], Activation::Relu, false, -1.0).is_err());
    assert!(MlpSpec::new(vec![3, 4, 2], Activation::Relu, vec![], 0.0).is_err());
}

#[test]
fn layout_counts_bn_parameters() {
    let spec = MlpSpec::uniform(vec![2, 4, 3], Activation::Tanh, true, 0.0).unwrap();
    // 2*4 + 4 + 2*4 (gamma, beta) + 4*3 + 3
    assert_eq!(spec.param_count(), 35);
    let layers = spec.layers();
    assert_eq!(layers[0].bn.unwrap().gamma, 12);
    assert_eq!(layers[1].weight, 20);
}

#[test]
fn identity_linear_net_passes_inputs_through() {
    let spec = MlpSpec::uniform(vec![3, 3], Activation::Relu, false, 0.0).unwrap();
    let mut values = vec![0.0; spec.param_count()];
    for i in 0..3 {
        values[i * 3 + i] = 1.0;
    }
    let state = state_with(&spec, values);
    let batch = Batch::new(vec![0.5, -2.0, 7.0], 3, vec![0]).unwrap();
    let (logits, _) = forward(&state, &batch, Mode::Eval).unwrap();
    assert_eq!(logits.row(0), &[0.5, -2.0, 7.0]);
}

#[test]
fn bias_only_net() {
    let spec = MlpSpec::uniform(vec![2, 2], Activation::Relu, false, 0.0).unwrap();
    let state = state_with(&spec, vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0]);
    let batch = Batch::new(vec![0.0, 0.0], 2, vec![0]).unwrap();
    let (logits, _) = forward(&state, &batch, Mode::Train).unwrap();
    assert_eq!(logits.row(0), &[1.0, -1.0]);
}

#[test]
fn tanh_net_matches_scalar_evaluation() {
    let spec = MlpSpec::uniform(vec![2, 4, 2], Activation::Tanh, false, 0.0).unwrap();
    let state = MlpState::init(&spec, 17);
    let w = state.params().as_slice().to_vec();
    let x = [0.3, -1.2];

    // Straight-line evaluation: W1 (4x2) at 0, b1 at 8, W2 (2x4) at 12, b2 at 20.
    let mut hidden = [0.0; 4];
    for o in 0..4 {
        let s = w[o * 2] * x[0] + w[o * 2 + 1] * x[1] + w[8 + o];
        hidden[o] = s.tanh();
    }
    let mut expected = [0.0; 2];
    for j in 0..2 {
        let mut s = w[20 + j];
        for o in 0..4 {
            s += w[12 + j * 4 + o] * hidden[o];
        }
        expected[j] = s;
    }

    let batch = Batch::new(x.to_vec(), 2, vec![0]).unwrap();
    let (logits, _) = forward(&state, &batch, Mode::Eval).unwrap();
    for j in 0..2 {
        assert!((logits.get(0, j) - expected[j]).abs() < 1e-14);
    }
}

#[test]
fn dimension_mismatch_is_a_shape_error() {
    let spec = MlpSpec::uniform(vec![3, 2], Activation::Relu, false, 0.0).unwrap();
    let state = MlpState::init(&spec, 0);
    let batch = Batch::new(vec![0.0, 1.0], 2, vec![0]).unwrap();
    assert!(matches!(forward(&state, &batch, Mode::Eval), Err(Error::Shape(_))));
}

#[test]
fn nonfinite_activation_names_the_layer() {
    let spec = MlpSpec::uniform(vec![1, 1, 2], Activation::Relu, false, 0.0).unwrap();
    let mut values = vec![0.0; spec.param_count()];
    values[0] = 1e300;
    let state = state_with(&spec, values);
    let batch = Batch::new(vec![1e300], 1, vec![0]).unwrap();
    match forward(&state, &batch, Mode::Eval) {
        Err(Error::Numeric { layer, .. }) => assert_eq!(layer, "layer 0"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn uniform_logits_give_log_k() {
    for k in [2usize, 3, 10] {
        let spec = MlpSpec::uniform(vec![4, k], Activation::Relu, false, 0.0).unwrap();
        let state = state_with(&spec, vec![0.0; spec.param_count()]);
        let batch = random_batch(6, 4, k, 3);
        let l = loss(&state, &batch, Mode::Train).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-15);
    }
}

#[test]
fn zero_weights_have_no_l2_gradient() {
    let spec = MlpSpec::uniform(vec![3, 5, 2], Activation::Tanh, false, 0.1).unwrap();
    let state = state_with(&spec, vec![0.0; spec.param_count()]);
    let batch = random_batch(7, 3, 2, 4);
    let (l, g) = loss_and_grad(&state, &batch).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);
    // Hidden activations are zero, so every weight gradient vanishes, penalty included.
    for layer in spec.layers() {
        for i in layer.weight..layer.bias {
            assert_eq!(g[i], 0.0);
        }
    }
}

#[test]
fn huge_logits_do_not_overflow() {
    let spec = MlpSpec::uniform(vec![1, 2], Activation::Relu, false, 0.0).unwrap();
    let state = state_with(&spec, vec![1000.0, -1000.0, 0.0, 0.0]);
    let batch = Batch::new(vec![1.0, 1.0], 1, vec![0, 1]).unwrap();
    let (l, g) = loss_and_grad(&state, &batch).unwrap();
    assert!((l - 1000.0).abs() < 1e-9);
    assert!(g.is_finite());
}

#[test]
fn central_difference_on_linear_and_quadratic() {
    let c = 3.25;
    for h in [1e-1, 1e-3, 1e-6] {
        let g = central_difference(|w| Ok(c * w[0]), &[0.7], h).unwrap();
        assert!((g[0] - c).abs() <= 1e-9 * c);
    }
    let g = central_difference(|w| Ok(w[0] * w[0]), &[1.0], 1e-3).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-12);
    assert!(central_difference(|w| Ok(w[0]), &[1.0], 0.0).is_err());
}

#[test]
fn small_tanh_net_gradient_matches_finite_differences() {
    let spec = MlpSpec::uniform(vec![2, 4, 2], Activation::Tanh, false, 0.0).unwrap();
    let state = MlpState::init(&spec, 5);
    let batch = random_batch(8, 2, 2, 6);
    let (_, g) = loss_and_grad(&state, &batch).unwrap();
    let fd = finite_diff_grad(&state, &batch, 1e-5).unwrap();
    assert!(max_relative_error(&g, &fd) < 1e-6);
}

pub(crate) fn gradcheck_matrix() -> Vec<MlpSpec> {
    vec![
        MlpSpec::uniform(vec![3, 6, 3], Activation::Relu, false, 1e-3).unwrap(),
        MlpSpec::uniform(vec![3, 6, 3], Activation::Tanh, false, 1e-3).unwrap(),
        MlpSpec::uniform(vec![3, 6, 3], Activation::Relu, true, 1e-3).unwrap(),
        MlpSpec::uniform(vec![3, 6, 3], Activation::Tanh, true, 1e-3).unwrap(),
        MlpSpec::new(vec![2, 5, 4, 3], Activation::Tanh, vec![true, false], 5e-3).unwrap(),
        MlpSpec::uniform(vec![2, 5, 4, 2], Activation::Relu, true, 0.0).unwrap(),
    ]
}

#[test]
fn gradient_check_over_architecture_matrix() {
    for (i, spec) in gradcheck_matrix().iter().enumerate() {
        let mut state = MlpState::init(spec, 100 + i as u64);
        // Move BN parameters off their defaults so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for layer in spec.layers() {
            for j in layer.bias..layer.bias + layer.out_dim {
                state.params_mut()[j] = rng.random_range(-0.3..0.3);
            }
            if let Some(bn) = layer.bn {
                for j in 0..layer.out_dim {
                    state.params_mut()[bn.gamma + j] = rng.random_range(0.5..1.5);
                    state.params_mut()[bn.beta + j] = rng.random_range(-0.5..0.5);
                }
            }
        }
        let batch = random_batch(10, spec.input_dim(), spec.output_dim(), 50 + i as u64);
        let (_, g) = loss_and_grad(&state, &batch).unwrap();
        let fd = finite_diff_grad(&state, &batch, 1e-5).unwrap();
        let err = max_relative_error(&g, &fd);
        assert!(err < 1e-6, "architecture {i}: max relative error {err:e}");
    }
}

fn single_bn_unit() -> MlpState {
    // 1 -> 1 (BN) -> 1 with weight 1 and bias 0: pre-normalization activation equals the input.
    let spec = MlpSpec::uniform(vec![1, 1, 1], Activation::Relu, true, 0.0).unwrap();
    state_with(&spec, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
}

#[test]
fn bn_pass_two_values() {
    let state = single_bn_unit();
    let data = Batch::new(vec![1.0, 3.0], 1, vec![0, 0]).unwrap();
    let out = recompute_bn_stats(&state, [&data]).unwrap();
    assert_eq!(out.state.bn_stats()[0].mean, vec![2.0]);
    assert_eq!(out.state.bn_stats()[0].var, vec![1.0]);
    assert_eq!(out.clamped, 0);
    assert_eq!(out.state.params(), state.params());
}

#[test]
fn bn_pass_streams_across_batches() {
    let state = single_bn_unit();
    let a = Batch::new(vec![1.0], 1, vec![0]).unwrap();
    let b = Batch::new(vec![3.0], 1, vec![0]).unwrap();
    let out = recompute_bn_stats(&state, [&a, &b]).unwrap();
    assert_eq!(out.state.bn_stats()[0].mean, vec![2.0]);
    assert_eq!(out.state.bn_stats()[0].var, vec![1.0]);
}

#[test]
fn bn_pass_clamps_constant_features() {
    let state = single_bn_unit();
    let data = Batch::new(vec![0.7; 5], 1, vec![0; 5]).unwrap();
    let out = recompute_bn_stats(&state, [&data]).unwrap();
    assert_eq!(out.state.bn_stats()[0].mean, vec![0.7]);
    assert_eq!(out.state.bn_stats()[0].var, vec![BN_EPS]);
    assert_eq!(out.clamped, 1);
}

#[test]
fn bn_pass_is_idempotent_and_needs_data() {
    let spec = MlpSpec::uniform(vec![2, 6, 5, 2], Activation::Relu, true, 0.0).unwrap();
    let state = MlpState::init(&spec, 9);
    let data = random_batch(40, 2, 2, 10);
    let once = recompute_bn_stats(&state, data.chunks(16).collect::<Vec<_>>().iter()).unwrap();
    let twice = recompute_bn_stats(&once.state, data.chunks(16).collect::<Vec<_>>().iter()).unwrap();
    assert_eq!(once.state, twice.state);
    assert!(once.state.bn_stats().iter().all(|s| s.var.iter().all(|&v| v > 0.0)));
    let none: [&Batch; 0] = [];
    assert!(recompute_bn_stats(&state, none).is_err());
}

#[test]
fn eval_after_full_data_pass_matches_train_mode() {
    let spec = MlpSpec::uniform(vec![2, 6, 2], Activation::Tanh, true, 1e-3).unwrap();
    let state = MlpState::init(&spec, 21);
    let data = random_batch(30, 2, 2, 22);
    let refreshed = recompute_bn_stats(&state, [&data]).unwrap().state;
    let train = loss(&refreshed, &data, Mode::Train).unwrap();
    let eval = loss(&refreshed, &data, Mode::Eval).unwrap();
    // Eval adds BN_EPS the same way; only the variance estimator rounding differs.
    assert!((train - eval).abs() < 1e-12);
}

#[test]
fn loss_is_permutation_invariant() {
    let spec = MlpSpec::uniform(vec![3, 8, 3], Activation::Relu, true, 1e-2).unwrap();
    let state = MlpState::init(&spec, 30);
    let batch = random_batch(12, 3, 3, 31);
    let perm: Vec<usize> = (0..12).rev().collect();
    let shuffled = batch.gather(&perm);
    for mode in [Mode::Train, Mode::Eval] {
        let a = loss(&state, &batch, mode).unwrap();
        let b = loss(&state, &shuffled, mode).unwrap();
        assert!((a - b).abs() < 1e-12, "{mode:?}: {a} vs {b}");
    }
}

#[test]
fn bad_label_is_rejected() {
    let spec = MlpSpec::uniform(vec![1, 2], Activation::Relu, false, 0.0).unwrap();
    let state = MlpState::init(&spec, 0);
    let batch = Batch::new(vec![0.0], 1, vec![2]).unwrap();
    assert!(loss_and_grad(&state, &batch).is_err());
}

proptest! {
    #[test]
    fn params_round_trip_bit_exact(seed in any::<u64>(), bn in any::<bool>()) {
        let spec = MlpSpec::uniform(vec![3, 4, 2], Activation::Tanh, bn, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1e3..1e3)).collect();
        let state = MlpState::from_params(&spec, ParamVector::from_vec(values.clone())).unwrap();
        let back = state.into_params().into_vec();
        prop_assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn l2_penalty_only_adds(seed in 0u64..500, lambda in 1e-4f64..1.0) {
        let spec = MlpSpec::uniform(vec![2, 3, 2], Activation::Relu, true, lambda).unwrap();
        let state = MlpState::init(&spec, seed);
        let plain = state.with_params(state.params().clone()).unwrap();
        let unreg = MlpState::from_parts(spec.with_l2_coeff(0.0).unwrap(), plain.params().clone(), plain.bn_stats().to_vec()).unwrap();
        let batch = random_batch(5, 2, 2, seed);
        let with = loss(&state, &batch, Mode::Train).unwrap();
        let without = loss(&unreg, &batch, Mode::Train).unwrap();
        prop_assert!(with > without);
    }
}

#[test]
fn l2_penalty_equal_iff_weights_zero() {
    let spec = MlpSpec::uniform(vec![2, 3, 2], Activation::Relu, false, 0.5).unwrap();
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        values[layer.bias] = 0.25;
    }
    let state = state_with(&spec, values.clone());
    let unreg = state_with(&spec.with_l2_coeff(0.0).unwrap(), values);
    let batch = random_batch(5, 2, 2, 1);
    assert_eq!(loss(&state, &batch, Mode::Eval).unwrap(), loss(&unreg, &batch, Mode::Eval).unwrap());
}
