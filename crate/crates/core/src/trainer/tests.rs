use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::model::{loss, Activation, Mode};

fn two_blobs(n: usize, seed: u64, spread: f64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).unwrap();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let cx = if y == 0 { -1.5 } else { 1.5 };
        inputs.push(cx + noise.sample(&mut rng));
        inputs.push(0.5 * cx + noise.sample(&mut rng));
        labels.push(y);
    }
    Batch::new(inputs, 2, labels).unwrap()
}

#[test]
fn plain_step_on_half_square() {
    let mut w = [1.0];
    let mut v = [0.0];
    let grad = [w[0]];
    momentum_update(&mut w, &mut v, &grad, 0.1, 0.0);
    assert!((w[0] - 0.9).abs() < 1e-15);
}

#[test]
fn momentum_with_zero_gradient_is_pure_inertia() {
    let mut w = [2.0, -1.0];
    let mut v = [1.0, 1.0];
    momentum_update(&mut w, &mut v, &[0.0, 0.0], 0.1, 0.9);
    assert!((w[0] - (2.0 - 0.1 * 0.9)).abs() < 1e-15);
    assert!((w[1] - (-1.0 - 0.1 * 0.9)).abs() < 1e-15);
}

#[test]
fn quadratic_descent_follows_linear_recurrence() {
    // L(w) = k w^2 / 2, alpha < 2 / k: closed form w_t = (1 - alpha k)^t w_0.
    let (k, alpha, w0): (f64, f64, f64) = (3.0, 0.5, 1.7);
    let mut w = [w0];
    let mut v = [0.0];
    let mut prev = w0.abs();
    for t in 1..=100 {
        let g = [k * w[0]];
        momentum_update(&mut w, &mut v, &g, alpha, 0.0);
        let expected = (1.0 - alpha * k).powi(t) * w0;
        assert!((w[0] - expected).abs() <= 1e-12 * w0.abs());
        assert!(w[0].abs() < prev);
        prev = w[0].abs();
    }
}

#[test]
fn heavy_ball_envelope_shrinks() {
    // With momentum the iterates oscillate; the envelope |w| over each window still decays.
    let (k, alpha, m) = (1.0, 0.1, 0.9);
    let mut w = [1.0];
    let mut v = [0.0];
    let mut windows = Vec::new();
    for _ in 0..10 {
        let mut peak: f64 = 0.0;
        for _ in 0..30 {
            let g = [k * w[0]];
            momentum_update(&mut w, &mut v, &g, alpha, m);
            peak = peak.max(w[0].abs());
        }
        windows.push(peak);
    }
    assert!(windows.windows(2).all(|p| p[1] < p[0]), "{windows:?}");
}

#[test]
fn swa_update_examples() {
    let mut s = SwaState::from_parts(ParamVector::from_vec(vec![2.0, 0.0]), 1);
    s.update(&ParamVector::from_vec(vec![0.0, 2.0])).unwrap();
    assert_eq!(s.avg().as_slice(), &[1.0, 1.0]);
    assert_eq!(s.n_models(), 2);

    let init = ParamVector::from_vec(vec![4.0, -2.0]);
    let mut s = SwaState::start(init, true);
    assert_eq!(s.n_models(), 0);
    s.update(&ParamVector::from_vec(vec![0.0, 2.0])).unwrap();
    assert_eq!(s.avg().as_slice(), &[2.0, 0.0]);
    assert_eq!(s.n_models(), 1);

    let mut s = SwaState::start(ParamVector::from_vec(vec![0.0]), true);
    for x in [1.0, 2.0, 3.0] {
        s.update(&ParamVector::from_vec(vec![x])).unwrap();
    }
    let oracle = [0.0, 1.0, 2.0, 3.0].iter().sum::<f64>() / 4.0;
    assert_eq!(s.avg()[0], oracle);
    assert_eq!(oracle, 1.5);
}

#[test]
fn swa_without_init_starts_from_first_capture() {
    let mut s = SwaState::start(ParamVector::from_vec(vec![100.0]), false);
    s.update(&ParamVector::from_vec(vec![3.0])).unwrap();
    assert_eq!(s.avg()[0], 3.0);
    s.update(&ParamVector::from_vec(vec![5.0])).unwrap();
    assert_eq!(s.avg()[0], 4.0);
}

#[test]
fn swa_update_rejects_layout_mismatch() {
    let mut s = SwaState::start(ParamVector::zeros(2), true);
    assert!(matches!(s.update(&ParamVector::zeros(3)), Err(Error::Shape(_))));
}

#[test]
fn averaging_is_affine_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let snaps: Vec<ParamVector> = (0..7)
        .map(|_| ParamVector::from_vec((0..5).map(|_| rng.random_range(-3.0..3.0)).collect()))
        .collect();
    let mut plain = SwaState::start(snaps[0].clone(), true);
    let mut mapped = SwaState::start(snaps[0].scaled(2.0).add_scaled(1.0, &ParamVector::filled(5, 1.0)), true);
    for s in &snaps[1..] {
        plain.update(s).unwrap();
        mapped
            .update(&s.scaled(2.0).add_scaled(1.0, &ParamVector::filled(5, 1.0)))
            .unwrap();
    }
    let expected = plain.avg().scaled(2.0).add_scaled(1.0, &ParamVector::filled(5, 1.0));
    assert!(mapped.avg().max_abs_diff(&expected) < 1e-12);
}

#[test]
fn failed_step_leaves_state_untouched() {
    let spec = MlpSpec::uniform(vec![2, 3, 2], Activation::Relu, false, 0.0).unwrap();
    let mut state = MlpState::init(&spec, 1);
    state.params_mut()[0] = 1e308;
    let batch = Batch::new(vec![1e10, 1e10], 2, vec![0]).unwrap();
    let before = state.clone();
    let mut v = ParamVector::filled(spec.param_count(), 0.5);
    assert!(sgd_step(&mut state, &mut v, &batch, 0.1, 0.9).is_err());
    assert_eq!(state, before);
    assert_eq!(v, ParamVector::filled(spec.param_count(), 0.5));
    assert!(sgd_step(&mut state, &mut v, &batch, 0.0, 0.9).is_err());
}

fn small_net() -> MlpSpec {
    MlpSpec::uniform(vec![2, 8, 2], Activation::Relu, true, 1e-3).unwrap()
}

fn cyclic_cfg(iters: u64) -> TrainerConfig {
    TrainerConfig {
        schedule: LrSchedule::CyclicLinear {
            alpha1: 0.05,
            alpha2: 0.005,
            cycle: 10,
        },
        momentum: 0.9,
        batch_size: 16,
        iters,
        capture_every: 10,
        seed: 42,
        swa_enabled: true,
        include_init: true,
        log_snapshots: true,
    }
}

#[test]
fn disabled_averaging_returns_the_sgd_model() {
    let data = two_blobs(64, 1, 0.8);
    let init = MlpState::init(&small_net(), 2);
    let cfg = TrainerConfig {
        swa_enabled: false,
        ..cyclic_cfg(50)
    };
    let run = run_swa(&init, &data, &cfg).unwrap();
    assert_eq!(run.swa_model, run.sgd_model);
    assert_eq!(run.n_models, 0);
    assert!(run.log.snapshots.is_empty());
}

#[test]
fn zero_gradient_start_is_a_fixed_point() {
    // Linear softmax model, zero weights, full batch, class-balanced and class-wise centred
    // inputs: every gradient entry is exactly zero.
    let spec = MlpSpec::uniform(vec![2, 2], Activation::Relu, false, 0.0).unwrap();
    let init = MlpState::from_params(&spec, ParamVector::zeros(spec.param_count())).unwrap();
    let data = Batch::new(vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0], 2, vec![0, 0, 1, 1]).unwrap();
    let cfg = TrainerConfig {
        schedule: LrSchedule::Constant { alpha1: 0.01 },
        batch_size: 4,
        capture_every: 1,
        ..cyclic_cfg(20)
    };
    let run = run_swa(&init, &data, &cfg).unwrap();
    assert_eq!(run.swa_model.params(), init.params());
    assert_eq!(run.n_models, 20);
}

#[test]
fn average_equals_mean_of_init_and_snapshots() {
    let data = two_blobs(96, 4, 1.0);
    let init = MlpState::init(&small_net(), 5);
    let run = run_swa(&init, &data, &cyclic_cfg(200)).unwrap();
    assert_eq!(run.n_models, 20);
    assert_eq!(run.log.snapshots.len(), 20);
    let iters: Vec<u64> = run.log.snapshots.iter().map(|s| s.iter).collect();
    assert!(iters.windows(2).all(|w| w[0] < w[1]));
    assert!(iters.iter().all(|i| i % 10 == 0));

    let mut members = vec![init.params()];
    members.extend(run.log.snapshots.iter().map(|s| &s.params));
    let oracle = ParamVector::mean_of(&members).unwrap();
    assert!(run.swa_model.params().max_abs_diff(&oracle) < 1e-10);
}

#[test]
fn excluding_init_averages_snapshots_only() {
    let data = two_blobs(96, 4, 1.0);
    let init = MlpState::init(&small_net(), 5);
    let cfg = TrainerConfig {
        include_init: false,
        ..cyclic_cfg(100)
    };
    let run = run_swa(&init, &data, &cfg).unwrap();
    let members: Vec<&ParamVector> = run.log.snapshots.iter().map(|s| &s.params).collect();
    let oracle = ParamVector::mean_of(&members).unwrap();
    assert!(run.swa_model.params().max_abs_diff(&oracle) < 1e-10);
}

#[test]
fn loop_keeps_at_most_three_resident_buffers() {
    let data = two_blobs(64, 6, 1.0);
    let init = MlpState::init(&small_net(), 7);
    for log_snapshots in [false, true] {
        let cfg = TrainerConfig {
            log_snapshots,
            ..cyclic_cfg(60)
        };
        let run = run_swa(&init, &data, &cfg).unwrap();
        assert!(run.peak_resident_buffers <= 3, "{}", run.peak_resident_buffers);
        assert_eq!(run.peak_resident_buffers, 3);
    }
    let sgd_only = TrainerConfig {
        swa_enabled: false,
        ..cyclic_cfg(60)
    };
    assert_eq!(run_swa(&init, &data, &sgd_only).unwrap().peak_resident_buffers, 2);
}

#[test]
fn runs_are_bit_reproducible() {
    let data = two_blobs(64, 8, 1.0);
    let init = MlpState::init(&small_net(), 9);
    let a = run_swa(&init, &data, &cyclic_cfg(80)).unwrap();
    let b = run_swa(&init, &data, &cyclic_cfg(80)).unwrap();
    let bits = |p: &ParamVector| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.swa_model.params()), bits(b.swa_model.params()));
    assert_eq!(a.swa_model.bn_stats(), b.swa_model.bn_stats());
    let c = run_swa(&init, &data, &TrainerConfig { seed: 43, ..cyclic_cfg(80) }).unwrap();
    assert_ne!(bits(a.swa_model.params()), bits(c.swa_model.params()));
}

#[test]
fn configuration_errors() {
    let data = two_blobs(32, 1, 1.0);
    let init = MlpState::init(&small_net(), 1);
    let short = TrainerConfig {
        capture_every: 50,
        ..cyclic_cfg(20)
    };
    assert!(matches!(run_swa(&init, &data, &short), Err(Error::Config { .. })));
    let big_batch = TrainerConfig {
        batch_size: 33,
        ..cyclic_cfg(20)
    };
    assert!(run_swa(&init, &data, &big_batch).is_err());
    let bad_momentum = TrainerConfig {
        momentum: 1.0,
        ..cyclic_cfg(20)
    };
    assert!(run_swa(&init, &data, &bad_momentum).is_err());
}

#[test]
fn sampler_visits_every_example_once_per_epoch() {
    let mut s = EpochSampler::new(10, 0);
    let mut seen: Vec<usize> = Vec::new();
    for _ in 0..5 {
        seen.extend_from_slice(s.next_indices(2));
    }
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}

#[test]
fn average_is_closer_to_the_optimum_than_any_snapshot() {
    // Strongly convex problem: linear softmax regression with an L2 penalty.
    let spec = MlpSpec::uniform(vec![2, 2], Activation::Relu, false, 0.05).unwrap();
    let data = two_blobs(200, 11, 1.2);

    // Reference optimum: long full-batch descent with a small step.
    let mut opt = MlpState::from_params(&spec, ParamVector::zeros(spec.param_count())).unwrap();
    let mut v = ParamVector::zeros(spec.param_count());
    for _ in 0..20_000 {
        sgd_step(&mut opt, &mut v, &data, 0.5, 0.0).unwrap();
    }
    let (_, g) = loss_and_grad(&opt, &data).unwrap();
    assert!(g.norm() < 1e-10, "reference optimum not converged: {}", g.norm());

    let cfg = TrainerConfig {
        schedule: LrSchedule::Constant { alpha1: 0.2 },
        momentum: 0.0,
        batch_size: 4,
        iters: 5_000,
        capture_every: 250,
        seed: 12,
        swa_enabled: true,
        include_init: false,
        log_snapshots: true,
    };
    let run = run_swa(&opt, &data, &cfg).unwrap();
    let swa_dist = run.swa_model.params().sub(opt.params()).norm();
    let closest = run
        .log
        .snapshots
        .iter()
        .map(|s| s.params.sub(opt.params()).norm())
        .fold(f64::INFINITY, f64::min);
    assert!(swa_dist < closest, "swa {swa_dist} vs best snapshot {closest}");
}

fn logistic_regression_accuracy(data: &Batch) -> f64 {
    // Independent check of separability: plain batch gradient descent on the logistic loss.
    let mut w = [0.0; 3];
    for _ in 0..2_000 {
        let mut g = [0.0; 3];
        for i in 0..data.len() {
            let x = data.row(i);
            let y = data.labels()[i] as f64;
            let z = w[0] * x[0] + w[1] * x[1] + w[2];
            let p = 1.0 / (1.0 + (-z).exp());
            g[0] += (p - y) * x[0];
            g[1] += (p - y) * x[1];
            g[2] += p - y;
        }
        for j in 0..3 {
            w[j] -= 0.1 * g[j] / data.len() as f64;
        }
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let x = data.row(i);
            let z = w[0] * x[0] + w[1] * x[1] + w[2];
            (z > 0.0) as usize == data.labels()[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn pretraining_fits_separable_data() {
    let data = two_blobs(200, 13, 0.3);
    assert!(logistic_regression_accuracy(&data) >= 0.99);
    let spec = small_net();
    let budget = 400;
    let cfg = TrainerConfig::sgd(
        LrSchedule::PiecewiseDecay {
            alpha1: 0.05,
            budget_iters: budget,
        },
        budget,
        20,
        14,
    );
    let model = pretrain(&spec, &data, &cfg).unwrap();
    assert!(accuracy(&model, &data).unwrap() >= 0.99);

    let zero = TrainerConfig { iters: 0, ..cfg.clone() };
    assert_eq!(pretrain(&spec, &data, &zero).unwrap(), MlpState::init(&spec, 14));
}

#[test]
fn partial_and_full_budget_pretraining_both_seed_swa() {
    let data = two_blobs(120, 15, 0.9);
    let spec = small_net();
    let budget = 200;
    let schedule = LrSchedule::PiecewiseDecay {
        alpha1: 0.05,
        budget_iters: budget,
    };
    for iters in [budget * 3 / 4, budget] {
        let init = pretrain(&spec, &data, &TrainerConfig::sgd(schedule, iters, 20, 16)).unwrap();
        let run = run_swa(&init, &data, &cyclic_cfg(100)).unwrap();
        assert_eq!(run.n_models, 10);
        assert!(loss(&run.swa_model, &data, Mode::Eval).unwrap().is_finite());
    }
}

#[test]
fn monitor_emits_rows_with_swa_column() {
    let data = two_blobs(64, 17, 1.0);
    let test = two_blobs(64, 18, 1.0);
    let init = MlpState::init(&small_net(), 19);
    let run = run_swa_monitored(&init, &data, &cyclic_cfg(40), Some(Monitor { test: &test, every: 10 })).unwrap();
    assert_eq!(run.curve.len(), 4);
    assert!(run.curve.iter().all(|r| r.swa_test_err.is_some()));
    assert_eq!(run.curve[0].lr, 0.005);
}
