use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::stats::loglog_slope;

fn gaussian_samples(d: usize, n: usize, seed: u64) -> (Vec<DVector<f64>>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 + i as f64 * 0.1 } else if i > j { 0.2 } else { 0.0 });
    let samples = (0..n)
        .map(|_| &l * DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    (samples, &l * l.transpose())
}

fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    g.qr().q()
}

#[test]
fn noiseless_iterates_collapse_onto_the_minimum() {
    let p = QuadraticProblem::new(
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
        DVector::from_vec(vec![3.0, -1.0]),
        DMatrix::zeros(2, 2),
    )
    .unwrap();
    let (xs, stats) = simulate_sgd(&p, 0.3, 200, 40, 0).unwrap();
    assert!((xs.last().unwrap() - p.w_star()).norm() < 1e-12);
    assert!(stats.empirical_cov.amax() < 1e-20);
    assert!(ellipsoid_check(&stats, 2).is_err());
    let curve = averaging_convergence(&p, 0.3, 100, 0, 1).unwrap();
    assert!(curve.avg_err.iter().all(|e| *e == 0.0));
}

#[test]
fn one_dimensional_mean_is_unbiased() {
    let p = QuadraticProblem::diagonal(&[1.0], 1.0).unwrap();
    let alpha = 0.1;
    let (xs, stats) = simulate_sgd(&p, alpha, 200_000, 1000, 7).unwrap();
    // AR(1) with coefficient rho: var = alpha / (2 - alpha), inflation (1 + rho) / (1 - rho).
    let rho = 1.0 - alpha;
    let var = alpha / (2.0 - alpha);
    let se = (var * (1.0 + rho) / (1.0 - rho) / xs.len() as f64).sqrt();
    assert!(stats.empirical_mean[0].abs() < 3.0 * se, "{} vs {se}", stats.empirical_mean[0]);
    assert!((stats.empirical_cov[(0, 0)] / var - 1.0).abs() < 0.1);
}

#[test]
fn smaller_step_shrinks_the_spread() {
    let p = QuadraticProblem::diagonal(&spread_curvatures(5), 1.0).unwrap();
    let (_, big) = simulate_sgd(&p, 0.2, 40_000, 8_000, 1).unwrap();
    let (_, small) = simulate_sgd(&p, 0.1, 40_000, 8_000, 1).unwrap();
    for i in 0..5 {
        assert!(small.empirical_cov[(i, i)] < big.empirical_cov[(i, i)]);
    }
}

#[test]
fn spread_is_linear_in_the_step_over_a_decade() {
    let p = QuadraticProblem::diagonal(&spread_curvatures(4), 1.0).unwrap();
    let (_, hi) = simulate_sgd(&p, 0.05, 200_000, 40_000, 2).unwrap();
    let (_, lo) = simulate_sgd(&p, 0.005, 400_000, 80_000, 3).unwrap();
    let ratio = hi.empirical_cov.trace() / lo.empirical_cov.trace() / 10.0;
    assert!((0.7..=1.3).contains(&ratio), "{ratio}");
}

#[test]
fn exact_gaussian_samples_sit_on_the_ellipsoid() {
    let (samples, _) = gaussian_samples(20, 100_000, 5);
    let stats = StationaryStats::from_samples(&samples, &DVector::zeros(20)).unwrap();
    let ratio = ellipsoid_check(&stats, 20).unwrap();
    assert!((0.97..=1.03).contains(&ratio), "{ratio}");
}

#[test]
fn almost_no_mass_near_the_center_in_high_dimension() {
    let (samples, _) = gaussian_samples(100, 5_000, 6);
    let stats = StationaryStats::from_samples(&samples, &DVector::zeros(100)).unwrap();
    let m = stats.mahalanobis_sq.unwrap();
    let inside = m.iter().filter(|v| **v < 25.0).count() as f64 / m.len() as f64;
    assert!(inside < 0.01, "{inside}");
}

#[test]
fn too_few_samples_are_rejected() {
    let (samples, _) = gaussian_samples(20, 150, 1);
    let stats = StationaryStats::from_samples(&samples, &DVector::zeros(20)).unwrap();
    assert!(ellipsoid_check(&stats, 20).is_err());
}

#[test]
fn unstable_step_and_bad_matrices_are_rejected() {
    let p = QuadraticProblem::diagonal(&[1.0, 4.0], 1.0).unwrap();
    assert!(matches!(simulate_sgd(&p, 0.5, 10, 2, 0), Err(Error::Domain(_))));
    assert!(simulate_sgd(&p, 0.4, 10, 10, 0).is_err());
    let not_pd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(QuadraticProblem::new(not_pd.clone(), DVector::zeros(2), DMatrix::identity(2, 2)).is_err());
    assert!(QuadraticProblem::new(DMatrix::identity(2, 2), DVector::zeros(2), not_pd).is_err());
}

#[test]
fn same_seed_same_trajectory() {
    let p = QuadraticProblem::diagonal(&spread_curvatures(3), 0.5).unwrap();
    let a = simulate_sgd(&p, 0.1, 500, 100, 9).unwrap().0;
    let b = simulate_sgd(&p, 0.1, 500, 100, 9).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn averaging_error_is_rotation_invariant() {
    let d = 6;
    let p = QuadraticProblem::new(
        DMatrix::from_diagonal(&DVector::from_vec(spread_curvatures(d))),
        DVector::from_fn(d, |i, _| i as f64 - 2.0),
        DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.1 }),
    )
    .unwrap();
    let q = random_orthogonal(d, 4);
    let a = averaging_convergence(&p, 0.1, 2000, 3, 2).unwrap();
    let b = averaging_convergence(&p.rotated(&q).unwrap(), 0.1, 2000, 3, 2).unwrap();
    for (x, y) in a.avg_err.iter().zip(&b.avg_err) {
        assert!((x - y).abs() < 1e-10, "{x} {y}");
    }
}

#[test]
fn log_spacing_covers_the_range() {
    let ks = log_spaced(10_000, 10);
    assert_eq!(ks.first(), Some(&1));
    assert_eq!(ks.last(), Some(&10_000));
    assert!(ks.windows(2).all(|w| w[0] < w[1]));
    assert!(ks.contains(&100) && ks.contains(&1000));
}

#[test]
fn averaging_beats_raw_iterates_at_the_square_root_rate() {
    let p = QuadraticProblem::diagonal(&spread_curvatures(10), 1.0).unwrap();
    let c = averaging_convergence(&p, 0.05, 10_000, 21, 16).unwrap();
    let last = c.ks.len() - 1;
    assert_eq!(c.ks[last], 10_000);
    assert!(c.avg_err[last] <= 0.1 * c.raw_rms[last], "{} vs {}", c.avg_err[last], c.raw_rms[last]);
    let (ks, errs): (Vec<f64>, Vec<f64>) = c
        .ks
        .iter()
        .zip(&c.avg_err)
        .filter(|(k, _)| (100..=10_000).contains(*k))
        .map(|(k, e)| (*k as f64, *e))
        .unzip();
    let slope = loglog_slope(&ks, &errs).unwrap();
    assert!((-0.65..=-0.35).contains(&slope), "{slope}");
}
