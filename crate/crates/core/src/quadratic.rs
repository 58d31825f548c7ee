//! Constant-step SGD on a noisy quadratic: stationary spread of the iterates and
//! convergence of their running average.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// `L(w) = 1/2 (w - w*)^T A (w - w*)` with gradient noise `S z`, `z ~ N(0, I)`,
/// so the noise covariance is `S S^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    a: DMatrix<f64>,
    w_star: DVector<f64>,
    noise_factor: DMatrix<f64>,
    lambda_max: f64,
}

impl QuadraticProblem {
    /// `noise_cov` must be positive definite or exactly zero.
    pub fn new(a: DMatrix<f64>, w_star: DVector<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let d = w_star.len();
        let factor = if noise_cov.iter().all(|v| *v == 0.0) {
            DMatrix::zeros(d, d)
        } else {
            check_symmetric("noise_cov", &noise_cov)?;
            Cholesky::new(noise_cov)
                .ok_or_else(|| Error::domain("noise_cov is not positive definite"))?
                .l()
        };
        Self::with_noise_factor(a, w_star, factor)
    }

    pub fn with_noise_factor(a: DMatrix<f64>, w_star: DVector<f64>, noise_factor: DMatrix<f64>) -> Result<Self> {
        let d = w_star.len();
        if d == 0 {
            return Err(Error::domain("dimension must be >= 1"));
        }
        if a.shape() != (d, d) || noise_factor.shape() != (d, d) {
            return Err(Error::shape(format!("matrices must be {d}x{d}")));
        }
        check_symmetric("A", &a)?;
        if Cholesky::new(a.clone()).is_none() {
            return Err(Error::domain("A is not positive definite"));
        }
        let lambda_max = SymmetricEigen::new(a.clone()).eigenvalues.max();
        Ok(Self {
            a,
            w_star,
            noise_factor,
            lambda_max,
        })
    }

    /// Diagonal curvature `curvatures`, minimum at the origin, isotropic noise `sigma^2 I`.
    pub fn diagonal(curvatures: &[f64], sigma: f64) -> Result<Self> {
        let d = curvatures.len();
        Self::with_noise_factor(
            DMatrix::from_diagonal(&DVector::from_column_slice(curvatures)),
            DVector::zeros(d),
            DMatrix::identity(d, d) * sigma,
        )
    }

    /// The same problem in coordinates rotated by the orthogonal matrix `q`.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Result<Self> {
        let a = q * &self.a * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        Self::with_noise_factor(a, q * &self.w_star, q * &self.noise_factor)
    }

    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn noise_cov(&self) -> DMatrix<f64> {
        &self.noise_factor * self.noise_factor.transpose()
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    fn check_alpha(&self, alpha: f64) -> Result<()> {
        let limit = 2.0 / self.lambda_max;
        if !(alpha > 0.0 && alpha < limit) {
            return Err(Error::domain(format!(
                "step {alpha} outside the stable range (0, {limit:.6})"
            )));
        }
        Ok(())
    }

    /// Iterates `w <- w - alpha (A (w - w*) + S z)` starting from `w*`.
    fn trajectory(&self, alpha: f64, iters: usize, seed: u64, mut visit: impl FnMut(usize, &DVector<f64>)) {
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = self.w_star.clone();
        let mut z = DVector::zeros(d);
        for k in 1..=iters {
            z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let grad = &self.a * (&w - &self.w_star) + &self.noise_factor * &z;
            w -= grad * alpha;
            visit(k, &w);
        }
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::domain(format!("{name} is not symmetric")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryStats {
    pub n_samples: usize,
    pub empirical_mean: DVector<f64>,
    pub empirical_cov: DMatrix<f64>,
    /// `||cov^{-1/2} (z - w*)||^2` per sample; `None` when the covariance is singular.
    pub mahalanobis_sq: Option<Vec<f64>>,
    /// `(k, ||mean of first k samples - w*||)` at log-spaced `k`.
    pub swa_error_curve: Vec<(usize, f64)>,
}

impl StationaryStats {
    pub fn from_samples(samples: &[DVector<f64>], w_star: &DVector<f64>) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::domain("need at least two samples"));
        }
        let d = w_star.len();
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += s;
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = s - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;

        let mahalanobis_sq = Cholesky::new(cov.clone()).map(|chol| {
            let l = chol.l();
            samples
                .iter()
                .map(|s| {
                    let x = l.solve_lower_triangular(&(s - w_star)).expect("cholesky factor is invertible");
                    x.norm_squared()
                })
                .collect()
        });

        let marks = log_spaced(n, 10);
        let mut curve = Vec::with_capacity(marks.len());
        let mut running = DVector::zeros(d);
        let mut next = 0;
        for (i, s) in samples.iter().enumerate() {
            running += s;
            if next < marks.len() && marks[next] == i + 1 {
                curve.push((i + 1, (&running / (i + 1) as f64 - w_star).norm()));
                next += 1;
            }
        }
        Ok(Self {
            n_samples: n,
            empirical_mean: mean,
            empirical_cov: cov,
            mahalanobis_sq,
            swa_error_curve: curve,
        })
    }

    pub fn mahalanobis_sq_mean(&self) -> Option<f64> {
        self.mahalanobis_sq
            .as_ref()
            .map(|m| m.iter().sum::<f64>() / m.len() as f64)
    }
}

/// Integers `1..=n` spaced roughly evenly in `log k`, `per_decade` per factor of ten,
/// always ending at `n`.
pub fn log_spaced(n: usize, per_decade: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    if n == 0 {
        return out;
    }
    let steps = ((n as f64).log10() * per_decade as f64).ceil() as usize;
    for i in 0..=steps {
        let k = (10f64.powf(i as f64 / per_decade as f64).round() as usize).min(n);
        if out.last() != Some(&k) {
            out.push(k);
        }
    }
    if out.last() != Some(&n) {
        out.push(n);
    }
    out
}

/// `d` curvatures evenly spaced over `[0.5, 2]`.
pub fn spread_curvatures(d: usize) -> Vec<f64> {
    (0..d).map(|i| 0.5 + 1.5 * i as f64 / (d - 1).max(1) as f64).collect()
}

/// Runs `iters` steps and summarizes the iterates after `burn_in`.
pub fn simulate_sgd(
    p: &QuadraticProblem,
    alpha: f64,
    iters: usize,
    burn_in: usize,
    seed: u64,
) -> Result<(Vec<DVector<f64>>, StationaryStats)> {
    p.check_alpha(alpha)?;
    if burn_in >= iters {
        return Err(Error::domain(format!("burn-in {burn_in} must be below iters {iters}")));
    }
    let mut kept = Vec::with_capacity(iters - burn_in);
    p.trajectory(alpha, iters, seed, |k, w| {
        if k > burn_in {
            kept.push(w.clone());
        }
    });
    let stats = StationaryStats::from_samples(&kept, p.w_star())?;
    Ok((kept, stats))
}

/// `mahalanobis_sq_mean / d`; close to one for Gaussian samples.
pub fn ellipsoid_check(stats: &StationaryStats, d: usize) -> Result<f64> {
    if stats.n_samples < 10 * d {
        return Err(Error::domain(format!(
            "{} samples are too few for dimension {d}; need at least {}",
            stats.n_samples,
            10 * d
        )));
    }
    let m = stats.mahalanobis_sq_mean().ok_or_else(|| {
        Error::domain("empirical covariance is singular; collect more samples or add noise")
    })?;
    Ok(m / d as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragingCurve {
    pub ks: Vec<usize>,
    /// Root-mean-square over replicas of `||w_bar_k - w*||`.
    pub avg_err: Vec<f64>,
    /// Root-mean-square over replicas and iterates `1..=k` of `||w_i - w*||`.
    pub raw_rms: Vec<f64>,
}

/// Running-average error at log-spaced `k`, aggregated over independent replicas.
pub fn averaging_convergence(
    p: &QuadraticProblem,
    alpha: f64,
    iters: usize,
    seed: u64,
    replicas: usize,
) -> Result<AveragingCurve> {
    p.check_alpha(alpha)?;
    if iters == 0 || replicas == 0 {
        return Err(Error::domain("iters and replicas must be >= 1"));
    }
    let ks = log_spaced(iters, 10);
    let per_replica: Vec<(Vec<f64>, Vec<f64>)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let rseed = seed.wrapping_add((r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut sum = DVector::zeros(p.dim());
            let mut sq = 0.0;
            let (mut avg, mut raw) = (Vec::with_capacity(ks.len()), Vec::with_capacity(ks.len()));
            let mut next = 0;
            p.trajectory(alpha, iters, rseed, |k, w| {
                sum += w;
                sq += (w - p.w_star()).norm_squared();
                if next < ks.len() && ks[next] == k {
                    avg.push((&sum / k as f64 - p.w_star()).norm_squared());
                    raw.push(sq / k as f64);
                    next += 1;
                }
            });
            (avg, raw)
        })
        .collect();
    let rms = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
        (0..ks.len())
            .map(|i| (per_replica.iter().map(|r| pick(r)[i]).sum::<f64>() / replicas as f64).sqrt())
            .collect()
    };
    Ok(AveragingCurve {
        avg_err: rms(|r| &r.0),
        raw_rms: rms(|r| &r.1),
        ks,
    })
}

#[cfg(test)]
mod tests;
