//! Prediction averaging over captured snapshots versus weight averaging.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward, predict_proba, softmax, Batch, Matrix, MlpSpec, MlpState, Mode};
use crate::param::ParamVector;
use crate::trainer::refresh_bn;

/// Snapshots `w_i` sharing one architecture, each with its own batch-norm pass,
/// plus their weight-space mean.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    models: Vec<MlpState>,
    center: MlpState,
}

impl SnapshotSet {
    /// Builds the set and refreshes batch-norm statistics of every snapshot and of
    /// the center on `train`. Order is kept: consecutive gaps follow capture order.
    pub fn new(spec: &MlpSpec, snapshots: Vec<ParamVector>, train: &Batch) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::domain("snapshot set is empty"));
        }
        let refs: Vec<&ParamVector> = snapshots.iter().collect();
        let center = ParamVector::mean_of(&refs)?;
        let center = refresh_bn(&MlpState::from_params(spec, center)?, train)?;
        let models = snapshots
            .into_par_iter()
            .map(|p| refresh_bn(&MlpState::from_params(spec, p)?, train))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { models, center })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[MlpState] {
        &self.models
    }

    pub fn center(&self) -> &MlpState {
        &self.center
    }

    /// `Δ_i = w_i - center`.
    pub fn deltas(&self) -> Vec<ParamVector> {
        self.models.iter().map(|m| m.params().sub(self.center.params())).collect()
    }

    /// `max_i ||Δ_i||`.
    pub fn max_delta_norm(&self) -> f64 {
        self.deltas().iter().map(ParamVector::norm).fold(0.0, f64::max)
    }
}

/// Arithmetic mean of the snapshots' class probabilities.
pub fn ensemble_predict(set: &SnapshotSet, batch: &Batch) -> Result<Matrix> {
    let probs = set
        .models
        .par_iter()
        .map(|m| predict_proba(m, batch))
        .collect::<Result<Vec<_>>>()?;
    average(&probs)
}

fn average(probs: &[Matrix]) -> Result<Matrix> {
    let first = probs.first().ok_or_else(|| Error::domain("nothing to average"))?;
    let mut sum = vec![0.0; first.as_slice().len()];
    // Fixed summation order keeps the result independent of thread scheduling.
    for p in probs {
        for (s, v) in sum.iter_mut().zip(p.as_slice()) {
            *s += v;
        }
    }
    let n = probs.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Matrix::new(first.rows(), first.cols(), sum)
}

/// Per-example L2 distance between two probability matrices, averaged over rows.
pub fn mean_row_distance(a: &Matrix, b: &Matrix) -> f64 {
    let total: f64 = (0..a.rows())
        .map(|r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / a.rows() as f64
}

/// Fraction of rows whose argmax labels coincide.
pub fn label_agreement(a: &Matrix, b: &Matrix) -> f64 {
    let same = (0..a.rows()).filter(|&r| a.argmax_row(r) == b.argmax_row(r)).count();
    same as f64 / a.rows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGap {
    /// Mean distance between the ensemble's probabilities and the center's.
    pub ens_vs_center: f64,
    /// Distance between snapshots `i` and `i + 1`, in capture order.
    pub consecutive_gaps: Vec<f64>,
    pub consecutive_agreement: Vec<f64>,
    /// Label agreement between the center and the ensemble.
    pub center_agreement: f64,
}

pub fn gap_report(set: &SnapshotSet, batch: &Batch) -> Result<PredictionGap> {
    if set.len() < 2 {
        return Err(Error::domain("gap report needs at least two snapshots"));
    }
    let probs = set
        .models
        .par_iter()
        .map(|m| predict_proba(m, batch))
        .collect::<Result<Vec<_>>>()?;
    let ens = average(&probs)?;
    let center = predict_proba(&set.center, batch)?;
    let pairs = probs.windows(2);
    Ok(PredictionGap {
        ens_vs_center: mean_row_distance(&ens, &center),
        consecutive_gaps: pairs.clone().map(|p| mean_row_distance(&p[0], &p[1])).collect(),
        consecutive_agreement: pairs.map(|p| label_agreement(&p[0], &p[1])).collect(),
        center_agreement: label_agreement(&center, &ens),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub eps: f64,
    /// Mean pairwise distance between perturbed models.
    pub first_order_gap: f64,
    /// Distance between the perturbed ensemble and the center.
    pub second_order_gap: f64,
}

/// Perturbs `center` to `center + eps * Δ_i` for each direction and measures both
/// gaps at every `eps`. Batch-norm statistics stay fixed at the center's so the
/// network is a smooth function of the weights.
pub fn scaling_law_check(
    center: &MlpState,
    directions: &[ParamVector],
    eps_list: &[f64],
    batch: &Batch,
) -> Result<Vec<ScalingRow>> {
    if directions.len() < 2 {
        return Err(Error::domain("need at least two directions"));
    }
    let mut sum = ParamVector::zeros(center.params().len());
    for d in directions {
        center.params().check_same_layout(d)?;
        sum.axpy(1.0, d);
    }
    if sum.norm() > 1e-8 {
        return Err(Error::domain(format!(
            "directions must be mean-centered, ||sum|| = {:.3e}",
            sum.norm()
        )));
    }
    if let Some(e) = eps_list.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::domain(format!("eps must be finite and >= 0, got {e}")));
    }
    let f_center = eval_proba(center, batch)?;
    eps_list
        .iter()
        .map(|&eps| {
            let probs = directions
                .par_iter()
                .map(|d| eval_proba(&center.with_params(center.params().add_scaled(eps, d))?, batch))
                .collect::<Result<Vec<_>>>()?;
            let mut pair_sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..probs.len() {
                for j in i + 1..probs.len() {
                    pair_sum += mean_row_distance(&probs[i], &probs[j]);
                    pairs += 1;
                }
            }
            Ok(ScalingRow {
                eps,
                first_order_gap: pair_sum / pairs as f64,
                second_order_gap: mean_row_distance(&average(&probs)?, &f_center),
            })
        })
        .collect()
}

fn eval_proba(state: &MlpState, batch: &Batch) -> Result<Matrix> {
    Ok(softmax(&forward(state, batch, Mode::Eval)?.0))
}

/// `n` seeded Gaussian directions with their mean subtracted, so they sum to zero.
pub fn centered_directions(len: usize, n: usize, seed: u64) -> Vec<ParamVector> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mean: Vec<f64> = (0..len).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    raw.into_iter()
        .map(|r| ParamVector::from_vec(r.iter().zip(&mean).map(|(a, m)| a - m).collect()))
        .collect()
}
