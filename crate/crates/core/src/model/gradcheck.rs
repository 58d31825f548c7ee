use super::{loss, MlpState, Mode};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::param::ParamVector;

/// Central differences `(f(w + h e_j) - f(w - h e_j)) / 2h` for every coordinate.
pub fn central_difference<F>(f: F, w: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        probe[j] = w[j] + h;
        let up = f(&probe)?;
        probe[j] = w[j] - h;
        let down = f(&probe)?;
        probe[j] = w[j];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Numerical gradient of the train-mode loss. Batch statistics are recomputed on
/// every perturbed evaluation because train mode always normalizes with them.
pub fn finite_diff_grad(state: &MlpState, batch: &Batch, h: f64) -> Result<ParamVector> {
    let g = central_difference(
        |w| {
            let probe = state.with_params(ParamVector::from_vec(w.to_vec()))?;
            loss(&probe, batch, Mode::Train)
        },
        state.params().as_slice(),
        h,
    )?;
    Ok(ParamVector::from_vec(g))
}

/// `max_j |a_j - b_j| / (1 + |b_j|)`, with `b` the reference.
pub fn max_relative_error(analytic: &ParamVector, reference: &ParamVector) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}
