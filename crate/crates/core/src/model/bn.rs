use super::{forward, BnStats, MlpState, Mode, BN_EPS};
use crate::error::{Error, Result};
use crate::model::Batch;

/// Result of a statistics pass.
#[derive(Debug, Clone)]
pub struct BnRefresh {
    pub state: MlpState,
    /// Features whose variance was zero and got clamped to [`BN_EPS`].
    pub clamped: usize,
}

/// Welford accumulator over one feature column.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        self.m2 / self.count as f64
    }
}

/// One pass over `batches` in training mode, setting every batch-norm layer's running
/// mean and (biased) variance to the exact aggregate over all examples seen.
///
/// Parameters are untouched. Deeper layers see their inputs normalized with
/// per-batch statistics, exactly as during training; feed the whole dataset as a
/// single batch to make the pass independent of batching.
pub fn recompute_bn_stats<'a, I>(state: &MlpState, batches: I) -> Result<BnRefresh>
where
    I: IntoIterator<Item = &'a Batch>,
{
    let widths = state.spec().bn_widths();
    let mut acc: Vec<Vec<Moments>> = widths.iter().map(|&w| vec![Moments::default(); w]).collect();
    let mut seen = 0usize;

    for batch in batches {
        seen += 1;
        if widths.is_empty() {
            // Still validate the batch against the network.
            forward(state, batch, Mode::Train)?;
            continue;
        }
        let (_, cache) = forward(state, batch, Mode::Train)?;
        for (k, cols) in acc.iter_mut().enumerate() {
            let z = cache.bn_inputs(k).expect("one cache entry per bn layer");
            let w = cols.len();
            for row in z.chunks_exact(w) {
                for (m, &x) in cols.iter_mut().zip(row) {
                    m.push(x);
                }
            }
        }
    }
    if seen == 0 {
        return Err(Error::domain("statistics pass needs at least one batch"));
    }

    let mut clamped = 0;
    let stats = acc
        .iter()
        .map(|cols| {
            let mean = cols.iter().map(|m| m.mean).collect();
            let var = cols
                .iter()
                .map(|m| {
                    let v = m.variance();
                    if v > 0.0 {
                        v
                    } else {
                        clamped += 1;
                        BN_EPS
                    }
                })
                .collect();
            BnStats { mean, var }
        })
        .collect();

    let mut out = state.clone();
    out.set_bn_stats(stats);
    Ok(BnRefresh { state: out, clamped })
}
