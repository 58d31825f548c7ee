//! Dense feed-forward networks with optional batch normalization.
//!
//! Hidden layer `l` computes `z = W a + b`, optionally normalizes `z` with batch
//! normalization (`y = gamma * (z - mean) / sqrt(var + eps) + beta`), then applies the
//! activation. The output layer is affine and produces logits.
//!
//! Parameter layout inside a [`ParamVector`], per layer in order: the weight matrix
//! (row-major, `out_dim x in_dim`), the bias, then `gamma` and `beta` when the layer
//! is batch-normalized. Running statistics are held next to the parameters in
//! [`MlpState`] and are never part of the vector.

mod batch;
mod bn;
mod gradcheck;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::ParamVector;

pub use batch::{Batch, Matrix};
pub use bn::{recompute_bn_stats, BnRefresh};
pub use gradcheck::{central_difference, finite_diff_grad, max_relative_error};

/// Added to the variance inside normalization, and the floor for degenerate running variances.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::domain(format!(
                "unknown activation `{other}` (expected relu or tanh)"
            ))),
        }
    }
}

/// Architecture of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    activation: Activation,
    batchnorm: Vec<bool>,
    l2_coeff: f64,
}

/// Offsets of one layer's parameters inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: bool,
    pub weight: usize,
    pub bias: usize,
    /// Offsets of gamma and beta, plus the index into the running-stats list.
    pub bn: Option<BnLayout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnLayout {
    pub gamma: usize,
    pub beta: usize,
    pub stats_index: usize,
}

impl MlpSpec {
    /// `batchnorm` holds one flag per hidden layer (`layer_dims.len() - 2` entries).
    pub fn new(
        layer_dims: Vec<usize>,
        activation: Activation,
        batchnorm: Vec<bool>,
        l2_coeff: f64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::domain("layer_dims needs at least input and output sizes"));
        }
        if layer_dims.contains(&0) {
            return Err(Error::domain("every layer dimension must be >= 1"));
        }
        if batchnorm.len() != layer_dims.len() - 2 {
            return Err(Error::domain(format!(
                "expected {} batchnorm flags (one per hidden layer), got {}",
                layer_dims.len() - 2,
                batchnorm.len()
            )));
        }
        if !(l2_coeff >= 0.0 && l2_coeff.is_finite()) {
            return Err(Error::domain(format!("l2_coeff must be finite and >= 0, got {l2_coeff}")));
        }
        Ok(Self {
            layer_dims,
            activation,
            batchnorm,
            l2_coeff,
        })
    }

    /// Same batch-norm setting on every hidden layer.
    pub fn uniform(layer_dims: Vec<usize>, activation: Activation, batchnorm: bool, l2_coeff: f64) -> Result<Self> {
        let hidden = layer_dims.len().saturating_sub(2);
        Self::new(layer_dims, activation, vec![batchnorm; hidden], l2_coeff)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn batchnorm(&self) -> &[bool] {
        &self.batchnorm
    }

    pub fn l2_coeff(&self) -> f64 {
        self.l2_coeff
    }

    pub fn with_l2_coeff(&self, l2_coeff: f64) -> Result<Self> {
        Self::new(self.layer_dims.clone(), self.activation, self.batchnorm.clone(), l2_coeff)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        let mut stats_index = 0;
        let n = self.num_layers();
        (0..n)
            .map(|l| {
                let in_dim = self.layer_dims[l];
                let out_dim = self.layer_dims[l + 1];
                let hidden = l + 1 < n;
                let weight = offset;
                let bias = weight + in_dim * out_dim;
                offset = bias + out_dim;
                let bn = if hidden && self.batchnorm[l] {
                    let layout = BnLayout {
                        gamma: offset,
                        beta: offset + out_dim,
                        stats_index,
                    };
                    offset += 2 * out_dim;
                    stats_index += 1;
                    Some(layout)
                } else {
                    None
                };
                LayerLayout {
                    in_dim,
                    out_dim,
                    hidden,
                    weight,
                    bias,
                    bn,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim + if l.bn.is_some() { 2 * l.out_dim } else { 0 })
            .sum()
    }

    /// Widths of the batch-normalized layers, in order.
    pub fn bn_widths(&self) -> Vec<usize> {
        self.layers()
            .iter()
            .filter(|l| l.bn.is_some())
            .map(|l| l.out_dim)
            .collect()
    }

    /// Sum of squared weight-matrix entries (biases and BN parameters excluded).
    pub fn weight_sq_norm(&self, params: &ParamVector) -> f64 {
        self.layers()
            .iter()
            .map(|l| {
                params.as_slice()[l.weight..l.bias]
                    .iter()
                    .map(|w| w * w)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Running statistics for one batch-normalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

/// A network: architecture, parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpState {
    spec: MlpSpec,
    params: ParamVector,
    bn_stats: Vec<BnStats>,
}

impl MlpState {
    /// Glorot-uniform weights, zero biases, `gamma = 1`, `beta = 0`, identity running stats.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; spec.param_count()];
        for layer in spec.layers() {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut values[layer.weight..layer.bias] {
                *w = rng.random_range(-limit..limit);
            }
            if let Some(bn) = layer.bn {
                values[bn.gamma..bn.beta].fill(1.0);
            }
        }
        let bn_stats = spec.bn_widths().into_iter().map(BnStats::identity).collect();
        Self {
            spec: spec.clone(),
            params: ParamVector::from_vec(values),
            bn_stats,
        }
    }

    /// Wraps `params` with identity running statistics.
    pub fn from_params(spec: &MlpSpec, params: ParamVector) -> Result<Self> {
        let bn_stats = spec.bn_widths().into_iter().map(BnStats::identity).collect();
        Self::from_parts(spec.clone(), params, bn_stats)
    }

    pub fn from_parts(spec: MlpSpec, params: ParamVector, bn_stats: Vec<BnStats>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if !params.is_finite() {
            return Err(Error::Numeric {
                layer: "parameters".into(),
                detail: "non-finite parameter value".into(),
            });
        }
        let widths = spec.bn_widths();
        if widths.len() != bn_stats.len()
            || widths
                .iter()
                .zip(&bn_stats)
                .any(|(&w, s)| s.mean.len() != w || s.var.len() != w)
        {
            return Err(Error::shape("batch-norm statistics do not match the spec"));
        }
        Ok(Self {
            spec,
            params,
            bn_stats,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    /// Same architecture and running statistics, different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::from_parts(self.spec.clone(), params, self.bn_stats.clone())
    }

    pub(crate) fn set_bn_stats(&mut self, stats: Vec<BnStats>) {
        self.bn_stats = stats;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch normalization uses the statistics of the current batch.
    Train,
    /// Batch normalization uses the stored running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Input to the layer, `n x in_dim`.
    input: Vec<f64>,
    /// `W a + b` before normalization, `n x out_dim`.
    pre_norm: Vec<f64>,
    /// Argument of the activation (after normalization when present).
    pre_act: Vec<f64>,
    bn: Option<BnCache>,
}

/// Activations recorded by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    mode: Mode,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// Pre-normalization activations of the `k`-th batch-normalized layer (`n x width`).
    pub(crate) fn bn_inputs(&self, k: usize) -> Option<&[f64]> {
        self.layers
            .iter()
            .filter(|l| l.bn.is_some())
            .nth(k)
            .map(|l| l.pre_norm.as_slice())
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }
}

fn check_finite(values: &[f64], layer: usize, what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: format!("layer {layer}"),
            detail: format!("{what} produced {v}"),
        });
    }
    Ok(())
}

/// Runs the network on `batch`, returning logits (`n x output_dim`) and the cache.
pub fn forward(state: &MlpState, batch: &Batch, mode: Mode) -> Result<(Matrix, ForwardCache)> {
    let spec = &state.spec;
    if batch.dim() != spec.input_dim() {
        return Err(Error::shape(format!(
            "batch has {} features, network expects {}",
            batch.dim(),
            spec.input_dim()
        )));
    }
    let n = batch.len();
    let p = state.params.as_slice();
    let mut act = batch.inputs().to_vec();
    let mut caches = Vec::with_capacity(spec.num_layers());

    for (l, layer) in spec.layers().iter().enumerate() {
        let (din, dout) = (layer.in_dim, layer.out_dim);
        let w = &p[layer.weight..layer.bias];
        let b = &p[layer.bias..layer.bias + dout];
        let mut z = vec![0.0; n * dout];
        for r in 0..n {
            let a_row = &act[r * din..(r + 1) * din];
            let z_row = &mut z[r * dout..(r + 1) * dout];
            for (o, zo) in z_row.iter_mut().enumerate() {
                let w_row = &w[o * din..(o + 1) * din];
                *zo = b[o] + w_row.iter().zip(a_row).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
        }
        check_finite(&z, l, "affine map")?;

        if !layer.hidden {
            caches.push(LayerCache {
                input: act,
                pre_norm: Vec::new(),
                pre_act: Vec::new(),
                bn: None,
            });
            let logits = Matrix::new(n, dout, z)?;
            return Ok((logits, ForwardCache { n, mode, layers: caches }));
        }

        let (pre_act, bn_cache) = match layer.bn {
            None => (z.clone(), None),
            Some(bn) => {
                let gamma = &p[bn.gamma..bn.gamma + dout];
                let beta = &p[bn.beta..bn.beta + dout];
                let (mean, var) = match mode {
                    Mode::Train => column_moments(&z, n, dout),
                    Mode::Eval => {
                        let s = &state.bn_stats[bn.stats_index];
                        (s.mean.clone(), s.var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; n * dout];
                let mut y = vec![0.0; n * dout];
                for r in 0..n {
                    for j in 0..dout {
                        let idx = r * dout + j;
                        xhat[idx] = (z[idx] - mean[j]) * inv_std[j];
                        y[idx] = gamma[j] * xhat[idx] + beta[j];
                    }
                }
                (
                    y,
                    Some(BnCache { xhat, inv_std }),
                )
            }
        };
        let out: Vec<f64> = pre_act.iter().map(|&x| spec.activation.apply(x)).collect();
        check_finite(&out, l, "activation")?;
        caches.push(LayerCache {
            input: act,
            pre_norm: z,
            pre_act,
            bn: bn_cache,
        });
        act = out;
    }
    unreachable!("the last layer always returns")
}

/// Per-column mean and biased variance of an `n x cols` row-major block (two-pass).
fn column_moments(z: &[f64], n: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for r in 0..n {
        for j in 0..cols {
            mean[j] += z[r * cols + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; cols];
    for r in 0..n {
        for j in 0..cols {
            let d = z[r * cols + j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

/// Row-wise softmax via the max-shifted log-sum-exp.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Class probabilities with running statistics (eval mode).
pub fn predict_proba(state: &MlpState, batch: &Batch) -> Result<Matrix> {
    let (logits, _) = forward(state, batch, Mode::Eval)?;
    Ok(softmax(&logits))
}

fn check_labels(batch: &Batch, classes: usize) -> Result<()> {
    if let Some(&y) = batch.labels().iter().find(|&&y| y >= classes) {
        return Err(Error::shape(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy plus `l2_coeff / 2 * ||W||^2`.
pub fn loss(state: &MlpState, batch: &Batch, mode: Mode) -> Result<f64> {
    check_labels(batch, state.spec.output_dim())?;
    let (logits, _) = forward(state, batch, mode)?;
    Ok(cross_entropy(&logits, batch.labels()) + penalty(state))
}

fn penalty(state: &MlpState) -> f64 {
    0.5 * state.spec.l2_coeff * state.spec.weight_sq_norm(&state.params)
}

fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let n = logits.rows();
    (0..n)
        .map(|r| log_sum_exp(logits.row(r)) - logits.get(r, labels[r]))
        .sum::<f64>()
        / n as f64
}

/// Regularized loss and classification error, both in eval mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub error: f64,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error
    }
}

pub fn evaluate(state: &MlpState, batch: &Batch) -> Result<Metrics> {
    check_labels(batch, state.spec.output_dim())?;
    let (logits, _) = forward(state, batch, Mode::Eval)?;
    let wrong = (0..logits.rows())
        .filter(|&r| logits.argmax_row(r) != batch.labels()[r])
        .count();
    Ok(Metrics {
        loss: cross_entropy(&logits, batch.labels()) + penalty(state),
        error: wrong as f64 / batch.len() as f64,
    })
}

/// Train-mode loss and its gradient with respect to every parameter.
pub fn loss_and_grad(state: &MlpState, batch: &Batch) -> Result<(f64, ParamVector)> {
    let spec = &state.spec;
    check_labels(batch, spec.output_dim())?;
    let (logits, cache) = forward(state, batch, Mode::Train)?;
    let n = batch.len();
    let k = spec.output_dim();

    let mut d_logits = vec![0.0; n * k];
    let mut ce = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        let y = batch.labels()[r];
        ce += lse - row[y];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            d_logits[r * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let loss = ce / n as f64 + penalty(state);

    let mut grad = vec![0.0; spec.param_count()];
    backward(state, &cache, d_logits, &mut grad);
    let lambda = spec.l2_coeff;
    if lambda > 0.0 {
        let p = state.params.as_slice();
        for layer in spec.layers() {
            for i in layer.weight..layer.bias {
                grad[i] += lambda * p[i];
            }
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            layer: "gradient".into(),
            detail: format!("non-finite gradient at coordinate {i}"),
        });
    }
    Ok((loss, ParamVector::from_vec(grad)))
}

fn backward(state: &MlpState, cache: &ForwardCache, d_logits: Vec<f64>, grad: &mut [f64]) {
    let spec = &state.spec;
    let p = state.params.as_slice();
    let layers = spec.layers();
    let n = cache.n;
    let mut d_out = d_logits;

    for (l, layer) in layers.iter().enumerate().rev() {
        let (din, dout) = (layer.in_dim, layer.out_dim);
        let c = &cache.layers[l];

        let dz = if layer.hidden {
            // The layer's output is the next layer's input.
            let out = &cache.layers[l + 1].input;
            let mut dy = d_out;
            for (idx, d) in dy.iter_mut().enumerate() {
                *d *= spec.activation.derivative(c.pre_act[idx], out[idx]);
            }
            match (&layer.bn, &c.bn) {
                (Some(bn), Some(bc)) => {
                    let gamma = &p[bn.gamma..bn.gamma + dout];
                    let mut dz = vec![0.0; n * dout];
                    for j in 0..dout {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for r in 0..n {
                            let idx = r * dout + j;
                            sum_dy += dy[idx];
                            sum_dy_xhat += dy[idx] * bc.xhat[idx];
                        }
                        grad[bn.gamma + j] += sum_dy_xhat;
                        grad[bn.beta + j] += sum_dy;
                        let scale = gamma[j] * bc.inv_std[j];
                        for r in 0..n {
                            let idx = r * dout + j;
                            dz[idx] = match cache.mode {
                                Mode::Train => {
                                    scale
                                        * (dy[idx]
                                            - sum_dy / n as f64
                                            - bc.xhat[idx] * sum_dy_xhat / n as f64)
                                }
                                Mode::Eval => scale * dy[idx],
                            };
                        }
                    }
                    dz
                }
                _ => dy,
            }
        } else {
            d_out
        };

        for r in 0..n {
            let a_row = &c.input[r * din..(r + 1) * din];
            for o in 0..dout {
                let g = dz[r * dout + o];
                if g == 0.0 {
                    continue;
                }
                grad[layer.bias + o] += g;
                let gw = &mut grad[layer.weight + o * din..layer.weight + (o + 1) * din];
                for (gwi, ai) in gw.iter_mut().zip(a_row) {
                    *gwi += g * ai;
                }
            }
        }

        if l == 0 {
            break;
        }
        let w = &p[layer.weight..layer.bias];
        let mut d_in = vec![0.0; n * din];
        for r in 0..n {
            let d_row = &mut d_in[r * din..(r + 1) * din];
            for o in 0..dout {
                let g = dz[r * dout + o];
                if g == 0.0 {
                    continue;
                }
                for (di, wi) in d_row.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                    *di += g * wi;
                }
            }
        }
        d_out = d_in;
    }
}

#[cfg(test)]
mod tests;
