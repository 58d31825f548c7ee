//! SGD with momentum plus an equal-weight running average of captured iterates.
//!
//! The loop follows the classic weight-averaging recipe: start from a (usually
//! pretrained) point, take minibatch steps under a schedule, and at every capture
//! point fold the current weights into the running mean. After the last iteration
//! the averaged weights get one batch-norm statistics pass over the training set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, evaluate, loss_and_grad, recompute_bn_stats, Batch, MlpSpec, MlpState};
use crate::param::{live_buffers, ParamVector};
use crate::schedules::{is_capture_point, LrSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub batch_size: usize,
    pub iters: u64,
    pub capture_every: u64,
    pub seed: u64,
    pub swa_enabled: bool,
    /// Count the starting weights as the first averaged model.
    pub include_init: bool,
    /// Keep a copy of the weights at every capture point in the trajectory log.
    pub log_snapshots: bool,
}

impl TrainerConfig {
    /// Plain SGD under `schedule`, no averaging.
    pub fn sgd(schedule: LrSchedule, iters: u64, batch_size: usize, seed: u64) -> Self {
        Self {
            schedule,
            momentum: 0.9,
            batch_size,
            iters,
            capture_every: 1,
            seed,
            swa_enabled: false,
            include_init: true,
            log_snapshots: false,
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.batch_size > n_train {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds the {n_train} training examples", self.batch_size),
            ));
        }
        if self.capture_every == 0 {
            return Err(Error::config("capture_every", "must be >= 1"));
        }
        if self.swa_enabled && self.iters < self.capture_every {
            return Err(Error::config(
                "iters",
                format!(
                    "{} iterations never reach a capture point (capture_every = {})",
                    self.iters, self.capture_every
                ),
            ));
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self, n_train: usize) -> u64 {
        (n_train / self.batch_size.max(1)).max(1) as u64
    }

    fn fingerprint(&self) -> u32 {
        crc32fast::hash(format!("{self:?}").as_bytes())
    }
}

/// Running weight average.
///
/// `avg` always equals the mean of the vectors folded in so far; `n_models` counts
/// the captures only, so the starting point does not show up in it even when it is
/// part of the average.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaState {
    avg: ParamVector,
    n_models: u64,
    weight: u64,
}

impl SwaState {
    /// Average seeded with the starting weights. With `include_init` they count as
    /// one model; otherwise the first capture replaces them.
    pub fn start(init: ParamVector, include_init: bool) -> Self {
        Self {
            avg: init,
            n_models: 0,
            weight: include_init as u64,
        }
    }

    /// An average over `n_models` vectors, none of them the initialization.
    pub fn from_parts(avg: ParamVector, n_models: u64) -> Self {
        Self {
            avg,
            n_models,
            weight: n_models,
        }
    }

    pub fn avg(&self) -> &ParamVector {
        &self.avg
    }

    pub fn into_avg(self) -> ParamVector {
        self.avg
    }

    pub fn n_models(&self) -> u64 {
        self.n_models
    }

    /// Number of vectors currently in the mean.
    pub fn averaged(&self) -> u64 {
        self.weight
    }

    /// `avg <- (avg * m + w) / (m + 1)` where `m` is the number of averaged vectors.
    pub fn update(&mut self, w: &ParamVector) -> Result<()> {
        self.avg.check_same_layout(w)?;
        let m = self.weight as f64;
        for (a, x) in self.avg.as_mut_slice().iter_mut().zip(w.iter()) {
            *a = (*a * m + x) / (m + 1.0);
        }
        self.n_models += 1;
        self.weight += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iter: u64,
    pub params: ParamVector,
    /// Minibatch loss of the step that produced these weights.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub snapshots: Vec<Snapshot>,
    pub config_hash: u32,
    pub seed: u64,
}

/// One row of a training curve. `swa_test_err` is present once averaging is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iter: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub test_err: f64,
    pub swa_test_err: Option<f64>,
}

/// Periodic evaluation during a run. Each evaluation refreshes batch-norm statistics
/// for the models it scores, so keep `every` coarse.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub test: &'a Batch,
    pub every: u64,
}

#[derive(Debug, Clone)]
pub struct SwaRun {
    /// Averaged weights with refreshed batch-norm statistics; equal to `sgd_model`
    /// when averaging is disabled.
    pub swa_model: MlpState,
    /// Last SGD iterate, batch-norm statistics refreshed the same way.
    pub sgd_model: MlpState,
    pub log: TrajectoryLog,
    pub curve: Vec<CurveRow>,
    pub n_models: u64,
    /// Largest number of parameter-sized buffers the loop kept alive between
    /// iterations, logged snapshots excluded.
    pub peak_resident_buffers: usize,
}

/// `v <- momentum * v + grad; w <- w - alpha * v`.
pub fn momentum_update(w: &mut [f64], velocity: &mut [f64], grad: &[f64], alpha: f64, momentum: f64) {
    for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *vi = momentum * *vi + gi;
        *wi -= alpha * *vi;
    }
}

/// One minibatch step. Returns the loss at the weights before the step; on error
/// neither `state` nor `velocity` is modified.
pub fn sgd_step(
    state: &mut MlpState,
    velocity: &mut ParamVector,
    batch: &Batch,
    alpha: f64,
    momentum: f64,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("learning rate must be > 0, got {alpha}")));
    }
    state.params().check_same_layout(velocity)?;
    let (loss, grad) = loss_and_grad(state, batch)?;
    momentum_update(
        state.params_mut().as_mut_slice(),
        velocity.as_mut_slice(),
        grad.as_slice(),
        alpha,
        momentum,
    );
    Ok(loss)
}

/// Shuffle-each-epoch sampler without replacement; a trailing partial batch is dropped.
#[derive(Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_indices(&mut self, batch_size: usize) -> &[usize] {
        if self.pos + batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + batch_size];
        self.pos += batch_size;
        out
    }
}

/// Fresh batch-norm statistics from one pass over the full training set.
pub fn refresh_bn(state: &MlpState, train: &Batch) -> Result<MlpState> {
    Ok(recompute_bn_stats(state, [train])?.state)
}

pub fn run_swa(init: &MlpState, train: &Batch, cfg: &TrainerConfig) -> Result<SwaRun> {
    run_swa_monitored(init, train, cfg, None)
}

pub fn run_swa_monitored(
    init: &MlpState,
    train: &Batch,
    cfg: &TrainerConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<SwaRun> {
    cfg.validate(train.len())?;
    let ipe = cfg.iters_per_epoch(train.len());
    let baseline = live_buffers();

    let mut state = init.clone();
    let mut velocity = ParamVector::zeros(state.params().len());
    let mut swa = cfg
        .swa_enabled
        .then(|| SwaState::start(init.params().clone(), cfg.include_init));
    let mut sampler = EpochSampler::new(train.len(), cfg.seed ^ 0x5eed_5a3b_1e00_0001);
    let mut log = TrajectoryLog {
        snapshots: Vec::new(),
        config_hash: cfg.fingerprint(),
        seed: cfg.seed,
    };
    let mut curve = Vec::new();
    let mut peak = live_buffers() - baseline;

    for i in 1..=cfg.iters {
        let alpha = cfg.schedule.lr_at(i, ipe)?;
        let batch = train.gather(sampler.next_indices(cfg.batch_size));
        let loss = sgd_step(&mut state, &mut velocity, &batch, alpha, cfg.momentum)?;

        if let Some(avg) = swa.as_mut() {
            if is_capture_point(i, cfg.capture_every) {
                avg.update(state.params())?;
                if cfg.log_snapshots {
                    log.snapshots.push(Snapshot {
                        iter: i,
                        params: state.params().clone(),
                        train_loss: loss,
                    });
                }
            }
        }

        if let Some(m) = monitor {
            if m.every > 0 && (i % m.every == 0 || i == cfg.iters) {
                let test_err = evaluate(&refresh_bn(&state, train)?, m.test)?.error;
                let swa_test_err = match &swa {
                    Some(avg) if avg.averaged() > 0 => {
                        let model = refresh_bn(&state.with_params(avg.avg().clone())?, train)?;
                        Some(evaluate(&model, m.test)?.error)
                    }
                    _ => None,
                };
                curve.push(CurveRow {
                    iter: i,
                    lr: alpha,
                    train_loss: loss,
                    test_err,
                    swa_test_err,
                });
            }
        }
        peak = peak.max(live_buffers() - baseline - log.snapshots.len());
    }

    let n_models = swa.as_ref().map_or(0, SwaState::n_models);
    let sgd_model = refresh_bn(&state, train)?;
    let swa_model = match swa {
        Some(avg) => refresh_bn(&state.with_params(avg.into_avg())?, train)?,
        None => sgd_model.clone(),
    };
    Ok(SwaRun {
        swa_model,
        sgd_model,
        log,
        curve,
        n_models,
        peak_resident_buffers: peak,
    })
}

/// Conventional training from a seeded initialization; averaging is forced off.
/// Zero iterations returns the initialization unchanged.
pub fn pretrain(spec: &MlpSpec, train: &Batch, cfg: &TrainerConfig) -> Result<MlpState> {
    let init = MlpState::init(spec, cfg.seed);
    pretrain_from(&init, train, cfg)
}

pub fn pretrain_from(init: &MlpState, train: &Batch, cfg: &TrainerConfig) -> Result<MlpState> {
    if cfg.iters == 0 {
        return Ok(init.clone());
    }
    let cfg = TrainerConfig {
        swa_enabled: false,
        ..cfg.clone()
    };
    Ok(run_swa(init, train, &cfg)?.sgd_model)
}

/// Train accuracy helper used by recipes and tests.
pub fn accuracy(state: &MlpState, data: &Batch) -> Result<f64> {
    Ok(model::evaluate(state, data)?.accuracy())
}

#[cfg(test)]
mod tests;
