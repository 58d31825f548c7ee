//! Experiment configuration: `[section]` headers and `key = value` lines.
//!
//! Comments start with `#` or `;`. Every key is validated, unknown keys are
//! rejected, and [`dump`] writes a fully resolved file that parses back to an
//! equal [`ExperimentConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DataSource, Generator};
use crate::error::{Error, Result};
use crate::model::{Activation, MlpSpec};
use crate::schedules::LrSchedule;
use crate::trainer::TrainerConfig;

/// Iterations in one training budget for the bundled spirals recipe.
pub const DEFAULT_BUDGET: u64 = 8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cyclic,
    Cosine,
    Piecewise,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Cyclic => "cyclic",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Piecewise => "piecewise",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "cyclic" => Ok(ScheduleKind::Cyclic),
            "cosine" => Ok(ScheduleKind::Cosine),
            "piecewise" => Ok(ScheduleKind::Piecewise),
            other => Err(format!("unknown schedule kind `{other}` (constant, cyclic, cosine, piecewise)")),
        }
    }
}

/// Schedule of the averaging phase. Zero `cycle` means one epoch; zero `budget`
/// means the experiment budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub alpha1: f64,
    pub alpha2: f64,
    pub cycle: u64,
    pub budget: u64,
    pub seg_start: u64,
    pub seg_len: u64,
    pub period: u64,
}

impl ScheduleConfig {
    pub fn resolve(&self, iters_per_epoch: u64, default_budget: u64) -> LrSchedule {
        match self.kind {
            ScheduleKind::Constant => LrSchedule::Constant { alpha1: self.alpha1 },
            ScheduleKind::Cyclic => LrSchedule::CyclicLinear {
                alpha1: self.alpha1,
                alpha2: self.alpha2,
                cycle: self.cycle_len(iters_per_epoch),
            },
            ScheduleKind::Cosine => LrSchedule::CosineSegment {
                base: self.alpha1,
                seg_start: self.seg_start,
                seg_len: self.seg_len,
                period: self.period,
            },
            ScheduleKind::Piecewise => LrSchedule::PiecewiseDecay {
                alpha1: self.alpha1,
                budget_iters: if self.budget == 0 { default_budget } else { self.budget },
            },
        }
    }

    pub fn cycle_len(&self, iters_per_epoch: u64) -> u64 {
        if self.cycle == 0 {
            iters_per_epoch
        } else {
            self.cycle
        }
    }
}

/// Conventional SGD: pretraining and the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha1: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Iterations in one budget.
    pub budget: u64,
    /// Fraction of the budget spent pretraining before averaging starts.
    pub pretrain_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwaConfig {
    pub enabled: bool,
    pub schedule: ScheduleConfig,
    /// Zero picks the cycle length for cyclic schedules and one epoch otherwise.
    pub capture_every: u64,
    pub include_init: bool,
    /// Total budgets (pretraining included) at which averaged models are reported.
    pub budgets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Evaluate a curve row every this many iterations; zero disables curves.
    pub curve_every: u64,
    pub landscape: bool,
    pub ensemble: bool,
    pub rays: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: MlpSpec,
    pub data: DataSource,
    pub train: TrainConfig,
    pub swa: SwaConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn iters_per_epoch(&self, n_train: usize) -> u64 {
        (n_train / self.train.batch_size.max(1)).max(1) as u64
    }

    /// Piecewise-decay SGD over one budget, stopped after `iters`.
    pub fn sgd_trainer(&self, seed: u64, iters: u64) -> TrainerConfig {
        TrainerConfig {
            momentum: self.train.momentum,
            ..TrainerConfig::sgd(
                LrSchedule::PiecewiseDecay {
                    alpha1: self.train.alpha1,
                    budget_iters: self.train.budget,
                },
                iters,
                self.train.batch_size,
                seed,
            )
        }
    }

    pub fn pretrain_iters(&self) -> u64 {
        (self.train.budget as f64 * self.train.pretrain_fraction).round() as u64
    }

    /// Averaging run that ends at `budgets` total budgets.
    pub fn swa_trainer(&self, seed: u64, budgets: f64, n_train: usize) -> TrainerConfig {
        let ipe = self.iters_per_epoch(n_train);
        let total = (self.train.budget as f64 * budgets).round() as u64;
        let capture_every = match (self.swa.capture_every, self.swa.schedule.kind) {
            (0, ScheduleKind::Cyclic) => self.swa.schedule.cycle_len(ipe),
            (0, _) => ipe,
            (c, _) => c,
        };
        TrainerConfig {
            schedule: self.swa.schedule.resolve(ipe, self.train.budget),
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            iters: total.saturating_sub(self.pretrain_iters()),
            capture_every,
            seed: seed.wrapping_add(0x5aa5_0000),
            swa_enabled: self.swa.enabled,
            include_init: self.swa.include_init,
            log_snapshots: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.alpha1 > 0.0 && t.alpha1.is_finite()) {
            return Err(Error::config("train.alpha1", format!("must be finite and > 0, got {}", t.alpha1)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("train.momentum", format!("must lie in [0, 1), got {}", t.momentum)));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if t.budget == 0 {
            return Err(Error::config("train.budget", "must be >= 1 iteration"));
        }
        if !(t.pretrain_fraction > 0.0 && t.pretrain_fraction <= 1.0) {
            return Err(Error::config(
                "train.pretrain_fraction",
                format!("must lie in (0, 1], got {}", t.pretrain_fraction),
            ));
        }
        // Any positive epoch length exercises the same checks.
        self.swa.schedule.resolve(1, t.budget).validate()?;
        if self.swa.enabled {
            if self.swa.budgets.is_empty() {
                return Err(Error::config("swa.budgets", "list at least one budget"));
            }
            if let Some(b) = self.swa.budgets.iter().find(|b| **b <= t.pretrain_fraction) {
                return Err(Error::config(
                    "swa.budgets",
                    format!("budget {b} does not extend past pretraining ({})", t.pretrain_fraction),
                ));
            }
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "list at least one seed"));
        }
        if self.run.rays == 0 {
            return Err(Error::config("run.rays", "must be >= 1"));
        }
        if let DataSource::Synthetic { n_train, .. } = self.data {
            if t.batch_size > n_train {
                return Err(Error::config(
                    "train.batch_size",
                    format!("{} exceeds the {n_train} training examples", t.batch_size),
                ));
            }
        }
        Ok(())
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Table {
    entries: BTreeMap<String, Entry>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse { line, msg: "unterminated section header".into() })?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(Error::Parse { line, msg: format!("invalid section name `{name}`") });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse { line, msg: "empty key".into() });
            }
            if section.is_empty() {
                return Err(Error::Parse { line, msg: format!("key `{key}` appears before any [section]") });
            }
            let full = format!("{section}.{key}");
            if let Some(prev) = entries.get(&full) {
                let prev: &Entry = prev;
                return Err(Error::Parse { line, msg: format!("duplicate key `{full}` (first set on line {})", prev.line) });
            }
            entries.insert(full, Entry { value: value.trim().to_string(), line });
        }
        Ok(Self { entries })
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|e| e.value)
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.take_raw(key).ok_or_else(|| Error::config(key, "required"))?;
        v.parse().map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => parse_list(key, &v),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, e)) => Err(Error::config(key, format!("unknown key (line {})", e.line))),
        }
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::config(key, format!("cannot parse `{s}`: {e}"))))
        .collect()
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut t = Table::parse(text)?;

    let layers: Vec<usize> = parse_list("model.layers", &t.take_raw("model.layers").ok_or_else(|| Error::config("model.layers", "required"))?)?;
    let activation: Activation = t.take("model.activation", Activation::Relu)?;
    let hidden = layers.len().saturating_sub(2);
    let batchnorm: Vec<bool> = t.take_list("model.batchnorm", vec![true])?;
    let batchnorm = if batchnorm.len() == 1 { vec![batchnorm[0]; hidden] } else { batchnorm };
    let l2: f64 = t.take("model.l2", 5e-4)?;
    let model = MlpSpec::new(layers, activation, batchnorm, l2).map_err(|e| Error::config("model", e.to_string()))?;

    let generator: String = t.require("data.generator")?;
    let data = if generator == "csv" {
        DataSource::Csv {
            train_path: t.require("data.train_path")?,
            test_path: t.require("data.test_path")?,
            label_column: t.take("data.label_column", "label".to_string())?,
        }
    } else {
        let generator = match generator.as_str() {
            "spirals" => Generator::Spirals,
            "xor" => Generator::Xor,
            "blobs" => Generator::Blobs { classes: t.take("data.classes", 3)? },
            other => {
                return Err(Error::config("data.generator", format!("unknown generator `{other}` (blobs, spirals, xor, csv)")))
            }
        };
        let source = DataSource::Synthetic {
            generator,
            n_train: t.take("data.n_train", 1000)?,
            n_test: t.take("data.n_test", 1000)?,
            noise: t.take("data.noise", 0.05)?,
            seed: t.take("data.seed", 0)?,
        };
        if let DataSource::Synthetic { n_train, n_test, noise, .. } = source {
            if n_train == 0 || n_test == 0 {
                return Err(Error::config("data.n_train", "train and test sizes must be >= 1"));
            }
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(Error::config("data.noise", format!("must be finite and >= 0, got {noise}")));
            }
        }
        source
    };

    let train = TrainConfig {
        alpha1: t.take("train.alpha1", 0.1)?,
        momentum: t.take("train.momentum", 0.9)?,
        batch_size: t.take("train.batch_size", 32)?,
        budget: t.take("train.budget", DEFAULT_BUDGET)?,
        pretrain_fraction: t.take("train.pretrain_fraction", 0.75)?,
    };

    let kind: ScheduleKind = t.take("schedule.kind", ScheduleKind::Cyclic)?;
    let schedule = ScheduleConfig {
        kind,
        alpha1: t.take("schedule.alpha1", 0.05)?,
        alpha2: t.take("schedule.alpha2", 0.005)?,
        cycle: t.take("schedule.cycle", 0)?,
        budget: t.take("schedule.budget", 0)?,
        seg_start: t.take("schedule.seg_start", 1600)?,
        seg_len: t.take("schedule.seg_len", 100)?,
        period: t.take("schedule.period", 1800)?,
    };
    let swa = SwaConfig {
        enabled: t.take("swa.enabled", true)?,
        schedule,
        capture_every: t.take("swa.capture_every", 0)?,
        include_init: t.take("swa.include_init", true)?,
        budgets: t.take_list("swa.budgets", vec![1.0, 1.25, 1.5])?,
    };

    let seeds = match t.take_raw("run.seeds") {
        None => (0..5).collect(),
        Some(v) => parse_list("run.seeds", &v)?,
    };
    let run = RunConfig {
        seeds,
        output: t.take("run.output", PathBuf::from("out"))?,
        curve_every: t.take("run.curve_every", 0)?,
        landscape: t.take("run.landscape", false)?,
        ensemble: t.take("run.ensemble", false)?,
        rays: t.take("run.rays", 10)?,
    };
    t.finish()?;

    let cfg = ExperimentConfig { model, data, train, swa, run };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Fully resolved configuration in the input format.
pub fn dump(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let m = &cfg.model;
    let _ = writeln!(s, "[model]");
    let _ = writeln!(s, "layers = {}", join(m.layer_dims()));
    let _ = writeln!(s, "activation = {}", m.activation());
    if !m.batchnorm().is_empty() {
        let _ = writeln!(s, "batchnorm = {}", join(m.batchnorm()));
    }
    let _ = writeln!(s, "l2 = {}", m.l2_coeff());

    let _ = writeln!(s, "\n[data]");
    match &cfg.data {
        DataSource::Synthetic { generator, n_train, n_test, noise, seed } => {
            match generator {
                Generator::Spirals => {
                    let _ = writeln!(s, "generator = spirals");
                }
                Generator::Xor => {
                    let _ = writeln!(s, "generator = xor");
                }
                Generator::Blobs { classes } => {
                    let _ = writeln!(s, "generator = blobs\nclasses = {classes}");
                }
            }
            let _ = writeln!(s, "n_train = {n_train}\nn_test = {n_test}\nnoise = {noise}\nseed = {seed}");
        }
        DataSource::Csv { train_path, test_path, label_column } => {
            let _ = writeln!(
                s,
                "generator = csv\ntrain_path = {}\ntest_path = {}\nlabel_column = {label_column}",
                train_path.display(),
                test_path.display()
            );
        }
    }

    let t = &cfg.train;
    let _ = writeln!(s, "\n[train]");
    let _ = writeln!(
        s,
        "alpha1 = {}\nmomentum = {}\nbatch_size = {}\nbudget = {}\npretrain_fraction = {}",
        t.alpha1, t.momentum, t.batch_size, t.budget, t.pretrain_fraction
    );

    let sc = &cfg.swa.schedule;
    let _ = writeln!(s, "\n[schedule]");
    let _ = writeln!(
        s,
        "kind = {}\nalpha1 = {}\nalpha2 = {}\ncycle = {}\nbudget = {}\nseg_start = {}\nseg_len = {}\nperiod = {}",
        sc.kind.name(),
        sc.alpha1,
        sc.alpha2,
        sc.cycle,
        sc.budget,
        sc.seg_start,
        sc.seg_len,
        sc.period
    );

    let w = &cfg.swa;
    let _ = writeln!(s, "\n[swa]");
    let _ = writeln!(
        s,
        "enabled = {}\ncapture_every = {}\ninclude_init = {}\nbudgets = {}",
        w.enabled,
        w.capture_every,
        w.include_init,
        join(&w.budgets)
    );

    let r = &cfg.run;
    let _ = writeln!(s, "\n[run]");
    let _ = writeln!(
        s,
        "seeds = {}\noutput = {}\ncurve_every = {}\nlandscape = {}\nensemble = {}\nrays = {}",
        join(&r.seeds),
        r.output.display(),
        r.curve_every,
        r.landscape,
        r.ensemble,
        r.rays
    );
    s
}
