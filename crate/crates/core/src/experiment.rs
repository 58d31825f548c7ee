//! Budget protocol end to end: pretrain, SGD baseline, averaged runs, artifacts.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::config::{dump, ExperimentConfig};
use crate::data::{make_dataset, Dataset};
use crate::ensemble::{gap_report, PredictionGap, SnapshotSet};
use crate::error::{Error, Result};
use crate::landscape::{
    ray_profile, segment_profile, width_metric, write_gnuplot, write_ray_csv, write_segment_csv, MlpProbe, PlotKind,
    RayProfile,
};
use crate::model::{evaluate, MlpState};
use crate::report::{num, write_csv};
use crate::schedules::LrSchedule;
use crate::stats::{mean, sample_std};
use crate::trainer::{pretrain_from, run_swa_monitored, CurveRow, Monitor, SwaRun, TrainerConfig};

/// Loss increases at which solution widths are reported.
pub const WIDTH_DELTAS: [f64; 3] = [0.1, 0.3, 1.0];

/// Signed ray distances, symmetric around zero.
pub fn ray_grid(max_t: f64, steps_per_side: usize) -> Vec<f64> {
    let n = steps_per_side as i64;
    (-n..=n).map(|i| max_t * i as f64 / n as f64).collect()
}

/// Segment positions from `-0.5` to `1.5` in steps of `0.05`; `0` and `1` are exact.
pub fn segment_grid() -> Vec<f64> {
    (-10..=30).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidthRow {
    pub delta: f64,
    pub swa: f64,
    pub sgd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub sgd_test_acc: f64,
    /// `(budgets, test accuracy)` of each averaged model.
    pub swa_test_acc: Vec<(f64, f64)>,
    pub widths: Option<Vec<WidthRow>>,
    /// `t` of the train-loss and test-error minima along SWA (t = 0) to SGD (t = 1).
    pub segment_argmins: Option<(f64, f64)>,
    pub gap: Option<PredictionGap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub column: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub seeds: Vec<SeedOutcome>,
    pub summary: Vec<SummaryRow>,
}

fn budget_label(b: f64) -> String {
    format!("{b}")
}

/// Column names of the per-seed results table, in order.
pub fn result_columns(cfg: &ExperimentConfig) -> Vec<String> {
    let mut cols = vec!["sgd_1".to_string()];
    if cfg.swa.enabled {
        cols.extend(cfg.swa.budgets.iter().map(|b| format!("swa_{}", budget_label(*b))));
    }
    cols
}

impl SeedOutcome {
    fn row(&self) -> Vec<f64> {
        let mut r = vec![self.sgd_test_acc];
        r.extend(self.swa_test_acc.iter().map(|(_, a)| *a));
        r
    }
}

pub fn summarize(columns: &[String], outcomes: &[SeedOutcome]) -> Vec<SummaryRow> {
    columns
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let xs: Vec<f64> = outcomes.iter().map(|o| o.row()[j]).collect();
            SummaryRow {
                column: c.clone(),
                mean: mean(&xs),
                std: sample_std(&xs),
                n: xs.len(),
            }
        })
        .collect()
}

fn phase<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_phase(name))
}

fn monitor<'a>(cfg: &ExperimentConfig, data: &'a Dataset) -> Option<Monitor<'a>> {
    (cfg.run.curve_every > 0).then_some(Monitor {
        test: &data.test,
        every: cfg.run.curve_every,
    })
}

pub fn write_curve(path: &Path, curve: &[CurveRow]) -> Result<()> {
    let rows = curve.iter().map(|r| {
        vec![
            r.iter.to_string(),
            num(r.lr),
            num(r.train_loss),
            num(r.test_err),
            r.swa_test_err.map(num).unwrap_or_default(),
        ]
    });
    write_csv(path, &["iter", "lr", "train_loss", "test_err", "swa_test_err"], rows)
}

/// Widths along `rays` random directions around both solutions.
pub fn width_comparison(
    probe: &MlpProbe<'_>,
    swa: &MlpState,
    sgd: &MlpState,
    rays: usize,
    ts: &[f64],
    seed: u64,
) -> Result<(Vec<WidthRow>, Vec<RayProfile>, Vec<RayProfile>)> {
    let at_swa = ray_profile(swa.params(), probe, rays, ts, seed)?;
    let at_sgd = ray_profile(sgd.params(), probe, rays, ts, seed)?;
    let rows = WIDTH_DELTAS
        .iter()
        .map(|&delta| {
            Ok(WidthRow {
                delta,
                swa: width_metric(&at_swa, delta)?.value,
                sgd: width_metric(&at_sgd, delta)?.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, at_swa, at_sgd))
}

/// A cyclic averaging run from `init` with exactly `n` captures, snapshots logged.
pub fn snapshot_run(init: &MlpState, data: &Dataset, base: &TrainerConfig, n: u64) -> Result<SwaRun> {
    let cycle = (base.iters / n).max(1);
    let schedule = match base.schedule {
        LrSchedule::CyclicLinear { alpha1, alpha2, .. } => LrSchedule::CyclicLinear { alpha1, alpha2, cycle },
        other => other,
    };
    let cfg = TrainerConfig {
        schedule,
        iters: cycle * n,
        capture_every: cycle,
        swa_enabled: true,
        log_snapshots: true,
        ..base.clone()
    };
    run_swa_monitored(init, &data.train, &cfg, None)
}

/// Ray half-length used by the experiment's width probe.
pub const RAY_MAX_T: f64 = 20.0;

/// Runs one seed. With `out`, writes checkpoints and CSVs under it.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64, out: Option<&Path>) -> Result<SeedOutcome> {
    let spec = &cfg.model;
    let init = MlpState::init(spec, seed);
    let save = |name: &str, m: &MlpState| -> Result<()> {
        match out {
            Some(dir) => save_checkpoint(m, &dir.join(name)),
            None => Ok(()),
        }
    };

    let pre = phase("pretrain", pretrain_from(&init, &data.train, &cfg.sgd_trainer(seed, cfg.pretrain_iters())))?;
    phase("pretrain", save("pretrained.swac", &pre))?;

    let sgd_run = phase("sgd", run_swa_monitored(&init, &data.train, &cfg.sgd_trainer(seed, cfg.train.budget), monitor(cfg, data)))?;
    let sgd = sgd_run.sgd_model.clone();
    phase("sgd", save("sgd.swac", &sgd))?;
    let sgd_metrics = phase("sgd", evaluate(&sgd, &data.test))?;
    let mut metric_rows = vec![("sgd".to_string(), 1.0, phase("sgd", evaluate(&sgd, &data.train))?.loss, sgd_metrics)];
    if let Some(dir) = out.filter(|_| cfg.run.curve_every > 0) {
        phase("sgd", write_curve(&dir.join("sgd_curve.csv"), &sgd_run.curve))?;
    }

    let mut swa_acc = Vec::new();
    let mut last_swa = None;
    if cfg.swa.enabled {
        let longest = cfg.swa.budgets.iter().cloned().fold(f64::MIN, f64::max);
        for &b in &cfg.swa.budgets {
            let tc = cfg.swa_trainer(seed, b, data.train.len());
            let mon = if b == longest { monitor(cfg, data) } else { None };
            let run = phase("swa", run_swa_monitored(&pre, &data.train, &tc, mon))?;
            let name = format!("swa_{}", budget_label(b));
            phase("swa", save(&format!("{name}.swac"), &run.swa_model))?;
            if let Some(dir) = out.filter(|_| mon.is_some()) {
                phase("swa", write_curve(&dir.join("swa_curve.csv"), &run.curve))?;
            }
            let m = phase("swa", evaluate(&run.swa_model, &data.test))?;
            metric_rows.push(("swa".into(), b, phase("swa", evaluate(&run.swa_model, &data.train))?.loss, m));
            swa_acc.push((b, m.accuracy()));
            if b == longest {
                last_swa = Some((run.swa_model, run.sgd_model));
            }
        }
    }
    if let Some(dir) = out {
        let rows = metric_rows.iter().map(|(name, b, train_loss, m)| {
            vec![name.clone(), budget_label(*b), num(*train_loss), num(m.error), num(m.accuracy())]
        });
        phase("report", write_csv(&dir.join("metrics.csv"), &["model", "budget", "train_loss", "test_err", "test_acc"], rows))?;
    }

    let mut outcome = SeedOutcome {
        seed,
        sgd_test_acc: sgd_metrics.accuracy(),
        swa_test_acc: swa_acc,
        widths: None,
        segment_argmins: None,
        gap: None,
    };

    // Landscape probes compare the averaged model with the last SGD iterate of
    // the same run.
    if let (true, Some((swa, sgd))) = (cfg.run.landscape, last_swa.as_ref()) {
        let probe = MlpProbe::new(spec, &data.train, &data.test);
        let ts = ray_grid(RAY_MAX_T, 40);
        let (widths, at_swa, at_sgd) =
            phase("landscape", width_comparison(&probe, swa, sgd, cfg.run.rays, &ts, seed ^ 0x4a7))?;
        let seg = phase("landscape", segment_profile(swa.params(), sgd.params(), &probe, &segment_grid()))?;
        if let Some(dir) = out {
            let w = |r: Result<()>| phase("landscape", r);
            w(write_ray_csv(&dir.join("rays_swa.csv"), &at_swa))?;
            w(write_ray_csv(&dir.join("rays_sgd.csv"), &at_sgd))?;
            w(write_gnuplot(&dir.join("rays_swa.csv"), PlotKind::Ray))?;
            w(write_gnuplot(&dir.join("rays_sgd.csv"), PlotKind::Ray))?;
            w(write_segment_csv(&dir.join("segment.csv"), &seg))?;
            w(write_gnuplot(&dir.join("segment.csv"), PlotKind::Segment))?;
            let rows = widths.iter().map(|r| vec![num(r.delta), num(r.swa), num(r.sgd)]);
            w(write_csv(&dir.join("widths.csv"), &["delta", "width_swa", "width_sgd"], rows))?;
        }
        outcome.widths = Some(widths);
        outcome.segment_argmins = Some((seg.train_argmin(), seg.test_argmin()));
    }

    if cfg.run.ensemble && cfg.swa.enabled {
        let longest = cfg.swa.budgets.iter().cloned().fold(f64::MIN, f64::max);
        let base = cfg.swa_trainer(seed, longest, data.train.len());
        let run = phase("ensemble", snapshot_run(&pre, data, &base, 5))?;
        let snaps = run.log.snapshots.into_iter().map(|s| s.params).collect();
        let set = phase("ensemble", SnapshotSet::new(spec, snaps, &data.train))?;
        let gap = phase("ensemble", gap_report(&set, &data.test))?;
        if let Some(dir) = out {
            phase("ensemble", write_gap_csv(&dir.join("ensemble.csv"), &gap))?;
        }
        outcome.gap = Some(gap);
    }
    Ok(outcome)
}

/// Columns `pair, gap, agreement`, then summary rows `ens_vs_center` and
/// `agreement_center` with the value in the `gap` or `agreement` column.
pub fn write_gap_csv(path: &Path, gap: &PredictionGap) -> Result<()> {
    let mut rows: Vec<Vec<String>> = gap
        .consecutive_gaps
        .iter()
        .zip(&gap.consecutive_agreement)
        .enumerate()
        .map(|(i, (g, a))| vec![format!("{i}-{}", i + 1), num(*g), num(*a)])
        .collect();
    rows.push(vec!["ens_vs_center".into(), num(gap.ens_vs_center), String::new()]);
    rows.push(vec!["agreement_center".into(), String::new(), num(gap.center_agreement)]);
    write_csv(path, &["pair", "gap", "agreement"], rows)
}

/// Runs every seed, writing `seed_<n>/` directories, `results.csv`, `summary.csv`
/// and the resolved configuration under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join("resolved.ini");
    std::fs::write(&resolved, dump(cfg)).map_err(|e| Error::io(&resolved, e))?;
    let data = phase("data", make_dataset(&cfg.data))?;

    let outcomes = cfg
        .run
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir: PathBuf = out.join(format!("seed_{seed}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            run_seed(cfg, &data, seed, Some(&dir))
        })
        .collect::<Result<Vec<_>>>()?;

    let columns = result_columns(cfg);
    let mut header = vec!["seed"];
    header.extend(columns.iter().map(String::as_str));
    let rows = outcomes.iter().map(|o| {
        let mut r = vec![o.seed.to_string()];
        r.extend(o.row().into_iter().map(num));
        r
    });
    phase("report", write_csv(&out.join("results.csv"), &header, rows))?;

    let summary = summarize(&columns, &outcomes);
    let rows = summary
        .iter()
        .map(|s| vec![s.column.clone(), num(s.mean), num(s.std), s.n.to_string()]);
    phase("report", write_csv(&out.join("summary.csv"), &["column", "mean_test_acc", "std_test_acc", "seeds"], rows))?;
    Ok(Report {
        seeds: outcomes,
        summary,
    })
}


#[derive(Debug, Clone, PartialEq)]
pub struct FixedLrOutcome {
    pub swa_test_acc: f64,
    /// Test accuracy of every captured iterate, each with its own batch-norm pass.
    pub iterate_test_acc: Vec<f64>,
}

/// Constant learning rate from `init` for `iters` iterations, averaging one
/// snapshot per epoch from the midpoint on.
pub fn fixed_lr_run(
    cfg: &ExperimentConfig,
    data: &Dataset,
    init: &MlpState,
    alpha: f64,
    iters: u64,
    seed: u64,
) -> Result<FixedLrOutcome> {
    let ipe = cfg.iters_per_epoch(data.train.len());
    let schedule = LrSchedule::Constant { alpha1: alpha };
    let mut first = cfg.sgd_trainer(seed, iters / 2);
    first.schedule = schedule;
    let mid = phase("fixed-lr", pretrain_from(init, &data.train, &first))?;
    let second = TrainerConfig {
        schedule,
        iters: iters - iters / 2,
        capture_every: ipe,
        swa_enabled: true,
        include_init: false,
        log_snapshots: true,
        seed: seed.wrapping_add(1),
        ..first
    };
    let run = phase("fixed-lr", run_swa_monitored(&mid, &data.train, &second, None))?;
    let iterate_test_acc = run
        .log
        .snapshots
        .par_iter()
        .map(|s| {
            let m = crate::trainer::refresh_bn(&mid.with_params(s.params.clone())?, &data.train)?;
            Ok(evaluate(&m, &data.test)?.accuracy())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedLrOutcome {
        swa_test_acc: evaluate(&run.swa_model, &data.test)?.accuracy(),
        iterate_test_acc,
    })
}
