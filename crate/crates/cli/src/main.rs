use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swa_core::checkpoint::{load_checkpoint, save_checkpoint};
use swa_core::config::{load_config, parse_config, ExperimentConfig};
use swa_core::data::{make_dataset, Dataset};
use swa_core::ensemble::{gap_report, SnapshotSet};
use swa_core::experiment::{ray_grid, run_experiment, segment_grid, snapshot_run, write_curve, write_gap_csv, RAY_MAX_T};
use swa_core::landscape::{
    evaluate_grid, plane_from_points, project_point, ray_profile, segment_profile, width_metric, write_gnuplot,
    write_plane_csv, write_ray_csv, write_segment_csv, MlpProbe, PlotKind,
};
use swa_core::model::{evaluate, finite_diff_grad, loss_and_grad, max_relative_error};
use swa_core::quadratic::{averaging_convergence, ellipsoid_check, simulate_sgd, spread_curvatures, QuadraticProblem};
use swa_core::report::{num, write_csv};
use swa_core::trainer::{pretrain_from, run_swa_monitored, Monitor};
use swa_core::{Error, MlpState, Result};

/// Used when no `--config` is given.
const DEFAULT_CONFIG: &str = "[model]\nlayers = 2, 32, 32, 2\n[data]\ngenerator = spirals\n";

#[derive(Parser)]
#[command(name = "swa-lab", version, about = "Stochastic weight averaging laboratory")]
struct Cli {
    /// Experiment configuration; the built-in spirals recipe when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model initialization and minibatch order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; `run.output` from the configuration when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the SGD baseline for the full budget.
    Train {
        /// Override the iteration budget.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Average weights from a starting checkpoint (or a fresh pretrain).
    Swa {
        /// Starting checkpoint; pretrains from scratch when omitted.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Averaging length in budgets.
        #[arg(long, default_value_t = 1.5)]
        budgets: f64,
    },
    /// Train loss and test error of checkpoints.
    Eval {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Loss-landscape probes around checkpoints.
    #[command(subcommand)]
    Landscape(LandscapeCommand),
    /// Prediction gap between a snapshot ensemble and its weight average.
    EnsembleCompare {
        /// Snapshot checkpoints; with fewer than two, snapshots are collected by a cyclic run.
        checkpoints: Vec<PathBuf>,
        /// Snapshots to collect when running.
        #[arg(long, default_value_t = 5)]
        snapshots: u64,
    },
    /// Averaged SGD on a noisy quadratic.
    QuadSim(QuadArgs),
    /// Compare backprop gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Full multi-seed comparison of SGD and averaged models.
    Experiment,
}

#[derive(Subcommand)]
enum LandscapeCommand {
    /// Train loss and test error on the plane through three checkpoints.
    Plane {
        #[arg(num_args = 3, required = true)]
        points: Vec<PathBuf>,
        /// Grid points per axis.
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value_t = 0.2)]
        pad: f64,
    },
    /// Profiles along random unit rays from a checkpoint, with widths.
    Ray {
        center: PathBuf,
        #[arg(long, default_value_t = 10)]
        rays: usize,
        #[arg(long, default_value_t = RAY_MAX_T)]
        max_t: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        /// Train-loss rises that define the widths.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,1.0")]
        deltas: Vec<f64>,
    },
    /// Profile along the line through two checkpoints, `t = 0` at the first.
    Segment { from: PathBuf, to: PathBuf },
}

#[derive(Args)]
struct QuadArgs {
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 16)]
    replicas: usize,
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn data(&self) -> Result<Dataset> {
        make_dataset(&self.cfg.data)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_error(&self.out, e))?;
        Ok(&self.out)
    }

    fn monitor<'a>(&self, data: &'a Dataset) -> Option<Monitor<'a>> {
        (self.cfg.run.curve_every > 0).then_some(Monitor {
            test: &data.test,
            every: self.cfg.run.curve_every,
        })
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => parse_config(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = cli.seed {
        cfg.run.seeds = vec![seed];
    }
    let ctx = Ctx {
        seed: cfg.run.seeds.first().copied().unwrap_or(0),
        out: cli.out.unwrap_or_else(|| cfg.run.output.clone()),
        quiet: cli.quiet,
        cfg,
    };
    match cli.command {
        Command::Train { iters } => train(&ctx, iters),
        Command::Swa { from, budgets } => swa(&ctx, from.as_deref(), budgets),
        Command::Eval { checkpoints } => eval(&ctx, &checkpoints),
        Command::Landscape(cmd) => landscape(&ctx, cmd),
        Command::EnsembleCompare { checkpoints, snapshots } => ensemble_compare(&ctx, &checkpoints, snapshots),
        Command::QuadSim(args) => quad_sim(&ctx, &args),
        Command::Gradcheck { batch, step, tol } => gradcheck(&ctx, batch, step, tol),
        Command::Experiment => experiment(&ctx),
    }
}

fn train(ctx: &Ctx, iters: Option<u64>) -> Result<()> {
    let data = ctx.data()?;
    let init = MlpState::init(&ctx.cfg.model, ctx.seed);
    let tc = ctx.cfg.sgd_trainer(ctx.seed, iters.unwrap_or(ctx.cfg.train.budget));
    let run = run_swa_monitored(&init, &data.train, &tc, ctx.monitor(&data))?;
    let dir = ctx.out_dir()?;
    save_checkpoint(&run.sgd_model, &dir.join("sgd.swac"))?;
    if !run.curve.is_empty() {
        write_curve(&dir.join("sgd_curve.csv"), &run.curve)?;
    }
    let m = evaluate(&run.sgd_model, &data.test)?;
    ctx.say(format!("sgd: {} iterations, test error {:.4}", tc.iters, m.error));
    Ok(())
}

fn swa(ctx: &Ctx, from: Option<&Path>, budgets: f64) -> Result<()> {
    let data = ctx.data()?;
    let start = match from {
        Some(path) => load_checkpoint(path)?,
        None => {
            let init = MlpState::init(&ctx.cfg.model, ctx.seed);
            pretrain_from(&init, &data.train, &ctx.cfg.sgd_trainer(ctx.seed, ctx.cfg.pretrain_iters()))?
        }
    };
    let tc = ctx.cfg.swa_trainer(ctx.seed, budgets, data.train.len());
    let run = run_swa_monitored(&start, &data.train, &tc, ctx.monitor(&data))?;
    let dir = ctx.out_dir()?;
    save_checkpoint(&run.swa_model, &dir.join("swa.swac"))?;
    save_checkpoint(&run.sgd_model, &dir.join("swa_last_iterate.swac"))?;
    if !run.curve.is_empty() {
        write_curve(&dir.join("swa_curve.csv"), &run.curve)?;
    }
    let avg = evaluate(&run.swa_model, &data.test)?;
    let last = evaluate(&run.sgd_model, &data.test)?;
    ctx.say(format!(
        "swa: {} models averaged over {} iterations, test error {:.4} (last iterate {:.4})",
        run.n_models, tc.iters, avg.error, last.error
    ));
    Ok(())
}

fn eval(ctx: &Ctx, checkpoints: &[PathBuf]) -> Result<()> {
    let data = ctx.data()?;
    ctx.say("checkpoint,train_loss,test_err,test_acc");
    for path in checkpoints {
        let model = load_checkpoint(path)?;
        let tr = evaluate(&model, &data.train)?;
        let te = evaluate(&model, &data.test)?;
        ctx.say(format!("{},{},{},{}", path.display(), num(tr.loss), num(te.error), num(te.accuracy())));
    }
    Ok(())
}

fn landscape(ctx: &Ctx, cmd: LandscapeCommand) -> Result<()> {
    let data = ctx.data()?;
    let probe = MlpProbe::new(&ctx.cfg.model, &data.train, &data.test);
    let dir = ctx.out_dir()?;
    match cmd {
        LandscapeCommand::Plane { points, grid, pad } => {
            let models = points.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
            let basis = plane_from_points(models[0].params(), models[1].params(), models[2].params())?;
            let (xs, ys) = basis.default_axes(grid, pad);
            let mut surface = evaluate_grid(&basis, &probe, &xs, &ys)?;
            surface.anchors = points
                .iter()
                .zip(&models)
                .map(|(p, m)| project_point(&basis, &probe, &p.display().to_string(), m.params()))
                .collect::<Result<Vec<_>>>()?;
            let csv = dir.join("plane.csv");
            write_plane_csv(&csv, &surface)?;
            write_gnuplot(&csv, PlotKind::Plane)?;
            ctx.say(format!("plane: {} points written to {}", xs.len() * ys.len(), csv.display()));
        }
        LandscapeCommand::Ray { center, rays, max_t, steps, deltas } => {
            let model = load_checkpoint(&center)?;
            let profiles = ray_profile(model.params(), &probe, rays, &ray_grid(max_t, steps), ctx.seed)?;
            let csv = dir.join("rays.csv");
            write_ray_csv(&csv, &profiles)?;
            write_gnuplot(&csv, PlotKind::Ray)?;
            let rows = deltas
                .iter()
                .map(|&d| {
                    let w = width_metric(&profiles, d)?;
                    ctx.say(format!("width at delta {d}: {:.4} ({} of {rays} rays capped)", w.value, w.capped));
                    Ok(vec![num(d), num(w.value), w.capped.to_string()])
                })
                .collect::<Result<Vec<_>>>()?;
            write_csv(&dir.join("widths.csv"), &["delta", "width", "capped_rays"], rows)?;
        }
        LandscapeCommand::Segment { from, to } => {
            let (a, b) = (load_checkpoint(&from)?, load_checkpoint(&to)?);
            let seg = segment_profile(a.params(), b.params(), &probe, &segment_grid())?;
            let csv = dir.join("segment.csv");
            write_segment_csv(&csv, &seg)?;
            write_gnuplot(&csv, PlotKind::Segment)?;
            ctx.say(format!(
                "segment: train loss minimal at t = {:.2}, test error minimal at t = {:.2}",
                seg.train_argmin(),
                seg.test_argmin()
            ));
        }
    }
    Ok(())
}

fn ensemble_compare(ctx: &Ctx, checkpoints: &[PathBuf], snapshots: u64) -> Result<()> {
    let data = ctx.data()?;
    let params = if checkpoints.len() >= 2 {
        checkpoints
            .iter()
            .map(|p| Ok(load_checkpoint(p)?.into_params()))
            .collect::<Result<Vec<_>>>()?
    } else {
        let start = match checkpoints.first() {
            Some(path) => load_checkpoint(path)?,
            None => {
                let init = MlpState::init(&ctx.cfg.model, ctx.seed);
                pretrain_from(&init, &data.train, &ctx.cfg.sgd_trainer(ctx.seed, ctx.cfg.pretrain_iters()))?
            }
        };
        let longest = ctx.cfg.swa.budgets.iter().cloned().fold(f64::MIN, f64::max);
        let base = ctx.cfg.swa_trainer(ctx.seed, longest, data.train.len());
        let run = snapshot_run(&start, &data, &base, snapshots)?;
        run.log.snapshots.into_iter().map(|s| s.params).collect()
    };
    let set = SnapshotSet::new(&ctx.cfg.model, params, &data.train)?;
    let gap = gap_report(&set, &data.test)?;
    let csv = ctx.out_dir()?.join("ensemble.csv");
    write_gap_csv(&csv, &gap)?;
    ctx.say(format!(
        "ensemble vs weight average: {:.5}; consecutive snapshots: {}",
        gap.ens_vs_center,
        gap.consecutive_gaps.iter().map(|g| format!("{g:.5}")).collect::<Vec<_>>().join(" ")
    ));
    Ok(())
}

fn quad_sim(ctx: &Ctx, args: &QuadArgs) -> Result<()> {
    let p = QuadraticProblem::diagonal(&spread_curvatures(args.dim), 1.0)?;
    let curve = averaging_convergence(&p, args.alpha, args.iters, ctx.seed, args.replicas)?;
    let (_, stats) = simulate_sgd(&p, args.alpha, args.iters, args.iters / 5, ctx.seed)?;
    let ratio = ellipsoid_check(&stats, args.dim)?;
    let rows = curve
        .ks
        .iter()
        .zip(&curve.avg_err)
        .zip(&curve.raw_rms)
        .map(|((k, e), r)| vec![k.to_string(), num(*e), num(*r), num(ratio)]);
    let csv = ctx.out_dir()?.join("quad_sim.csv");
    write_csv(&csv, &["k", "mean_err", "raw_iterate_rms", "mahalanobis_ratio"], rows)?;
    let last = curve.ks.len() - 1;
    ctx.say(format!(
        "k = {}: averaged error {:.4}, raw iterate rms {:.4}, mahalanobis ratio {:.3}",
        curve.ks[last], curve.avg_err[last], curve.raw_rms[last], ratio
    ));
    Ok(())
}

fn gradcheck(ctx: &Ctx, batch: usize, step: f64, tol: f64) -> Result<()> {
    let data = ctx.data()?;
    let idx: Vec<usize> = (0..batch.min(data.train.len())).collect();
    let sample = data.train.gather(&idx);
    let state = MlpState::init(&ctx.cfg.model, ctx.seed);
    let (_, analytic) = loss_and_grad(&state, &sample)?;
    let numeric = finite_diff_grad(&state, &sample, step)?;
    let err = max_relative_error(&analytic, &numeric);
    ctx.say(format!("max relative error {err:.3e} over {} parameters", analytic.len()));
    if err > tol {
        return Err(Error::Numeric {
            layer: "gradient".into(),
            detail: format!("relative error {err:.3e} exceeds {tol:e}"),
        });
    }
    Ok(())
}

fn experiment(ctx: &Ctx) -> Result<()> {
    let report = run_experiment(&ctx.cfg, &ctx.out)?;
    for row in &report.summary {
        ctx.say(format!("{:<10} {:.4} +- {:.4} over {} seeds", row.column, row.mean, row.std, row.n));
    }
    Ok(())
}
