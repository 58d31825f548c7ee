//! Loss geometry probes: a plane through three weight vectors, random rays from a
//! center, and the segment between two solutions.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{evaluate, Batch, MlpSpec, MlpState};
use crate::param::ParamVector;
use crate::report::{num, write_csv};
use crate::trainer::refresh_bn;

/// Values above this (or non-finite ones) are recorded as saturated.
pub const SATURATION_CAP: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub train_loss: f64,
    pub test_err: f64,
    pub saturated: bool,
}

impl PointMetrics {
    fn saturated() -> Self {
        Self {
            train_loss: SATURATION_CAP,
            test_err: 1.0,
            saturated: true,
        }
    }
}

/// Anything that can score a weight vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, w: &ParamVector) -> Result<PointMetrics>;
}

/// Scores an MLP: fresh batch-norm statistics on the train split, then the
/// regularized train loss and the test error.
#[derive(Debug)]
pub struct MlpProbe<'a> {
    spec: MlpSpec,
    train: &'a Batch,
    test: &'a Batch,
    evals: AtomicUsize,
}

impl<'a> MlpProbe<'a> {
    pub fn new(spec: &MlpSpec, train: &'a Batch, test: &'a Batch) -> Self {
        Self {
            spec: spec.clone(),
            train,
            test,
            evals: AtomicUsize::new(0),
        }
    }

    /// Number of model evaluations performed so far.
    pub fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }
}

impl Objective for MlpProbe<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn evaluate(&self, w: &ParamVector) -> Result<PointMetrics> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let state = MlpState::from_params(&self.spec, w.clone())?;
        let scored = refresh_bn(&state, self.train).and_then(|s| Ok((evaluate(&s, self.train)?, evaluate(&s, self.test)?)));
        match scored {
            Ok((tr, te)) if tr.loss.is_finite() && tr.loss <= SATURATION_CAP => Ok(PointMetrics {
                train_loss: tr.loss,
                test_err: te.error,
                saturated: false,
            }),
            Ok(_) | Err(Error::Numeric { .. }) => Ok(PointMetrics::saturated()),
            Err(e) => Err(e),
        }
    }
}

/// `scale / 2 * ||w - center||^2`, reported as both loss and error.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub center: ParamVector,
    pub scale: f64,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn evaluate(&self, w: &ParamVector) -> Result<PointMetrics> {
        self.center.check_same_layout(w)?;
        let d = w.sub(&self.center);
        let v = 0.5 * self.scale * d.dot(&d);
        Ok(PointMetrics {
            train_loss: v,
            test_err: v,
            saturated: false,
        })
    }
}

/// Orthonormal basis of the plane through `w1, w2, w3`, with `w1` as origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneBasis {
    pub origin: ParamVector,
    pub u_hat: ParamVector,
    pub v_hat: ParamVector,
    pub u_norm: f64,
    pub v_norm: f64,
    /// Coordinates of `w3`; `w1` sits at the origin and `w2` at `(u_norm, 0)`.
    pub w3_coords: (f64, f64),
}

impl PlaneBasis {
    /// `origin + x * u_hat + y * v_hat`.
    pub fn point(&self, x: f64, y: f64) -> ParamVector {
        let mut p = self.origin.add_scaled(x, &self.u_hat);
        p.axpy(y, &self.v_hat);
        p
    }

    /// Orthogonal projection coordinates of `w`.
    pub fn project(&self, w: &ParamVector) -> (f64, f64) {
        let d = w.sub(&self.origin);
        (d.dot(&self.u_hat), d.dot(&self.v_hat))
    }

    pub fn anchors(&self) -> [(f64, f64); 3] {
        [(0.0, 0.0), (self.u_norm, 0.0), self.w3_coords]
    }

    /// `k` evenly spaced values per axis covering the anchors, padded by `pad`
    /// times the extent on each side.
    pub fn default_axes(&self, k: usize, pad: f64) -> (Vec<f64>, Vec<f64>) {
        let a = self.anchors();
        let axis = |vals: [f64; 3]| {
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            let (lo, hi) = (lo - pad * span, hi + pad * span);
            if k == 1 {
                return vec![0.5 * (lo + hi)];
            }
            (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
        };
        (axis([a[0].0, a[1].0, a[2].0]), axis([a[0].1, a[1].1, a[2].1]))
    }
}

pub fn plane_from_points(w1: &ParamVector, w2: &ParamVector, w3: &ParamVector) -> Result<PlaneBasis> {
    w1.check_same_layout(w2)?;
    w1.check_same_layout(w3)?;
    let u = w2.sub(w1);
    let u_norm = u.norm();
    if u_norm == 0.0 {
        return Err(Error::DegenerateBasis("w1 and w2 coincide".into()));
    }
    let r = w3.sub(w1);
    let v = r.add_scaled(-r.dot(&u) / (u_norm * u_norm), &u);
    let v_norm = v.norm();
    if v_norm <= 1e-12 * r.norm().max(u_norm) {
        return Err(Error::DegenerateBasis(
            "w3 lies on the line through w1 and w2".into(),
        ));
    }
    let u_hat = u.scaled(1.0 / u_norm);
    let v_hat = v.scaled(1.0 / v_norm);
    let w3_coords = (r.dot(&u_hat), v_norm);
    Ok(PlaneBasis {
        origin: w1.clone(),
        u_hat,
        v_hat,
        u_norm,
        v_norm,
        w3_coords,
    })
}

/// A labelled point in plane coordinates together with its true metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub label: String,
    pub x: f64,
    pub y: f64,
    pub metrics: PointMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSurface {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major: `values[j * xs.len() + i]` is the point `(xs[i], ys[j])`.
    pub values: Vec<PointMetrics>,
    pub anchors: Vec<Anchor>,
}

impl GridSurface {
    pub fn at(&self, i: usize, j: usize) -> PointMetrics {
        self.values[j * self.xs.len() + i]
    }
}

/// Scores every grid point. Anchors are left empty; fill them with [`project_point`].
pub fn evaluate_grid(basis: &PlaneBasis, objective: &dyn Objective, xs: &[f64], ys: &[f64]) -> Result<GridSurface> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::domain("grid must have at least one point per axis"));
    }
    let points: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let values = points
        .par_iter()
        .map(|&(x, y)| objective.evaluate(&basis.point(x, y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridSurface {
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        values,
        anchors: Vec::new(),
    })
}

/// Projects `w` onto the plane and records its true (unprojected) metrics.
pub fn project_point(basis: &PlaneBasis, objective: &dyn Objective, label: &str, w: &ParamVector) -> Result<Anchor> {
    let (x, y) = basis.project(w);
    Ok(Anchor {
        label: label.to_string(),
        x,
        y,
        metrics: objective.evaluate(w)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayProfile {
    pub direction: ParamVector,
    pub ts: Vec<f64>,
    pub metrics: Vec<PointMetrics>,
}

impl RayProfile {
    pub fn train_loss(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.train_loss).collect()
    }

    pub fn test_err(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.test_err).collect()
    }
}

/// `n` directions uniform on the unit sphere: normalized standard Gaussians.
pub fn unit_directions(dim: usize, n: usize, seed: u64) -> Vec<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let g = ParamVector::from_vec((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect());
            let norm = g.norm();
            g.scaled(1.0 / norm)
        })
        .collect()
}

pub fn ray_profile(
    center: &ParamVector,
    objective: &dyn Objective,
    n_rays: usize,
    ts: &[f64],
    seed: u64,
) -> Result<Vec<RayProfile>> {
    if n_rays == 0 {
        return Err(Error::domain("need at least one ray"));
    }
    if !ts.contains(&0.0) {
        return Err(Error::domain("ray grid must include t = 0"));
    }
    unit_directions(center.len(), n_rays, seed)
        .into_iter()
        .map(|d| {
            let metrics = ts
                .par_iter()
                .map(|&t| objective.evaluate(&center.add_scaled(t, &d)))
                .collect::<Result<Vec<_>>>()?;
            Ok(RayProfile {
                direction: d,
                ts: ts.to_vec(),
                metrics,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentProfile {
    pub ts: Vec<f64>,
    /// Signed distance from `w_a`: `t * ||w_b - w_a||`.
    pub dist: Vec<f64>,
    pub metrics: Vec<PointMetrics>,
    /// The endpoints coincide.
    pub degenerate: bool,
}

impl SegmentProfile {
    /// Midpoint of the `t` values attaining the minimum, so flat stretches of a
    /// step-valued metric do not favour either end.
    fn argmin_t(&self, key: impl Fn(&PointMetrics) -> f64) -> f64 {
        let best = self.metrics.iter().map(&key).fold(f64::INFINITY, f64::min);
        let tied: Vec<f64> = self
            .ts
            .iter()
            .zip(&self.metrics)
            .filter(|(_, m)| key(m) == best)
            .map(|(t, _)| *t)
            .collect();
        tied.iter().sum::<f64>() / tied.len() as f64
    }

    /// `t` of the lowest train loss.
    pub fn train_argmin(&self) -> f64 {
        self.argmin_t(|m| m.train_loss)
    }

    /// `t` of the lowest test error.
    pub fn test_argmin(&self) -> f64 {
        self.argmin_t(|m| m.test_err)
    }
}

/// Scores `(1 - t) * w_a + t * w_b` for each `t`.
pub fn segment_profile(w_a: &ParamVector, w_b: &ParamVector, objective: &dyn Objective, ts: &[f64]) -> Result<SegmentProfile> {
    w_a.check_same_layout(w_b)?;
    let length = w_b.sub(w_a).norm();
    let metrics = ts
        .par_iter()
        .map(|&t| objective.evaluate(&w_a.lerp(w_b, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentProfile {
        ts: ts.to_vec(),
        dist: ts.iter().map(|t| t * length).collect(),
        metrics,
        degenerate: length == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Width {
    /// Mean over rays.
    pub value: f64,
    /// Rays whose loss never rose by `delta`; they contribute the largest `|t|`.
    pub capped: usize,
}

/// Mean over rays of the smallest `|t|` where the train loss has risen by at least
/// `delta` over its value at `t = 0`, interpolating linearly between grid points.
pub fn width_metric(profiles: &[RayProfile], delta: f64) -> Result<Width> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::domain(format!("delta must be > 0, got {delta}")));
    }
    let first = profiles.first().ok_or_else(|| Error::domain("no profiles"))?;
    let mut total = 0.0;
    let mut capped = 0;
    for p in profiles {
        if p.ts != first.ts {
            return Err(Error::shape("profiles must share one t grid"));
        }
        let (w, hit) = ray_width(&p.ts, &p.train_loss(), delta)?;
        total += w;
        capped += usize::from(!hit);
    }
    Ok(Width {
        value: total / profiles.len() as f64,
        capped,
    })
}

fn ray_width(ts: &[f64], loss: &[f64], delta: f64) -> Result<(f64, bool)> {
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| ts[a].total_cmp(&ts[b]));
    let zero = order
        .iter()
        .position(|&i| ts[i] == 0.0)
        .ok_or_else(|| Error::domain("ray grid must include t = 0"))?;
    let base = loss[order[zero]];
    let outward = |steps: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let (mut prev_t, mut prev_l) = (0.0f64, 0.0f64);
        for i in steps {
            let (t, l) = (ts[i].abs(), loss[i] - base);
            if l >= delta {
                return Some(prev_t + (t - prev_t) * (delta - prev_l) / (l - prev_l));
            }
            (prev_t, prev_l) = (t, l);
        }
        None
    };
    let right = outward(&mut order[zero + 1..].iter().copied());
    let left = outward(&mut order[..zero].iter().rev().copied());
    Ok(match (left, right) {
        (Some(a), Some(b)) => (a.min(b), true),
        (Some(a), None) | (None, Some(a)) => (a, true),
        (None, None) => (ts.iter().map(|t| t.abs()).fold(0.0, f64::max), false),
    })
}

fn metric_cells(m: &PointMetrics) -> [String; 3] {
    [num(m.train_loss), num(m.test_err), u8::from(m.saturated).to_string()]
}

/// Columns `x, y, train_loss, test_err, saturated`; anchors go to a sibling file
/// with the suffix `_anchors.csv`.
pub fn write_plane_csv(path: &Path, surface: &GridSurface) -> Result<()> {
    let rows = surface.ys.iter().enumerate().flat_map(|(j, &y)| {
        surface.xs.iter().enumerate().map(move |(i, &x)| {
            let mut row = vec![num(x), num(y)];
            row.extend(metric_cells(&surface.at(i, j)));
            row
        })
    });
    write_csv(path, &["x", "y", "train_loss", "test_err", "saturated"], rows)?;

    let anchor_path = path.with_file_name(format!(
        "{}_anchors.csv",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("plane")
    ));
    let rows = surface.anchors.iter().map(|a| {
        let mut row = vec![a.label.clone(), num(a.x), num(a.y)];
        row.extend(metric_cells(&a.metrics));
        row
    });
    write_csv(&anchor_path, &["label", "x", "y", "train_loss", "test_err", "saturated"], rows)
}

/// Columns `ray_id, t, train_loss, test_err, saturated`.
pub fn write_ray_csv(path: &Path, profiles: &[RayProfile]) -> Result<()> {
    let rows = profiles.iter().enumerate().flat_map(|(id, p)| {
        p.ts.iter().zip(&p.metrics).map(move |(t, m)| {
            let mut row = vec![id.to_string(), num(*t)];
            row.extend(metric_cells(m));
            row
        })
    });
    write_csv(path, &["ray_id", "t", "train_loss", "test_err", "saturated"], rows)
}

/// Columns `t, dist, train_loss, test_err, saturated`.
pub fn write_segment_csv(path: &Path, profile: &SegmentProfile) -> Result<()> {
    let rows = profile.ts.iter().zip(&profile.dist).zip(&profile.metrics).map(|((t, d), m)| {
        let mut row = vec![num(*t), num(*d)];
        row.extend(metric_cells(m));
        row
    });
    write_csv(path, &["t", "dist", "train_loss", "test_err", "saturated"], rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Plane,
    Ray,
    Segment,
}

/// A gnuplot script that renders `csv_name` (relative to the script's directory).
pub fn gnuplot_script(kind: PlotKind, csv_name: &str) -> String {
    let head = format!("set datafile separator ','\nset key autotitle columnhead\ndata = '{csv_name}'\n");
    let body = match kind {
        PlotKind::Plane => "set view map\nset pm3d at b\nset dgrid3d\nset xlabel 'x'\nset ylabel 'y'\n\
             set title 'train loss'\nsplot data using 1:2:3 with pm3d notitle\npause -1\n\
             set title 'test error'\nsplot data using 1:2:4 with pm3d notitle\npause -1\n"
            .to_string(),
        PlotKind::Ray => "set xlabel 't'\nset ylabel 'train loss'\n\
             plot for [i=0:*] data using 2:(column(1)==i ? $3 : 1/0) with lines title sprintf('ray %d', i)\npause -1\n"
            .to_string(),
        PlotKind::Segment => "set xlabel 'signed distance'\nset ylabel 'train loss'\nset y2label 'test error'\n\
             set y2tics\nplot data using 2:3 with lines title 'train loss', data using 2:4 axes x1y2 with lines title 'test error'\npause -1\n"
            .to_string(),
    };
    head + &body
}

/// Writes `script` next to `csv_path` with a `.gp` extension.
pub fn write_gnuplot(csv_path: &Path, kind: PlotKind) -> Result<()> {
    let name = csv_path.file_name().and_then(|s| s.to_str()).unwrap_or("data.csv");
    let gp = csv_path.with_extension("gp");
    std::fs::write(&gp, gnuplot_script(kind, name)).map_err(|e| Error::io(&gp, e))
}
