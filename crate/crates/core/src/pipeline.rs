//! Iterative registration driver, initial-pose sampling and evaluation
//! metrics.

use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::correspondence::{select_contour_points, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{exp_se3, MotionVector, ProjectionGeometry, RigidTransform};
use crate::ppc::{update_step, Matcher, UpdateContext, UpdateDiagnostics, UpdateParams};
use crate::projector::GradientImage2D;
use crate::volume::{extract_surface_points, CannyParams, SurfacePointSet, Volume};

/// Mean distance between the point set mapped by `t_est` and by `t_gt`.
pub fn mtre(t_est: &RigidTransform, t_gt: &RigidTransform, points: &[Vector3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let sum: f64 = points
        .iter()
        .map(|w| (t_est.apply(w) - t_gt.apply(w)).norm())
        .sum();
    Ok(sum / points.len() as f64)
}

/// `1 - after / before` when the error decreased, otherwise 0.
pub fn reduction_factor(before: f64, after: f64) -> Result<f64> {
    if !(before.is_finite() && after.is_finite()) {
        return Err(Error::NonFinite("mTRE"));
    }
    if before <= 0.0 {
        return Err(Error::UndefinedReduction);
    }
    Ok(if after < before { 1.0 - after / before } else { 0.0 })
}

/// Mean end-point error, pixels, of the valid correspondences against the
/// ground-truth flow `project(t_gt(w)) - p`.
pub fn epe(c: &CorrespondenceSet, t_gt: &RigidTransform, geom: &ProjectionGeometry) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in c.entries().iter().filter(|e| e.valid) {
        let gt = geom.project(&t_gt.apply(&e.contour.w))? - e.contour.p;
        sum += (e.dp - gt).norm();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }
    Ok(sum / n as f64)
}

/// Which point set the reported mTRE is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtrePoints {
    /// Every extracted surface point.
    #[default]
    Surface,
    /// Contour points selected at the ground-truth pose.
    Contour,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub max_iterations: usize,
    /// Convergence thresholds on the update: (|omega| rad, |t| mm).
    pub convergence_motion: (f64, f64),
    pub canny: CannyParams,
    pub update: UpdateParams,
    pub mtre_points: MtrePoints,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            convergence_motion: (1e-4, 0.01),
            canny: CannyParams::default(),
            update: UpdateParams::default(),
            mtre_points: MtrePoints::Surface,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, t) = self.convergence_motion;
        if self.max_iterations == 0 || !(w > 0.0) || !(t > 0.0) {
            return Err(Error::InvalidArgument(
                "max_iterations must be >= 1 and convergence tolerances positive".into(),
            ));
        }
        self.canny.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegistrationReport {
    /// `poses[0]` is the initial pose, followed by one pose per update.
    #[serde(serialize_with = "serialize_poses")]
    pub poses: Vec<RigidTransform>,
    /// mTRE of every entry of `poses`; empty without a ground truth.
    pub mtre_trace: Vec<f64>,
    /// Reduction factor of each update; empty without a ground truth.
    pub reduction_factors: Vec<f64>,
    pub diagnostics: Vec<UpdateDiagnostics>,
    pub converged: bool,
    /// Seconds; not serialized so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

fn serialize_poses<S: serde::Serializer>(poses: &[RigidTransform], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(poses.len()))?;
    for p in poses {
        let r = p.rotation();
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
        seq.serialize_element(&(rows, <[f64; 3]>::from(*p.translation())))?;
    }
    seq.end()
}

impl RegistrationReport {
    pub fn final_pose(&self) -> &RigidTransform {
        self.poses.last().expect("report holds the initial pose")
    }

    pub fn iterations(&self) -> usize {
        self.diagnostics.len()
    }
}

/// Cached initialization: surface points of the volume and the fluoroscopy
/// gradient, computed once and reused by every registration.
#[derive(Clone, Debug)]
pub struct Registration<'a> {
    volume: &'a Volume,
    grad_flr: &'a GradientImage2D,
    geom: ProjectionGeometry,
    config: RegistrationConfig,
    surface: SurfacePointSet,
}

impl<'a> Registration<'a> {
    pub fn new(
        volume: &'a Volume,
        grad_flr: &'a GradientImage2D,
        geom: &ProjectionGeometry,
        config: &RegistrationConfig,
    ) -> Result<Self> {
        config.validate()?;
        geom.validate()?;
        let surface = extract_surface_points(volume, &config.canny)?;
        Ok(Self {
            volume,
            grad_flr,
            geom: *geom,
            config: *config,
            surface,
        })
    }

    pub fn surface(&self) -> &SurfacePointSet {
        &self.surface
    }

    /// Points on which the mTRE against `t_gt` is evaluated.
    pub fn mtre_points(&self, t_gt: &RigidTransform) -> Result<Vec<Vector3<f64>>> {
        match self.config.mtre_points {
            MtrePoints::Surface => Ok(self.surface.points().to_vec()),
            MtrePoints::Contour => {
                let c = select_contour_points(&self.surface, t_gt, &self.geom, self.config.update.contour_eps)?;
                if c.is_empty() {
                    return Err(Error::EmptyPointSet);
                }
                Ok(c.points().iter().map(|p| p.w).collect())
            }
        }
    }

    /// Iterates updates from `t_init` until the increment falls below the
    /// convergence thresholds or the iteration cap. With `t_gt` the report
    /// also carries the mTRE trace.
    pub fn run(
        &self,
        t_init: &RigidTransform,
        matcher: &Matcher,
        t_gt: Option<&RigidTransform>,
    ) -> Result<RegistrationReport> {
        let start = Instant::now();
        let ctx = UpdateContext {
            volume: self.volume,
            surface: &self.surface,
            grad_flr: self.grad_flr,
            geom: &self.geom,
        };
        let points = t_gt.map(|t| self.mtre_points(t)).transpose()?;
        let error = |pose: &RigidTransform| -> Result<Option<f64>> {
            match (t_gt, &points) {
                (Some(t), Some(p)) => mtre(pose, t, p).map(Some),
                _ => Ok(None),
            }
        };
        let mut report = RegistrationReport {
            poses: vec![*t_init],
            mtre_trace: error(t_init)?.into_iter().collect(),
            reduction_factors: Vec::new(),
            diagnostics: Vec::new(),
            converged: false,
            wall_time: 0.0,
        };
        let (w_tol, t_tol) = self.config.convergence_motion;
        let mut pose = *t_init;
        for _ in 0..self.config.max_iterations {
            let out = update_step(&ctx, &pose, &self.config.update, matcher)?;
            pose = out.pose;
            report.poses.push(pose);
            report.diagnostics.push(out.diagnostics);
            if let Some(after) = error(&pose)? {
                let before = *report.mtre_trace.last().expect("trace starts with the initial error");
                report.mtre_trace.push(after);
                report
                    .reduction_factors
                    .push(if before > 0.0 { reduction_factor(before, after)? } else { 0.0 });
            }
            let (w, t) = out.diagnostics.motion_norm;
            if out.diagnostics.updated && w < w_tol && t < t_tol {
                report.converged = true;
                break;
            }
        }
        report.wall_time = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// One-shot registration: initialization followed by [`Registration::run`].
pub fn register(
    volume: &Volume,
    grad_flr: &GradientImage2D,
    t_init: &RigidTransform,
    geom: &ProjectionGeometry,
    config: &RegistrationConfig,
    matcher: &Matcher,
    t_gt: Option<&RigidTransform>,
) -> Result<RegistrationReport> {
    Registration::new(volume, grad_flr, geom, config)?.run(t_init, matcher, t_gt)
}

pub const BISECTION_MAX_ITERATIONS: usize = 100;
/// Achieved-versus-target mTRE tolerance of the sampler, mm.
pub const SAMPLE_TOLERANCE: f64 = 1e-3;

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = v.try_normalize(1e-9) {
            return u;
        }
    }
}

/// Converts rotation into an equivalent displacement when splitting the
/// perturbation between rotation and translation, mm per radian.
pub const DEFAULT_ROTATION_LEVER_MM: f64 = 300.0;

/// Draws a random perturbation of `t_gt` whose mTRE on `points` equals
/// `target` (within [`SAMPLE_TOLERANCE`]), using the default rotation lever.
pub fn sample_initial_transform(
    t_gt: &RigidTransform,
    points: &[Vector3<f64>],
    target: f64,
    rng: &mut impl Rng,
) -> Result<RigidTransform> {
    sample_initial_transform_with(t_gt, points, target, DEFAULT_ROTATION_LEVER_MM, rng)
}

/// The perturbation is `exp(lambda dv)` applied on the left of `t_gt` with
/// `dv = (r a / lever, (1 - r) d)` for a random axis `a`, a random direction
/// `d` and `r` uniform in [0.2, 0.8]; the rotation acts about the
/// camera-frame centroid of the points. `lambda` is found by bisection.
pub fn sample_initial_transform_with(
    t_gt: &RigidTransform,
    points: &[Vector3<f64>],
    target: f64,
    lever_mm: f64,
    rng: &mut impl Rng,
) -> Result<RigidTransform> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if !(target >= 0.0) || !target.is_finite() {
        return Err(Error::InvalidArgument("target mTRE must be finite and >= 0".into()));
    }
    if !(lever_mm > 0.0) || !lever_mm.is_finite() {
        return Err(Error::InvalidArgument("rotation lever must be positive".into()));
    }
    let axis = random_unit(rng);
    let tdir = random_unit(rng);
    let ratio: f64 = rng.random_range(0.2..0.8);
    if target == 0.0 {
        return Ok(*t_gt);
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let c_cam = t_gt.apply(&centroid);
    let omega = axis * (ratio / lever_mm);
    let unit = MotionVector::new(omega, tdir * (1.0 - ratio) - omega.cross(&c_cam));
    let error_at = |lambda: f64| -> Result<f64> {
        let t = exp_se3(&unit.scaled(lambda))?.compose(t_gt);
        mtre(&t, t_gt, points)
    };
    let failed = || Error::BisectionFailed {
        target,
        iterations: BISECTION_MAX_ITERATIONS,
    };
    // Keep the rotation angle below pi so the error grows with lambda.
    let lambda_max = 0.999 * std::f64::consts::PI / omega.norm();
    let mut lo = 0.0;
    let mut hi = target.min(lambda_max);
    while error_at(hi)? < target {
        if hi >= lambda_max {
            return Err(failed());
        }
        lo = hi;
        hi = (hi * 2.0).min(lambda_max);
    }
    for _ in 0..BISECTION_MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let e = error_at(mid)?;
        if (e - target).abs() <= SAMPLE_TOLERANCE {
            return exp_se3(&unit.scaled(mid)).map(|t| t.compose(t_gt));
        }
        if e < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(failed())
}

/// A seeded evaluation case: ground truth, sampled initial pose and the
/// identifiers needed to reproduce it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvaluationSample {
    pub sample_id: usize,
    pub view_id: usize,
    pub seed: u64,
    pub t_gt: RigidTransform,
    pub t_init: RigidTransform,
    pub target_mtre: f64,
    pub initial_mtre: f64,
}

impl EvaluationSample {
    /// Draws the target mTRE uniformly from `range` and a matching initial
    /// pose, using an RNG seeded with `seed`.
    pub fn draw(
        sample_id: usize,
        view_id: usize,
        seed: u64,
        t_gt: &RigidTransform,
        points: &[Vector3<f64>],
        range: (f64, f64),
    ) -> Result<Self> {
        Self::draw_with(sample_id, view_id, seed, t_gt, points, range, DEFAULT_ROTATION_LEVER_MM)
    }

    /// [`EvaluationSample::draw`] with an explicit rotation lever, mm.
    pub fn draw_with(
        sample_id: usize,
        view_id: usize,
        seed: u64,
        t_gt: &RigidTransform,
        points: &[Vector3<f64>],
        range: (f64, f64),
        lever_mm: f64,
    ) -> Result<Self> {
        if !(range.0 >= 0.0 && range.1 >= range.0 && range.1.is_finite()) {
            return Err(Error::InvalidArgument("mTRE range must satisfy 0 <= lo <= hi".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = if range.1 > range.0 {
            rng.random_range(range.0..range.1)
        } else {
            range.0
        };
        let t_init = sample_initial_transform_with(t_gt, points, target, lever_mm, &mut rng)?;
        Ok(Self {
            sample_id,
            view_id,
            seed,
            t_gt: *t_gt,
            t_init,
            target_mtre: target,
            initial_mtre: mtre(&t_init, t_gt, points)?,
        })
    }
}

/// Linear interpolation between order statistics; `q` in percent.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorStats {
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
    pub mean: f64,
    pub std: f64,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let (mean, std) = mean_std(values);
        Self {
            p50: percentile(&sorted, 50.0),
            p75: percentile(&sorted, 75.0),
            p95: percentile(&sorted, 95.0),
            mean,
            std,
        }
    }
}

/// Table-style summary of (initial, final) mTRE pairs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub initial: ErrorStats,
    pub final_mtre: ErrorStats,
    pub reduction_mean: f64,
    pub reduction_std: f64,
    /// Per-sample (before, after) pairs.
    pub pairs: Vec<(f64, f64)>,
}

/// Clip applied to the after-values of the scatter export, mm.
pub const SCATTER_CLIP_MM: f64 = 50.0;

impl Summary {
    /// Scatter pairs with the after-value clipped at [`SCATTER_CLIP_MM`].
    pub fn clipped_pairs(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|&(b, a)| (b, a.min(SCATTER_CLIP_MM))).collect()
    }
}

/// Samples whose initial error is zero cannot improve and count as a
/// reduction of 0.
pub fn summarize(results: &[(f64, f64)]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let before: Vec<f64> = results.iter().map(|r| r.0).collect();
    let after: Vec<f64> = results.iter().map(|r| r.1).collect();
    let rf = results
        .iter()
        .map(|&(b, a)| if b > 0.0 { reduction_factor(b, a) } else { Ok(0.0) })
        .collect::<Result<Vec<f64>>>()?;
    let (reduction_mean, reduction_std) = mean_std(&rf);
    Ok(Summary {
        initial: ErrorStats::of(&before),
        final_mtre: ErrorStats::of(&after),
        reduction_mean,
        reduction_std,
        pairs: results.to_vec(),
    })
}
