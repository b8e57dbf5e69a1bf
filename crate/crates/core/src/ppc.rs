//! Point-to-plane correspondence system, its weighted solve and the single
//! registration update.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{
    compute_weights, match_along_normal, oracle_correspondences, select_contour_points,
    CorrespondenceSet, MatchParams, WeightParams, DEFAULT_CONTOUR_EPS,
};
use crate::error::{Error, Result};
use crate::geometry::{exp_se3, MotionVector, ProjectionGeometry, RigidTransform};
use crate::projector::{bin_gradient, gradient_correlation, image_gradient_with, render_drr, GradientImage2D, GradientKernel};
use crate::volume::{SurfacePointSet, Volume};

pub const DEFAULT_RCOND: f64 = 1e-10;

/// Row of the system for camera-frame point `x` constrained to the plane
/// through the source with unit normal `n`: `([x × n, n], -n·x)`.
pub fn ppc_row(x: &Vector3<f64>, n: &Vector3<f64>) -> ([f64; 6], f64) {
    let m = x.cross(n);
    ([m.x, m.y, m.z, n.x, n.y, n.z], -n.dot(x))
}

/// Weighted linear system `diag(w) A dv = diag(w) b`, one row per valid
/// correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct PpcSystem {
    rows: Vec<[f64; 6]>,
    b: Vec<f64>,
    w: Vec<f64>,
    source: Vec<usize>,
}

impl PpcSystem {
    pub fn new(rows: Vec<[f64; 6]>, b: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if rows.len() != b.len() || rows.len() != w.len() {
            return Err(Error::InvalidArgument("row, rhs and weight counts differ".into()));
        }
        if rows.iter().flatten().chain(&b).chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ppc system"));
        }
        if w.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument("weights must be non-negative".into()));
        }
        let source = (0..rows.len()).collect();
        Ok(Self { rows, b, w, source })
    }

    pub fn rows(&self) -> &[[f64; 6]] {
        &self.rows
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// Index of the correspondence each row came from.
    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn with_weights(&self, w: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(self.rows.clone(), self.b.clone(), w)?;
        out.source.clone_from(&self.source);
        Ok(out)
    }

    /// Unweighted residuals `A dv - b`.
    pub fn residuals(&self, dv: &MotionVector) -> Vec<f64> {
        let v = dv.to_array();
        self.rows
            .iter()
            .zip(&self.b)
            .map(|(r, b)| r.iter().zip(&v).map(|(a, x)| a * x).sum::<f64>() - b)
            .collect()
    }
}

/// Builds one row per valid correspondence. The plane contains the source,
/// the matched detector point `p'` and the contour tangent lifted onto the
/// detector; its normal is oriented along the camera-frame gradient.
pub fn build_ppc_rows(
    c: &CorrespondenceSet,
    pose: &RigidTransform,
    geom: &ProjectionGeometry,
) -> Result<PpcSystem> {
    let [su, sv] = geom.pixel_spacing;
    // (row, rhs, weight, source index)
    type Built = Option<([f64; 6], f64, f64, usize)>;
    let built: Vec<Built> = c
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            if !e.valid {
                return None;
            }
            let x = pose.apply(&e.contour.w);
            let d = geom.backproject(&e.p_prime);
            let n2d = e.contour.n2d;
            let tangent = Vector3::new(-n2d.y * su, n2d.x * sv, 0.0);
            let mut n = d.cross(&tangent).try_normalize(0.0)?;
            if n.dot(&pose.rotate(&e.contour.g)) < 0.0 {
                n = -n;
            }
            let (row, b) = ppc_row(&x, &n);
            Some((row, b, e.weight, i))
        })
        .collect();
    let mut sys = PpcSystem {
        rows: Vec::new(),
        b: Vec::new(),
        w: Vec::new(),
        source: Vec::new(),
    };
    for (row, b, w, i) in built.into_iter().flatten() {
        sys.rows.push(row);
        sys.b.push(b);
        sys.w.push(w);
        sys.source.push(i);
    }
    if sys.is_empty() {
        return Err(Error::EmptySystem);
    }
    Ok(sys)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub dv: MotionVector,
    /// Number of retained singular values.
    pub rank: usize,
    /// Ratio of the largest to the smallest retained singular value of the
    /// preconditioned weighted system.
    pub condition_number: f64,
}

/// Minimizes `||diag(w)(A dv - b)||` through an SVD of the column-normalized
/// weighted matrix, truncating singular values below `rcond * sigma_max`.
pub fn solve_weighted(sys: &PpcSystem, rcond: f64) -> Result<Solution> {
    let active: Vec<usize> = (0..sys.len()).filter(|&i| sys.w[i] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::EmptySystem);
    }
    let m = DMatrix::from_fn(active.len(), 6, |r, c| sys.w[active[r]] * sys.rows[active[r]][c]);
    let rhs = DVector::from_iterator(active.len(), active.iter().map(|&i| sys.w[i] * sys.b[i]));
    let scale: Vec<f64> = (0..6)
        .map(|c| {
            let n = m.column(c).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut mp = m;
    for (c, s) in scale.iter().enumerate() {
        mp.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = mp.svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma_max = svd.singular_values.max();
    let cutoff = rcond * sigma_max;
    let proj = u.transpose() * &rhs;
    let mut y = DVector::zeros(6);
    let mut rank = 0;
    let mut sigma_min = f64::INFINITY;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            sigma_min = sigma_min.min(s);
            y += v_t.row(k).transpose() * (proj[k] / s);
        }
    }
    let mut out = [0.0; 6];
    for c in 0..6 {
        out[c] = y[c] / scale[c];
    }
    let condition_number = if rank > 0 { sigma_max / sigma_min } else { f64::INFINITY };
    Ok(Solution {
        dv: MotionVector::from_array(out),
        rank,
        condition_number,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub n_contour: usize,
    pub n_valid: usize,
    pub condition_number: f64,
    /// (|omega| rad, |t| mm) of the applied increment.
    pub motion_norm: (f64, f64),
    pub solver_rank: usize,
    /// False when the step left the pose unchanged.
    pub updated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateParams {
    pub contour_eps: f64,
    pub matching: MatchParams,
    pub weights: WeightParams,
    /// DRR ray-marching step, mm; `None` uses half the smallest voxel spacing.
    pub drr_step: Option<f64>,
    pub gradient_kernel: GradientKernel,
    pub rcond: f64,
    /// Halve the step until the image-space residual decreases (at most
    /// this many times); `0` applies the full step unconditionally.
    pub max_halvings: usize,
    /// With the image matcher, also require that the gradient correlation
    /// of the DRR with the fluoroscopy image does not drop.
    pub check_similarity: bool,
    /// With the image matcher, the step is scaled so that no valid contour
    /// point moves further than this multiple of the search radius
    /// back-projected to its depth; `0` disables the limit.
    pub trust_factor: f64,
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self {
            contour_eps: DEFAULT_CONTOUR_EPS,
            matching: MatchParams::default(),
            weights: WeightParams::default(),
            drr_step: None,
            gradient_kernel: GradientKernel::default(),
            rcond: DEFAULT_RCOND,
            max_halvings: 8,
            check_similarity: true,
            trust_factor: 2.0,
        }
    }
}

/// Source of 2-D correspondences for an update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Matcher {
    /// NCC search against the fluoroscopy gradient image.
    Image,
    /// Exact projections of the contour points under the ground-truth pose.
    Oracle { t_gt: RigidTransform },
}

/// Everything an update needs that stays fixed across iterations.
#[derive(Clone, Copy, Debug)]
pub struct UpdateContext<'a> {
    pub volume: &'a Volume,
    pub surface: &'a SurfacePointSet,
    pub grad_flr: &'a GradientImage2D,
    pub geom: &'a ProjectionGeometry,
}

#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub pose: RigidTransform,
    pub dv: Option<MotionVector>,
    pub diagnostics: UpdateDiagnostics,
    pub correspondences: CorrespondenceSet,
}

/// One contour, match, weight, solve and pose-update cycle. Degenerate
/// weights or an empty system give an outcome with the unchanged pose.
pub fn update_step(
    ctx: &UpdateContext<'_>,
    pose: &RigidTransform,
    params: &UpdateParams,
    matcher: &Matcher,
) -> Result<UpdateOutcome> {
    let contour = select_contour_points(ctx.surface, pose, ctx.geom, params.contour_eps)?;
    let step = params
        .drr_step
        .unwrap_or_else(|| crate::projector::default_step(ctx.volume));
    let render_grad = |t: &RigidTransform| -> Result<GradientImage2D> {
        image_gradient_with(&render_drr(ctx.volume, t, ctx.geom, step)?, params.gradient_kernel)
    };
    let correspondences = match matcher {
        Matcher::Oracle { t_gt } => oracle_correspondences(&contour, t_gt, ctx.geom),
        Matcher::Image => match_along_normal(&contour, &render_grad(pose)?, ctx.grad_flr, &params.matching),
    };
    let mut diagnostics = UpdateDiagnostics {
        n_contour: contour.len(),
        n_valid: correspondences.n_valid(),
        condition_number: f64::INFINITY,
        ..Default::default()
    };
    let unchanged = |diagnostics, correspondences| {
        Ok(UpdateOutcome {
            pose: *pose,
            dv: None,
            diagnostics,
            correspondences,
        })
    };
    let weighted = match compute_weights(correspondences.clone(), &params.weights, pose, ctx.geom) {
        Ok(w) => w,
        Err(Error::DegenerateWeights | Error::EmptySystem) => {
            return unchanged(diagnostics, correspondences)
        }
        Err(e) => return Err(e),
    };
    let solution = match build_ppc_rows(&weighted, pose, ctx.geom)
        .and_then(|sys| solve_weighted(&sys, params.rcond))
    {
        Ok(s) => s,
        Err(Error::EmptySystem) => return unchanged(diagnostics, weighted),
        Err(e) => return Err(e),
    };
    diagnostics.condition_number = solution.condition_number;
    diagnostics.solver_rank = solution.rank;
    let mut dv = solution.dv;
    if matches!(matcher, Matcher::Image) && params.trust_factor > 0.0 {
        let radius_mm = params.trust_factor * params.matching.radius as f64 * ctx.geom.pixel_spacing[0].max(ctx.geom.pixel_spacing[1]) / ctx.geom.sdd;
        dv = limit_step(&weighted, pose, &dv, radius_mm)?;
    }
    let similarity = if matches!(matcher, Matcher::Image) && params.check_similarity {
        Some(Similarity::new(ctx, step, params.gradient_kernel)?)
    } else {
        None
    };
    let baseline = similarity.as_ref().map(|s| s.at(pose)).transpose()?;
    let similar = |t: &RigidTransform| -> Result<bool> {
        match (&similarity, baseline) {
            (Some(s), Some(before)) => Ok(s.at(t)? >= before - SIMILARITY_SLACK),
            _ => Ok(true),
        }
    };
    let Some((dv, new_pose)) = accept_step(&weighted, pose, ctx.geom, &dv, params.max_halvings, similar)? else {
        return unchanged(diagnostics, weighted);
    };
    diagnostics.motion_norm = (dv.omega.norm(), dv.t.norm());
    diagnostics.updated = true;
    Ok(UpdateOutcome {
        pose: new_pose,
        dv: Some(dv),
        diagnostics,
        correspondences: weighted,
    })
}

/// Weighted squared distance, pixels, of the projected contour points to
/// the lines through `p'` along the contour tangent.
pub fn image_residual(c: &CorrespondenceSet, pose: &RigidTransform, geom: &ProjectionGeometry) -> f64 {
    c.entries()
        .iter()
        .filter(|e| e.valid && e.weight > 0.0)
        .map(|e| match geom.project(&pose.apply(&e.contour.w)) {
            Ok(q) => (e.weight * e.contour.n2d.dot(&(q - e.p_prime))).powi(2),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Scales `dv` so that every valid contour point `w` moves at most
/// `radius_per_depth * z` mm, `z` its camera depth under `pose`.
fn limit_step(c: &CorrespondenceSet, pose: &RigidTransform, dv: &MotionVector, radius_per_depth: f64) -> Result<MotionVector> {
    let points: Vec<(Vector3<f64>, f64)> = c
        .entries()
        .iter()
        .filter(|e| e.valid && e.weight > 0.0)
        .map(|e| {
            let x = pose.apply(&e.contour.w);
            (x, radius_per_depth * x.z)
        })
        .collect();
    let mut step = *dv;
    // Displacement is close to linear in the step length; a few rescalings
    // absorb the rotational curvature.
    for _ in 0..8 {
        let t = exp_se3(&step)?;
        let ratio = points
            .iter()
            .map(|(x, cap)| (t.apply(x) - x).norm() / cap)
            .fold(0.0, f64::max);
        if ratio <= 1.0 {
            break;
        }
        step = step.scaled(0.999 / ratio);
    }
    Ok(step)
}

/// Gradient correlation of DRRs with the fluoroscopy image on a binned
/// detector, which is much cheaper to render.
struct Similarity<'a> {
    volume: &'a Volume,
    geom: ProjectionGeometry,
    grad_flr: GradientImage2D,
    step: f64,
    kernel: GradientKernel,
}

const SIMILARITY_BINNING: usize = 2;

impl<'a> Similarity<'a> {
    fn new(ctx: &UpdateContext<'a>, step: f64, kernel: GradientKernel) -> Result<Self> {
        let f = if ctx.geom.width.min(ctx.geom.height) >= 6 * SIMILARITY_BINNING { SIMILARITY_BINNING } else { 1 };
        Ok(Self {
            volume: ctx.volume,
            geom: ctx.geom.binned(f)?,
            grad_flr: bin_gradient(ctx.grad_flr, f)?,
            step: step * f as f64,
            kernel,
        })
    }

    fn at(&self, pose: &RigidTransform) -> Result<f64> {
        let drr = render_drr(self.volume, pose, &self.geom, self.step)?;
        gradient_correlation(&image_gradient_with(&drr, self.kernel)?, &self.grad_flr)
    }
}

/// Tolerated drop of the gradient correlation, so that a vanishing step at
/// the optimum is still accepted.
const SIMILARITY_SLACK: f64 = 1e-6;

/// Backtracking on the step length. The point-to-plane cost shrinks when the
/// object moves toward the source, so the test uses the image-space residual
/// instead, then `accept` on the candidate pose. Returns `None` when no
/// tried step passes.
fn accept_step(
    c: &CorrespondenceSet,
    pose: &RigidTransform,
    geom: &ProjectionGeometry,
    dv: &MotionVector,
    max_halvings: usize,
    accept: impl Fn(&RigidTransform) -> Result<bool>,
) -> Result<Option<(MotionVector, RigidTransform)>> {
    let full = exp_se3(dv)?.compose(pose);
    if max_halvings == 0 {
        return Ok(Some((*dv, full)));
    }
    // Slack so that a vanishing step at the optimum is still accepted.
    let before = image_residual(c, pose, geom) * (1.0 + 1e-9) + 1e-12 * c.len() as f64;
    let mut step = *dv;
    let mut candidate = full;
    for _ in 0..=max_halvings {
        if image_residual(c, &candidate, geom) <= before && accept(&candidate)? {
            return Ok(Some((step, candidate)));
        }
        step = step.scaled(0.5);
        candidate = exp_se3(&step)?.compose(pose);
    }
    Ok(None)
}
