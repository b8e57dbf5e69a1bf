//! Contour-point selection, 1-D matching along the projected contour normal,
//! and correspondence weighting.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ProjectionGeometry, RigidTransform, MIN_DEPTH};
use crate::ppc::{build_ppc_rows, solve_weighted, DEFAULT_RCOND};
use crate::projector::{GradientImage2D, Image2D};
use crate::volume::SurfacePointSet;

/// Default bound on `|g_cam . r|` for a surface point to count as a contour point.
pub const DEFAULT_CONTOUR_EPS: f64 = 0.1;

/// A surface point that lies on the current projected contour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContourPoint {
    /// Index into the surface point set it was selected from.
    pub index: usize,
    /// Position in the volume frame, mm.
    pub w: Vector3<f64>,
    /// Unit gradient in the volume frame.
    pub g: Vector3<f64>,
    /// Projection under the current pose, pixels.
    pub p: Vector2<f64>,
    /// Unit contour normal in the image: the 1-D search direction.
    pub n2d: Vector2<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContourPointSet {
    points: Vec<ContourPoint>,
}

impl ContourPointSet {
    pub fn new(points: Vec<ContourPoint>) -> Result<Self> {
        if points.iter().any(|c| (c.n2d.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::InvalidArgument("contour normals must be unit vectors".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[ContourPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Keeps surface points whose camera-frame gradient is nearly perpendicular
/// to the viewing ray through them and that project onto the detector.
pub fn select_contour_points(
    surface: &SurfacePointSet,
    pose: &RigidTransform,
    geom: &ProjectionGeometry,
    eps: f64,
) -> Result<ContourPointSet> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument("contour eps must lie in (0, 1)".into()));
    }
    let [su, sv] = geom.pixel_spacing;
    let points = surface
        .points()
        .par_iter()
        .zip(surface.gradients().par_iter())
        .enumerate()
        .filter_map(|(index, (w, g))| {
            let x = pose.apply(w);
            if x.z <= MIN_DEPTH {
                return None;
            }
            let ray = x.normalize();
            let g_cam = pose.rotate(g);
            let along = g_cam.dot(&ray);
            if along.abs() >= eps {
                return None;
            }
            let p = geom.project(&x).ok()?;
            if !geom.contains(&p) {
                return None;
            }
            // The plane through the source with normal g_perp meets the detector
            // in the contour line; its pixel-space normal is (n_x su, n_y sv).
            let g_perp = g_cam - ray * along;
            let n = Vector2::new(g_perp.x * su, g_perp.y * sv);
            let norm = n.norm();
            if norm < 1e-9 {
                return None;
            }
            Some(ContourPoint {
                index,
                w: *w,
                g: *g,
                p,
                n2d: n / norm,
            })
        })
        .collect();
    Ok(ContourPointSet { points })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub contour: ContourPoint,
    /// Displacement from `p` to the match, pixels.
    pub dp: Vector2<f64>,
    /// Matched position `p + dp`.
    pub p_prime: Vector2<f64>,
    pub score: f64,
    pub valid: bool,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(contour: ContourPoint, dp: Vector2<f64>, score: f64, valid: bool) -> Self {
        Self {
            contour,
            dp,
            p_prime: contour.p + dp,
            score,
            valid,
            weight: if valid { 1.0 } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    entries: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(entries: Vec<Correspondence>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[Correspondence] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.entries.iter().filter(|c| c.valid).count()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|c| c.weight).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    /// Search radius along the normal, pixels.
    pub radius: usize,
    /// Patch half-width, pixels.
    pub half_width: usize,
    /// Minimum NCC for a valid match.
    pub min_score: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            radius: 20,
            half_width: 5,
            min_score: 0.3,
        }
    }
}

/// Zero-mean, unit-norm copy of `values`, or `None` when they are flat.
fn normalized(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss <= 1e-18 * n * (1.0 + mean * mean) {
        return None;
    }
    let inv = 1.0 / ss.sqrt();
    Some(values.iter().map(|v| (v - mean) * inv).collect())
}

/// Bilinear samples on the grid `p + a n + b t` for `a` in `rows`, `b` in
/// `[-half, half]`, where `t` is `n` turned by 90 degrees. Row-major in `a`.
fn sample_frame(img: &Image2D, p: &Vector2<f64>, n: &Vector2<f64>, rows: std::ops::RangeInclusive<isize>, half: isize) -> Vec<f64> {
    let t = Vector2::new(-n.y, n.x);
    let mut out = Vec::new();
    for a in rows {
        for b in -half..=half {
            out.push(img.sample_bilinear(&(p + n * a as f64 + t * b as f64)));
        }
    }
    out
}

/// Searches integer offsets `k` in `[-radius, radius]` along each contour
/// normal for the best NCC between gradient-magnitude patches of the DRR
/// (at `p`) and the fluoroscopy (at `p + k n2d`), then refines `k` with a
/// parabola through the neighboring scores. Patches are square and aligned
/// with the normal, so neighbouring candidates share samples.
pub fn match_along_normal(
    contour: &ContourPointSet,
    grad_drr: &GradientImage2D,
    grad_flr: &GradientImage2D,
    params: &MatchParams,
) -> CorrespondenceSet {
    let drr = grad_drr.magnitude();
    let flr = grad_flr.magnitude();
    let half = params.half_width as isize;
    let radius = params.radius as isize;
    let width = (2 * half + 1) as usize;
    let (w, h) = (flr.width() as f64, flr.height() as f64);
    // Visit offsets by increasing |k| so ties resolve to the smallest shift.
    let order: Vec<isize> = std::iter::once(0)
        .chain((1..=radius).flat_map(|k| [-k, k]))
        .collect();

    let entries = contour
        .points()
        .par_iter()
        .map(|c| {
            let template = sample_frame(&drr, &c.p, &c.n2d, -half..=half, half);
            let Some(template) = normalized(&template) else {
                return Correspondence::new(*c, Vector2::zeros(), 0.0, false);
            };
            let strip = sample_frame(&flr, &c.p, &c.n2d, -radius - half..=radius + half, half);
            let scores: Vec<Option<f64>> = (0..=2 * radius as usize)
                .map(|j| {
                    let window = &strip[j * width..(j + width) * width];
                    normalized(window).map(|f| dot(&template, &f))
                })
                .collect();
            let score_at = |k: isize| scores[(k + radius) as usize];
            let mut best: Option<(isize, f64)> = None;
            for &k in &order {
                if let Some(s) = score_at(k) {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((k, s));
                    }
                }
            }
            let Some((k_best, s_best)) = best else {
                return Correspondence::new(*c, Vector2::zeros(), 0.0, false);
            };
            let mut offset = k_best as f64;
            // A perfect score is already the exact optimum.
            if s_best < 1.0 - 1e-12 && k_best.abs() < radius {
                if let (Some(sm), Some(sp)) = (score_at(k_best - 1), score_at(k_best + 1)) {
                    let denom = sm - 2.0 * s_best + sp;
                    if denom < 0.0 {
                        offset += (0.5 * (sm - sp) / denom).clamp(-0.5, 0.5);
                    }
                }
            }
            let dp = c.n2d * offset;
            let q = c.p + dp;
            let inside = q.x >= 0.0 && q.y >= 0.0 && q.x <= w - 1.0 && q.y <= h - 1.0;
            Correspondence::new(*c, dp, s_best, s_best >= params.min_score && inside)
        })
        .collect();
    CorrespondenceSet { entries }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ground-truth correspondences: each contour point is matched to the
/// projection of its position under `t_gt`.
pub fn oracle_correspondences(
    contour: &ContourPointSet,
    t_gt: &RigidTransform,
    geom: &ProjectionGeometry,
) -> CorrespondenceSet {
    let entries = contour
        .points()
        .iter()
        .map(|c| match geom.project(&t_gt.apply(&c.w)) {
            Ok(q) => Correspondence::new(*c, q - c.p, 1.0, geom.contains(&q)),
            Err(_) => Correspondence::new(*c, Vector2::zeros(), 0.0, false),
        })
        .collect();
    CorrespondenceSet { entries }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    Uniform,
    #[default]
    Score,
    ScoreIrls,
}

impl std::str::FromStr for WeightStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "score" => Ok(Self::Score),
            "score_irls" => Ok(Self::ScoreIrls),
            other => Err(Error::InvalidArgument(format!("unknown weighting strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightParams {
    pub strategy: WeightStrategy,
    /// Exponent applied to the clamped match score.
    pub gamma: f64,
    /// Huber threshold as a multiple of the residual MAD (IRLS only).
    pub huber_k: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self {
            strategy: WeightStrategy::Score,
            gamma: 2.0,
            huber_k: 1.345,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Assigns correspondence weights. `pose` and `geom` are only used by the
/// IRLS strategy, which pre-solves the unweighted system and damps rows by
/// the Huber factor `min(1, delta / |r|)`, `delta = huber_k * MAD(r)`.
pub fn compute_weights(
    mut set: CorrespondenceSet,
    params: &WeightParams,
    pose: &RigidTransform,
    geom: &ProjectionGeometry,
) -> Result<CorrespondenceSet> {
    for c in &mut set.entries {
        c.weight = match (c.valid, params.strategy) {
            (false, _) => 0.0,
            (true, WeightStrategy::Uniform) => 1.0,
            (true, _) => c.score.max(0.0).powf(params.gamma),
        };
    }
    if set.entries.iter().all(|c| c.weight <= 0.0) {
        return Err(Error::DegenerateWeights);
    }
    if params.strategy == WeightStrategy::ScoreIrls {
        let mut uniform = set.clone();
        for c in &mut uniform.entries {
            c.weight = if c.valid { 1.0 } else { 0.0 };
        }
        let system = build_ppc_rows(&uniform, pose, geom)?;
        let solution = solve_weighted(&system, DEFAULT_RCOND)?;
        let residuals = system.residuals(&solution.dv);
        let mut centered = residuals.clone();
        let med = median(&mut centered);
        let mut deviations: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
        let delta = (params.huber_k * median(&mut deviations)).max(1e-12);
        for (row, r) in system.source().iter().zip(&residuals) {
            let factor = if r.abs() <= delta { 1.0 } else { delta / r.abs() };
            set.entries[*row].weight *= factor;
        }
        if set.entries.iter().all(|c| c.weight <= 0.0) {
            return Err(Error::DegenerateWeights);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{image_gradient, render_drr};
    use crate::volume::{extract_surface_points, make_phantom, CannyParams, PhantomSpec};

    fn geom() -> ProjectionGeometry {
        ProjectionGeometry::centered(1000.0, 200, 1.0).unwrap()
    }

    fn sphere_setup() -> (SurfacePointSet, RigidTransform) {
        let v = make_phantom(&PhantomSpec::sphere(), 0).unwrap();
        let s = extract_surface_points(&v, &CannyParams::default()).unwrap();
        (s, RigidTransform::from_translation(Vector3::new(0.0, 0.0, 500.0)))
    }

    #[test]
    fn sphere_contour_is_silhouette_ring() {
        let (s, pose) = sphere_setup();
        let g = geom();
        let c = select_contour_points(&s, &pose, &g, 0.1).unwrap();
        assert!(c.len() > 100);
        // Silhouette cone of a sphere of radius R at distance d.
        let (r, d) = (30.0f64, 500.0f64);
        let ring = g.sdd * r / (d * d - r * r).sqrt();
        let center = Vector2::from(g.principal_point);
        for cp in c.points() {
            let x = pose.apply(&cp.w);
            assert!(pose.rotate(&cp.g).dot(&x.normalize()).abs() < 0.1);
            assert!(((cp.p - center).norm() - ring).abs() < 2.0, "radius {}", (cp.p - center).norm());
            assert!((cp.n2d.norm() - 1.0).abs() < 1e-9);
            // Gradient points inward, so the normal points to the ring center.
            assert!(cp.n2d.dot(&(center - cp.p).normalize()) > 0.9);
        }
    }

    #[test]
    fn slab_viewed_face_on_has_no_contour() {
        let pts: Vec<_> = (0..50).map(|i| Vector3::new(i as f64 - 25.0, 0.0, 0.0)).collect();
        let s = SurfacePointSet::new(pts, vec![Vector3::z(); 50]).unwrap();
        let pose = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 500.0));
        let c = select_contour_points(&s, &pose, &geom(), 0.1).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn contour_eps_is_validated() {
        let (s, pose) = sphere_setup();
        assert!(select_contour_points(&s, &pose, &geom(), 0.0).is_err());
        assert!(select_contour_points(&s, &pose, &geom(), 1.0).is_err());
    }

    fn edge_image(shift: f64) -> Image2D {
        // Smooth vertical edge plus a weak diagonal texture.
        Image2D::from_fn(96, 96, |u, v| {
            let x = u as f64 - 48.0 - shift;
            10.0 / (1.0 + (-x / 1.5).exp()) + 0.02 * ((u as f64 - shift) * 0.7 + v as f64 * 0.3).sin()
        })
        .unwrap()
    }

    fn vertical_contour(n: usize) -> ContourPointSet {
        let points = (0..n)
            .map(|i| ContourPoint {
                index: i,
                w: Vector3::zeros(),
                g: Vector3::x(),
                p: Vector2::new(48.0, 20.0 + i as f64),
                n2d: Vector2::x(),
            })
            .collect();
        ContourPointSet::new(points).unwrap()
    }

    #[test]
    fn self_match_is_exact() {
        let g = image_gradient(&edge_image(0.0)).unwrap();
        let c = vertical_contour(40);
        let m = match_along_normal(&c, &g, &g, &MatchParams::default());
        for e in m.entries() {
            assert!(e.valid);
            assert_eq!(e.dp, Vector2::zeros());
            assert!((e.score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recovers_shift_along_normal() {
        let drr = image_gradient(&edge_image(0.0)).unwrap();
        let flr = image_gradient(&edge_image(4.0)).unwrap();
        let c = vertical_contour(40);
        let m = match_along_normal(&c, &drr, &flr, &MatchParams::default());
        for e in m.entries() {
            assert!(e.valid);
            assert!((e.dp - Vector2::new(4.0, 0.0)).norm() < 0.5, "dp {}", e.dp);
            // Aperture consistency: dp parallel to n2d.
            let cross = e.dp.x * e.contour.n2d.y - e.dp.y * e.contour.n2d.x;
            assert!(cross.abs() < 1e-9);
            assert_eq!(e.p_prime, e.contour.p + e.dp);
        }
    }

    #[test]
    fn shift_equivariance() {
        let drr = image_gradient(&edge_image(0.0)).unwrap();
        let c = vertical_contour(10);
        for k in [-6.0, -2.0, 3.0, 7.0] {
            let flr = image_gradient(&edge_image(k)).unwrap();
            let m = match_along_normal(&c, &drr, &flr, &MatchParams::default());
            for e in m.entries() {
                assert!((e.dp.x - k).abs() < 0.5, "shift {k}: dp {}", e.dp);
            }
        }
    }

    #[test]
    fn flat_patches_are_invalid() {
        let flat = image_gradient(&Image2D::from_fn(64, 64, |_, _| 3.0).unwrap()).unwrap();
        let c = vertical_contour(5);
        let m = match_along_normal(&c, &flat, &flat, &MatchParams::default());
        assert!(m.entries().iter().all(|e| !e.valid && e.weight == 0.0));
        let edge = image_gradient(&edge_image(0.0)).unwrap();
        let m = match_along_normal(&c, &edge, &flat, &MatchParams::default());
        assert_eq!(m.n_valid(), 0);
    }

    #[test]
    fn lowering_min_score_never_loses_matches() {
        let v = make_phantom(&PhantomSpec::sphere_pair(), 0).unwrap();
        let s = extract_surface_points(&v, &CannyParams::default()).unwrap();
        let g = geom();
        let t_gt = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 400.0));
        let pose = RigidTransform::from_axis_angle(Vector3::new(0.05, 0.02, 0.0), Vector3::new(2.0, -1.0, 400.0));
        let flr = image_gradient(&render_drr(&v, &t_gt, &g, 0.5).unwrap()).unwrap();
        let drr = image_gradient(&render_drr(&v, &pose, &g, 0.5).unwrap()).unwrap();
        let c = select_contour_points(&s, &pose, &g, 0.1).unwrap();
        let mut last = 0;
        for min_score in [0.9, 0.7, 0.5, 0.3, 0.0, -1.0] {
            let params = MatchParams {
                min_score,
                ..Default::default()
            };
            let n = match_along_normal(&c, &drr, &flr, &params).n_valid();
            assert!(n >= last);
            last = n;
        }
        assert!(last > 0);
    }

    fn scored_set(scores: &[f64]) -> CorrespondenceSet {
        let c = vertical_contour(scores.len());
        CorrespondenceSet::new(
            c.points()
                .iter()
                .zip(scores)
                .map(|(p, &s)| Correspondence::new(*p, Vector2::zeros(), s, true))
                .collect(),
        )
    }

    #[test]
    fn uniform_and_score_weights() {
        let pose = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 500.0));
        let g = geom();
        let set = scored_set(&[1.0, 0.5, -0.2]);
        let uniform = WeightParams {
            strategy: WeightStrategy::Uniform,
            ..Default::default()
        };
        let w = compute_weights(set.clone(), &uniform, &pose, &g).unwrap().weights();
        assert_eq!(w, vec![1.0, 1.0, 1.0]);
        let w = compute_weights(set, &WeightParams::default(), &pose, &g).unwrap().weights();
        assert_eq!(w, vec![1.0, 0.25, 0.0]);
    }

    #[test]
    fn all_zero_weights_are_degenerate() {
        let pose = RigidTransform::identity();
        let set = scored_set(&[-0.5, 0.0]);
        assert!(matches!(
            compute_weights(set, &WeightParams::default(), &pose, &geom()),
            Err(Error::DegenerateWeights)
        ));
        let mut invalid = scored_set(&[1.0]);
        invalid.entries[0].valid = false;
        let uniform = WeightParams {
            strategy: WeightStrategy::Uniform,
            ..Default::default()
        };
        assert!(compute_weights(invalid, &uniform, &pose, &geom()).is_err());
    }

    #[test]
    fn irls_downweights_flipped_matches() {
        let v = make_phantom(&PhantomSpec::sphere_pair(), 0).unwrap();
        let s = extract_surface_points(&v, &CannyParams::default()).unwrap();
        let g = geom();
        let t_gt = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 400.0));
        let pose = RigidTransform::from_axis_angle(Vector3::new(0.0, 0.03, 0.02), Vector3::new(3.0, -2.0, 404.0));
        let c = select_contour_points(&s, &pose, &g, 0.1).unwrap();
        let oracle = oracle_correspondences(&c, &t_gt, &g);
        let mut outlier = vec![false; oracle.len()];
        let entries = oracle
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if i % 5 == 0 {
                    outlier[i] = true;
                    Correspondence::new(e.contour, -e.dp * 3.0 - e.contour.n2d * 4.0, 1.0, true)
                } else {
                    *e
                }
            })
            .collect();
        let params = WeightParams {
            strategy: WeightStrategy::ScoreIrls,
            ..Default::default()
        };
        let weighted = compute_weights(CorrespondenceSet::new(entries), &params, &pose, &g).unwrap();
        let (mut inl, mut out): (Vec<f64>, Vec<f64>) = (vec![], vec![]);
        for (e, &o) in weighted.entries().iter().zip(&outlier) {
            if o {
                out.push(e.weight)
            } else {
                inl.push(e.weight)
            }
        }
        let (mi, mo) = (median(&mut inl), median(&mut out));
        assert!(mo < 0.5 * mi, "outlier median {mo}, inlier median {mi}");
        assert!(weighted.entries().iter().all(|e| e.weight == 0.0 || e.valid));
    }
}
