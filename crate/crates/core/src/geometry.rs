//! Rigid transforms, the 6-DOF motion parameterization and the C-arm
//! projection model.
//!
//! Camera frame: the X-ray source sits at the origin and the optical axis
//! points along +z towards the detector, which is the plane `z = sdd`.
//! A [`RigidTransform`] used as a pose maps volume coordinates into this
//! camera frame.

use nalgebra::{Matrix3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum depth (mm) a point must have to be projected.
pub const MIN_DEPTH: f64 = 1.0;

const ORTHONORMAL_TOL: f64 = 1e-9;
const DRIFT_TOL: f64 = 1e-12;

/// Element of SE(3): `x -> rotation * x + translation`, translation in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform after checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform"));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(
                "rotation matrix is not orthonormal".into(),
            ));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(
                "rotation matrix has determinant != +1".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `axis_angle` (radians, axis scaled by angle) followed by
    /// `translation`.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rodrigues(&axis_angle),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Applies only the rotation, e.g. to carry a direction into the camera frame.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self.compose(other)(x) == self.apply(&other.apply(x))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if drift > DRIFT_TOL {
            rotation = nearest_rotation(&rotation);
        }
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle (rad) of the rotational part.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

/// Projects a matrix onto SO(3) (closest rotation in Frobenius norm).
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * v_t;
    }
    r
}

/// Twist increment `dv = (omega, t)`: rotation part in radians, translation
/// part in mm. Acts on camera-frame points as the velocity `omega x X + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MotionVector {
    pub omega: Vector3<f64>,
    pub t: Vector3<f64>,
}

impl MotionVector {
    pub fn new(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self { omega, t }
    }

    /// Packs into `[omega_x, omega_y, omega_z, t_x, t_y, t_z]`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.t.x,
            self.t.y,
            self.t.z,
        ]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            omega: Vector3::new(v[0], v[1], v[2]),
            t: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            omega: self.omega * s,
            t: self.t * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.t.iter()).all(|v| v.is_finite())
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Coefficients `(sin θ / θ, (1 - cos θ) / θ², (θ - sin θ) / θ³)` with
/// Taylor expansions near zero.
fn so3_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = so3_coefficients(omega.norm());
    let k = skew(omega);
    Matrix3::identity() + k * a + k * k * b
}

/// Exponential map of SE(3): Rodrigues rotation and left-Jacobian translation.
pub fn exp_se3(dv: &MotionVector) -> Result<RigidTransform> {
    if !dv.is_finite() {
        return Err(Error::NonFinite("motion vector"));
    }
    let (a, b, c) = so3_coefficients(dv.omega.norm());
    let k = skew(&dv.omega);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Ok(RigidTransform {
        rotation,
        translation: v * dv.t,
    })
}

/// Source/detector geometry of a C-arm with an ideal pinhole source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    /// Source-to-detector distance, mm.
    pub sdd: f64,
    pub width: usize,
    pub height: usize,
    /// Pixel spacing `(su, sv)`, mm/pixel.
    pub pixel_spacing: [f64; 2],
    /// Principal point `(cu, cv)`, pixels.
    pub principal_point: [f64; 2],
}

impl ProjectionGeometry {
    pub fn new(
        sdd: f64,
        width: usize,
        height: usize,
        pixel_spacing: [f64; 2],
        principal_point: [f64; 2],
    ) -> Result<Self> {
        let g = Self {
            sdd,
            width,
            height,
            pixel_spacing,
            principal_point,
        };
        g.validate()?;
        Ok(g)
    }

    /// Square detector with the principal point at its center.
    pub fn centered(sdd: f64, size: usize, pixel_spacing: f64) -> Result<Self> {
        let c = (size as f64 - 1.0) * 0.5;
        Self::new(sdd, size, size, [pixel_spacing; 2], [c, c])
    }

    /// Detector read out in `factor x factor` pixel bins over the same
    /// field of view; trailing pixels that do not fill a bin are dropped.
    pub fn binned(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("bin factor must be positive".into()));
        }
        let f = factor as f64;
        let [cu, cv] = self.principal_point;
        let shift = (f - 1.0) * 0.5;
        Self::new(
            self.sdd,
            self.width / factor,
            self.height / factor,
            [self.pixel_spacing[0] * f, self.pixel_spacing[1] * f],
            [(cu - shift) / f, (cv - shift) / f],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.sdd,
            self.pixel_spacing[0],
            self.pixel_spacing[1],
            self.principal_point[0],
            self.principal_point[1],
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("projection geometry"));
        }
        if self.sdd <= 0.0 {
            return Err(Error::InvalidArgument("sdd must be positive".into()));
        }
        if self.pixel_spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument(
                "pixel spacing must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("detector has zero size".into()));
        }
        let [cu, cv] = self.principal_point;
        if !(0.0..=self.width as f64).contains(&cu) || !(0.0..=self.height as f64).contains(&cv) {
            return Err(Error::InvalidArgument(
                "principal point lies outside the detector".into(),
            ));
        }
        Ok(())
    }

    /// Perspective projection of a camera-frame point to pixel coordinates.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if x.z <= MIN_DEPTH {
            return Err(Error::PointBehindSource { z: x.z });
        }
        let [su, sv] = self.pixel_spacing;
        let [cu, cv] = self.principal_point;
        let m = self.sdd / x.z;
        Ok(Vector2::new(x.x * m / su + cu, x.y * m / sv + cv))
    }

    /// Lifts a pixel to its point on the detector plane (camera frame, mm).
    pub fn backproject(&self, p: &Vector2<f64>) -> Vector3<f64> {
        let [su, sv] = self.pixel_spacing;
        let [cu, cv] = self.principal_point;
        Vector3::new((p.x - cu) * su, (p.y - cv) * sv, self.sdd)
    }

    /// True when `p` lies within the pixel-center extent of the detector.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }
}
