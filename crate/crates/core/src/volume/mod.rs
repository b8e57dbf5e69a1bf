//! Voxel volumes, trilinear sampling and smoothed gradient fields.

mod canny;
mod phantom;

pub use canny::{extract_surface_points, CannyParams};
pub use phantom::{make_phantom, PhantomSpec, Primitive, Shape};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar voxel grid. Voxel `(i, j, k)` is centered at
/// `origin + (i * sx, j * sy, k * sz)`; storage is x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vector3<f64>,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Vector3<f64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("volume dimensions must be positive".into()));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument("voxel spacing must be positive".into()));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume origin"));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "volume data has {} values, dimensions require {expected}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// All-zero volume whose voxel centers are symmetric about the frame origin.
    pub fn zeros_centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = centered_origin(dims, spacing);
        Self::new(dims, spacing, origin, vec![0.0; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume by evaluating `f` at every voxel center.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: Vector3<f64>,
        f: impl Fn(Vector3<f64>) -> f32 + Sync,
    ) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let i = idx % dims[0];
                let j = (idx / dims[0]) % dims[1];
                let k = idx / (dims[0] * dims[1]);
                f(origin
                    + Vector3::new(
                        i as f64 * spacing[0],
                        j as f64 * spacing[1],
                        k as f64 * spacing[2],
                    ))
            })
            .collect();
        Self::new(dims, spacing, origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                i as f64 * self.spacing[0],
                j as f64 * self.spacing[1],
                k as f64 * self.spacing[2],
            )
    }

    /// Corners of the voxel-center hull, the region where sampling is defined.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let max = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (self.origin, max)
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|a| x[a] >= lo[a] && x[a] <= hi[a])
    }

    /// Continuous voxel-index coordinates of a physical point.
    pub fn to_index(&self, x: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (x.x - self.origin.x) / self.spacing[0],
            (x.y - self.origin.y) / self.spacing[1],
            (x.z - self.origin.z) / self.spacing[2],
        )
    }

    /// Trilinear interpolation at a physical point; 0 outside the bounds.
    pub fn sample_trilinear(&self, x: &Vector3<f64>) -> f64 {
        let f = self.to_index(x);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let c = f[a];
            if !(c >= 0.0 && c <= (n - 1) as f64) {
                return 0.0;
            }
            if n == 1 {
                continue;
            }
            let i = (c.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = c - i as f64;
        }
        let step = [
            usize::from(self.dims[0] > 1),
            usize::from(self.dims[1] > 1),
            usize::from(self.dims[2] > 1),
        ];
        let mut acc = 0.0;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    let v = self.value(
                        base[0] + dx * step[0],
                        base[1] + dy * step[1],
                        base[2] + dz * step[2],
                    );
                    acc += wx * wy * wz * v as f64;
                }
            }
        }
        acc
    }

    /// Multiplies every voxel by `factor`.
    pub fn scaled(&self, factor: f32) -> Volume {
        Volume {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Origin placing the voxel-center hull symmetrically about zero.
pub fn centered_origin(dims: [usize; 3], spacing: [f64; 3]) -> Vector3<f64> {
    Vector3::new(
        -0.5 * (dims[0] as f64 - 1.0) * spacing[0],
        -0.5 * (dims[1] as f64 - 1.0) * spacing[1],
        -0.5 * (dims[2] as f64 - 1.0) * spacing[2],
    )
}

/// Per-voxel gradient of a (smoothed) volume, in density/mm.
#[derive(Clone, Debug)]
pub struct GradientField {
    dims: [usize; 3],
    spacing: [f64; 3],
    gx: Vec<f64>,
    gy: Vec<f64>,
    gz: Vec<f64>,
}

impl GradientField {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Vector3<f64> {
        Vector3::new(self.gx[idx], self.gy[idx], self.gz[idx])
    }

    pub fn magnitude(&self) -> Vec<f64> {
        (0..self.gx.len())
            .into_par_iter()
            .map(|i| self.at(i).norm())
            .collect()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Convolves along `axis` with edge clamping.
fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let pos = ((idx / stride) % dims[axis]) as isize;
            let base = idx - pos as usize * stride;
            kernel
                .iter()
                .enumerate()
                .map(|(t, w)| {
                    let q = (pos + t as isize - radius).clamp(0, n - 1) as usize;
                    w * data[base + q * stride]
                })
                .sum()
        })
        .collect()
}

fn derivative_axis(data: &[f64], dims: [usize; 3], axis: usize, spacing: f64) -> Vec<f64> {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            if n < 2 {
                return 0.0;
            }
            let pos = (idx / stride) % n;
            let lo = pos.saturating_sub(1);
            let hi = (pos + 1).min(n - 1);
            let base = idx - pos * stride;
            (data[base + hi * stride] - data[base + lo * stride]) / ((hi - lo) as f64 * spacing)
        })
        .collect()
}

/// Separable Gaussian smoothing (`sigma` in voxels, kernel truncated at 3σ,
/// edge-clamped) followed by central differences scaled to density/mm.
/// Border voxels use one-sided differences.
pub fn gradient_field(v: &Volume, sigma: f64) -> Result<GradientField> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument("sigma must be a finite value >= 0".into()));
    }
    let mut smoothed: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    if sigma > 0.0 {
        let kernel = gaussian_kernel(sigma);
        for axis in 0..3 {
            smoothed = convolve_axis(&smoothed, v.dims, axis, &kernel);
        }
    }
    Ok(GradientField {
        dims: v.dims,
        spacing: v.spacing,
        gx: derivative_axis(&smoothed, v.dims, 0, v.spacing[0]),
        gy: derivative_axis(&smoothed, v.dims, 1, v.spacing[1]),
        gz: derivative_axis(&smoothed, v.dims, 2, v.spacing[2]),
    })
}

/// Surface points (volume frame, mm) with unit gradients pointing towards
/// increasing density.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfacePointSet {
    points: Vec<Vector3<f64>>,
    gradients: Vec<Vector3<f64>>,
}

impl SurfacePointSet {
    pub fn new(points: Vec<Vector3<f64>>, gradients: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != gradients.len() {
            return Err(Error::InvalidArgument(
                "points and gradients differ in length".into(),
            ));
        }
        if !points.iter().chain(gradients.iter()).all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("surface points"));
        }
        if gradients.iter().any(|g| (g.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::InvalidArgument("surface gradients must be unit vectors".into()));
        }
        Ok(Self { points, gradients })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn gradients(&self) -> &[Vector3<f64>] {
        &self.gradients
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Centroid of the points, or zero for an empty set.
    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Keeps every `stride`-th point so that at most `max` remain.
    pub fn capped(&self, max: usize) -> SurfacePointSet {
        if max == 0 || self.len() <= max {
            return self.clone();
        }
        let stride = self.len().div_ceil(max);
        SurfacePointSet {
            points: self.points.iter().step_by(stride).copied().collect(),
            gradients: self.gradients.iter().step_by(stride).copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        Volume::from_fn([24, 20, 18], [1.0, 0.5, 2.0], Vector3::new(-3.0, 1.0, 2.0), |x| {
            (2.0 * x.x) as f32
        })
        .unwrap()
    }

    #[test]
    fn new_validates() {
        let o = Vector3::zeros();
        assert!(Volume::new([2, 2, 2], [1.0; 3], o, vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [0.0, 1.0, 1.0], o, vec![0.0; 8]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], o, vec![f32::NAN; 8]).is_err());
        assert!(Volume::new([0, 2, 2], [1.0; 3], o, vec![]).is_err());
    }

    #[test]
    fn sample_at_voxel_center() {
        let v = Volume::from_fn([5, 6, 7], [1.0, 2.0, 0.5], Vector3::new(1.0, -2.0, 3.0), |x| {
            (x.x * 3.0 + x.y - x.z * x.z) as f32
        })
        .unwrap();
        for &(i, j, k) in &[(0, 0, 0), (4, 5, 6), (2, 3, 1)] {
            let c = v.voxel_center(i, j, k);
            assert_eq!(v.sample_trilinear(&c), v.value(i, j, k) as f64);
        }
    }

    #[test]
    fn sample_midpoint_interpolates() {
        let mut data = vec![0.0f32; 8];
        data[0] = 2.0;
        data[1] = 4.0;
        let v = Volume::new([2, 2, 2], [1.0; 3], Vector3::zeros(), data).unwrap();
        assert_eq!(v.sample_trilinear(&Vector3::new(0.5, 0.0, 0.0)), 3.0);
    }

    #[test]
    fn sample_outside_is_zero() {
        let v = Volume::from_fn([4, 4, 4], [1.0; 3], Vector3::zeros(), |_| 5.0).unwrap();
        assert_eq!(v.sample_trilinear(&Vector3::new(-0.01, 1.0, 1.0)), 0.0);
        assert_eq!(v.sample_trilinear(&Vector3::new(1.0, 3.01, 1.0)), 0.0);
        assert_eq!(v.sample_trilinear(&Vector3::new(3.0, 3.0, 3.0)), 5.0);
    }

    #[test]
    fn ramp_gradient_is_exact_in_interior() {
        let v = ramp();
        for sigma in [0.0, 1.0, 1.7] {
            let g = gradient_field(&v, sigma).unwrap();
            let margin = (3.0 * sigma).ceil() as usize + 1;
            let [nx, ny, nz] = v.dims();
            for k in 0..nz {
                for j in 0..ny {
                    for i in margin..nx - margin {
                        let d = g.at(v.index(i, j, k));
                        assert!((d - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-6, "sigma {sigma}: {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn ramp_gradient_has_zero_curl() {
        let v = ramp();
        let g = gradient_field(&v, 1.0).unwrap();
        let [nx, ny, nz] = v.dims();
        let s = v.spacing();
        // d(gx)/dy and d(gy)/dx on interior voxels.
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 5..nx - 5 {
                    let dgx_dy = (g.at(v.index(i, j + 1, k)).x - g.at(v.index(i, j - 1, k)).x) / (2.0 * s[1]);
                    let dgy_dx = (g.at(v.index(i + 1, j, k)).y - g.at(v.index(i - 1, j, k)).y) / (2.0 * s[0]);
                    let dgx_dz = (g.at(v.index(i, j, k + 1)).x - g.at(v.index(i, j, k - 1)).x) / (2.0 * s[2]);
                    assert!((dgx_dy - dgy_dx).abs() < 1e-9);
                    assert!(dgx_dz.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_volume_has_zero_gradient() {
        let v = Volume::from_fn([8, 8, 8], [1.0; 3], Vector3::zeros(), |_| 3.5).unwrap();
        let g = gradient_field(&v, 1.0).unwrap();
        assert!(g.magnitude().iter().all(|&m| m.abs() < 1e-12));
    }

    #[test]
    fn sphere_gradient_points_inward() {
        let dims = [64; 3];
        let origin = centered_origin(dims, [1.0; 3]);
        let v = Volume::from_fn(dims, [1.0; 3], origin, |x| if x.norm() <= 20.0 { 1.0 } else { 0.0 }).unwrap();
        let g = gradient_field(&v, 1.0).unwrap();
        let mut checked = 0;
        for k in 0..64 {
            for j in 0..64 {
                for i in 0..64 {
                    let c = v.voxel_center(i, j, k);
                    if (c.norm() - 20.0).abs() > 0.75 {
                        continue;
                    }
                    let d = g.at(v.index(i, j, k));
                    let alignment = d.normalize().dot(&c.normalize());
                    assert!(alignment < -0.95, "alignment {alignment} at {c}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn surface_set_invariants() {
        assert!(SurfacePointSet::new(vec![Vector3::zeros()], vec![]).is_err());
        assert!(SurfacePointSet::new(vec![Vector3::zeros()], vec![Vector3::new(0.0, 2.0, 0.0)]).is_err());
        let s = SurfacePointSet::new(
            (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect(),
            vec![Vector3::x(); 10],
        )
        .unwrap();
        let c = s.capped(4);
        assert_eq!(c.len(), 4);
        assert_eq!(c.points()[1].x, 3.0);
        assert_eq!(s.capped(0).len(), 10);
    }
}
