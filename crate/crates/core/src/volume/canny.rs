//! 3D Canny surface extraction.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gradient_field, SurfacePointSet, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    /// Gaussian pre-smoothing, voxels.
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the maximum gradient magnitude.
    pub t_low: f64,
    pub t_high: f64,
    /// Optional cap on the number of emitted points (uniform stride).
    pub max_points: Option<usize>,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            t_low: 0.1,
            t_high: 0.3,
            max_points: None,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma >= 0.0
            && self.t_low > 0.0
            && self.t_high < 1.0
            && self.t_low < self.t_high;
        if !ok {
            return Err(Error::InvalidArgument(
                "canny parameters need sigma >= 0 and 0 < t_low < t_high < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Trilinear read of a scalar grid at continuous index coordinates,
/// clamped to the grid.
pub(crate) fn interpolate_grid(data: &[f64], dims: [usize; 3], f: &Vector3<f64>) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    let mut step = [0usize; 3];
    for a in 0..3 {
        let n = dims[a];
        let c = f[a].clamp(0.0, (n - 1) as f64);
        if n > 1 {
            let i = (c.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = c - i as f64;
            step[a] = 1;
        }
    }
    let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                let w = wx * wy * wz;
                if w != 0.0 {
                    acc += w * data[idx(
                        base[0] + dx * step[0],
                        base[1] + dy * step[1],
                        base[2] + dz * step[2],
                    )];
                }
            }
        }
    }
    acc
}

/// Offset, in continuous voxel-index units, of a one-voxel step along the
/// physical unit direction `dir`.
pub(crate) fn voxel_step(dir: &Vector3<f64>, spacing: [f64; 3]) -> Vector3<f64> {
    let h = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    Vector3::new(dir.x * h / spacing[0], dir.y * h / spacing[1], dir.z * h / spacing[2])
}

/// Gradient magnitude, non-maximum suppression along the gradient direction
/// and hysteresis thresholding. Points are voxel centers in raster order.
pub fn extract_surface_points(v: &Volume, params: &CannyParams) -> Result<SurfacePointSet> {
    params.validate()?;
    let grad = gradient_field(v, params.sigma)?;
    let mag = grad.magnitude();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::EmptySurface);
    }
    let low = params.t_low * max;
    let high = params.t_high * max;
    let dims = v.dims();
    let spacing = v.spacing();

    // 0 = suppressed, 1 = weak, 2 = strong.
    let mut class: Vec<u8> = (0..mag.len())
        .into_par_iter()
        .map(|idx| {
            let m = mag[idx];
            if m < low {
                return 0;
            }
            let i = idx % dims[0];
            let j = (idx / dims[0]) % dims[1];
            let k = idx / (dims[0] * dims[1]);
            let here = Vector3::new(i as f64, j as f64, k as f64);
            let step = voxel_step(&(grad.at(idx) / m), spacing);
            let ahead = interpolate_grid(&mag, dims, &(here + step));
            let behind = interpolate_grid(&mag, dims, &(here - step));
            // Strict on one side so a symmetric ridge keeps a single voxel.
            if m > ahead && m >= behind {
                if m >= high {
                    2
                } else {
                    1
                }
            } else {
                0
            }
        })
        .collect();

    let mut queue: VecDeque<usize> = class
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 2)
        .map(|(i, _)| i)
        .collect();
    while let Some(idx) = queue.pop_front() {
        let i = (idx % dims[0]) as isize;
        let j = ((idx / dims[0]) % dims[1]) as isize;
        let k = (idx / (dims[0] * dims[1])) as isize;
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (a, b, c) = (i + dx, j + dy, k + dz);
                    if a < 0
                        || b < 0
                        || c < 0
                        || a >= dims[0] as isize
                        || b >= dims[1] as isize
                        || c >= dims[2] as isize
                    {
                        continue;
                    }
                    let n = v.index(a as usize, b as usize, c as usize);
                    if class[n] == 1 {
                        class[n] = 2;
                        queue.push_back(n);
                    }
                }
            }
        }
    }

    let mut points = Vec::new();
    let mut gradients = Vec::new();
    for (idx, &c) in class.iter().enumerate() {
        if c != 2 {
            continue;
        }
        let i = idx % dims[0];
        let j = (idx / dims[0]) % dims[1];
        let k = idx / (dims[0] * dims[1]);
        points.push(v.voxel_center(i, j, k));
        gradients.push(grad.at(idx) / mag[idx]);
    }
    if points.is_empty() {
        return Err(Error::EmptySurface);
    }
    let set = SurfacePointSet { points, gradients };
    Ok(match params.max_points {
        Some(cap) => set.capped(cap),
        None => set,
    })
}
