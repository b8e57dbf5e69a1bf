//! DRR rendering by ray marching and 2D gradient images.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ProjectionGeometry, RigidTransform};
use crate::volume::Volume;

/// Row-major scalar image; pixel `(u, v)` is at `data[v * width + u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "image data has {} values, {width}x{height} requires {}",
                data.len(),
                width * height
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image data"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let data = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// Bilinear read at sub-pixel position; 0 outside the pixel-center extent.
    pub fn sample_bilinear(&self, p: &Vector2<f64>) -> f64 {
        bilinear(&self.data, self.width, self.height, p).unwrap_or(0.0)
    }
}

/// Per-pixel partial derivatives, in intensity units per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientImage2D {
    width: usize,
    height: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl GradientImage2D {
    pub fn new(width: usize, height: usize, gx: Vec<f64>, gy: Vec<f64>) -> Result<Self> {
        if gx.len() != width * height || gy.len() != width * height {
            return Err(Error::InvalidArgument("gradient component size mismatch".into()));
        }
        if !gx.iter().chain(gy.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradient image"));
        }
        Ok(Self {
            width,
            height,
            gx,
            gy,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gx(&self) -> &[f64] {
        &self.gx
    }

    pub fn gy(&self) -> &[f64] {
        &self.gy
    }

    pub fn get(&self, u: usize, v: usize) -> Vector2<f64> {
        let i = v * self.width + u;
        Vector2::new(self.gx[i], self.gy[i])
    }

    pub fn magnitude(&self) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self
                .gx
                .iter()
                .zip(&self.gy)
                .map(|(x, y)| x.hypot(*y))
                .collect(),
        }
    }
}

fn bilinear(data: &[f64], width: usize, height: usize, p: &Vector2<f64>) -> Option<f64> {
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64) {
        return None;
    }
    let u0 = (p.x.floor() as usize).min(width.saturating_sub(2));
    let v0 = (p.y.floor() as usize).min(height.saturating_sub(2));
    let fu = p.x - u0 as f64;
    let fv = p.y - v0 as f64;
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let at = |u: usize, v: usize| data[v * width + u];
    Some(
        (1.0 - fv) * ((1.0 - fu) * at(u0, v0) + fu * at(u1, v0))
            + fv * ((1.0 - fu) * at(u0, v1) + fu * at(u1, v1)),
    )
}

/// Ray parameters `[t_enter, t_exit]` of a ray against an axis-aligned box.
fn clip_ray(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Default ray-marching step: half the smallest voxel spacing.
pub fn default_step(v: &Volume) -> f64 {
    0.5 * v.spacing().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Line integrals of density through the volume posed by `pose`
/// (volume -> camera), one ray per detector pixel center.
pub fn render_drr(
    v: &Volume,
    pose: &RigidTransform,
    geom: &ProjectionGeometry,
    step: f64,
) -> Result<Image2D> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument("ray step must be positive".into()));
    }
    geom.validate()?;
    let volume_from_camera = pose.inverse();
    let source = volume_from_camera.apply(&Vector3::zeros());
    let (lo, hi) = v.bounds();
    let width = geom.width;
    let mut data = vec![0.0; width * geom.height];
    data.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
        for (col, px) in out.iter_mut().enumerate() {
            let d = geom.backproject(&Vector2::new(col as f64, row as f64));
            let dir = volume_from_camera.rotate(&d.normalize());
            let Some((t0, t1)) = clip_ray(&source, &dir, &lo, &hi) else {
                continue;
            };
            let length = t1 - t0;
            let n = (length / step).ceil().max(1.0) as usize;
            let h = length / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let t = t0 + (k as f64 + 0.5) * h;
                acc += v.sample_trilinear(&(source + dir * t));
            }
            *px = acc * h;
        }
    });
    Image2D::new(width, geom.height, data)
}

/// Simulated fluoroscopy: a DRR at the true pose plus optional additive
/// Gaussian noise (`noise_sigma = 0` disables it).
pub fn simulate_fluoro(
    v: &Volume,
    t_gt: &RigidTransform,
    geom: &ProjectionGeometry,
    step: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Image2D> {
    let img = render_drr(v, t_gt, geom, step)?;
    if noise_sigma <= 0.0 {
        return Ok(img);
    }
    let normal = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img.data.iter().map(|x| x + normal.sample(&mut rng)).collect();
    Image2D::new(img.width, img.height, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientKernel {
    #[default]
    Central,
    Sobel,
}

/// Central differences in the interior, one-sided at the borders.
pub fn image_gradient(img: &Image2D) -> Result<GradientImage2D> {
    image_gradient_with(img, GradientKernel::Central)
}

pub fn image_gradient_with(img: &Image2D, kernel: GradientKernel) -> Result<GradientImage2D> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
        });
    }
    let central = |u: usize, v: usize| -> (f64, f64) {
        let (ul, ur) = (u.saturating_sub(1), (u + 1).min(w - 1));
        let (vl, vr) = (v.saturating_sub(1), (v + 1).min(h - 1));
        (
            (img.get(ur, v) - img.get(ul, v)) / (ur - ul) as f64,
            (img.get(u, vr) - img.get(u, vl)) / (vr - vl) as f64,
        )
    };
    let sobel = |u: usize, v: usize| -> (f64, f64) {
        let at = |du: isize, dv: isize| {
            let uu = (u as isize + du).clamp(0, w as isize - 1) as usize;
            let vv = (v as isize + dv).clamp(0, h as isize - 1) as usize;
            img.get(uu, vv)
        };
        let gx = (at(1, -1) + 2.0 * at(1, 0) + at(1, 1) - at(-1, -1) - 2.0 * at(-1, 0) - at(-1, 1)) / 8.0;
        let gy = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1) - at(-1, -1) - 2.0 * at(0, -1) - at(1, -1)) / 8.0;
        (gx, gy)
    };
    let (gx, gy): (Vec<f64>, Vec<f64>) = (0..w * h)
        .into_par_iter()
        .map(|i| match kernel {
            GradientKernel::Central => central(i % w, i / w),
            GradientKernel::Sobel => sobel(i % w, i / w),
        })
        .unzip();
    GradientImage2D::new(w, h, gx, gy)
}

/// Bilinear read of both gradient components; zero outside the image.
pub fn sample_gradient(g: &GradientImage2D, p: &Vector2<f64>) -> Vector2<f64> {
    match (
        bilinear(&g.gx, g.width, g.height, p),
        bilinear(&g.gy, g.width, g.height, p),
    ) {
        (Some(x), Some(y)) => Vector2::new(x, y),
        _ => Vector2::zeros(),
    }
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa > 0.0 && bb > 0.0 {
        ab / (aa * bb).sqrt()
    } else {
        0.0
    }
}

/// Block average over `factor x factor` pixels, matching
/// [`ProjectionGeometry::binned`].
pub fn bin_gradient(g: &GradientImage2D, factor: usize) -> Result<GradientImage2D> {
    if factor == 0 {
        return Err(Error::InvalidArgument("bin factor must be positive".into()));
    }
    let (w, h) = (g.width / factor, g.height / factor);
    let pool = |data: &[f64]| -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (bu, bv) = (i % w, i / w);
                let mut acc = 0.0;
                for v in bv * factor..(bv + 1) * factor {
                    acc += data[v * g.width + bu * factor..v * g.width + (bu + 1) * factor].iter().sum::<f64>();
                }
                acc / (factor * factor) as f64
            })
            .collect()
    };
    GradientImage2D::new(w, h, pool(&g.gx), pool(&g.gy))
}

/// Mean normalized cross-correlation of the x and the y gradient
/// components; a flat component contributes 0.
pub fn gradient_correlation(a: &GradientImage2D, b: &GradientImage2D) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::InvalidArgument("gradient images differ in size".into()));
    }
    Ok(0.5 * (ncc(&a.gx, &b.gx) + ncc(&a.gy, &b.gy)))
}
