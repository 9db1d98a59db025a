//! Pinhole cameras, stratified ray sampling and emission-absorption compositing.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{density_from_distance, RadianceField, ShellSample};
use crate::geometry::{Bvh, TriangleMesh, Vec3};

pub use crate::geometry::Ray;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera focal length must be positive, got {0}")]
    BadFocal(f64),
    #[error("camera rotation is not orthonormal (error {0:e})")]
    NotRigid(f64),
    #[error("camera transform is not finite")]
    NotFinite,
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels.
    pub focal: f64,
    /// Camera-to-world transform; the camera looks down its local -z axis with +y up.
    pub c2w: Matrix4<f64>,
}

impl Camera {
    pub fn new(width: u32, height: u32, focal: f64, c2w: Matrix4<f64>) -> Result<Self, RenderError> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(RenderError::BadFocal(focal));
        }
        if c2w.iter().any(|v| !v.is_finite()) {
            return Err(RenderError::NotFinite);
        }
        let r = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(RenderError::NotRigid(err));
        }
        Ok(Self {
            width,
            height,
            focal,
            c2w,
        })
    }

    /// Focal length from the horizontal field of view.
    pub fn from_fov(width: u32, height: u32, fov_x: f64, c2w: Matrix4<f64>) -> Result<Self, RenderError> {
        Self::new(width, height, 0.5 * width as f64 / (0.5 * fov_x).tan(), c2w)
    }

    pub fn fov_x(&self) -> f64 {
        2.0 * (0.5 * self.width as f64 / self.focal).atan()
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(width: u32, height: u32, focal: f64, eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, RenderError> {
        let back = (eye - target).normalize();
        let right = up.cross(&back).normalize();
        let true_up = back.cross(&right);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Self::new(width, height, focal, m)
    }

    pub fn origin(&self) -> Vec3 {
        self.c2w.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.c2w.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// World-space unit direction through the center of pixel `(i, j)` (column, row).
    pub fn pixel_direction(&self, i: u32, j: u32) -> Vec3 {
        let x = (i as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = -(j as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        (self.rotation() * Vec3::new(x, y, -1.0)).normalize()
    }

    pub fn pixel_ray(&self, i: u32, j: u32, near: f64, far: f64) -> Ray {
        Ray {
            origin: self.origin(),
            direction: self.pixel_direction(i, j),
            t_near: near,
            t_far: far,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// One ray per pixel, row-major.
pub fn generate_rays(camera: &Camera, near: f64, far: f64) -> Vec<Ray> {
    (0..camera.height)
        .flat_map(|j| (0..camera.width).map(move |i| (i, j)))
        .map(|(i, j)| camera.pixel_ray(i, j, near, far))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Keep alpha; color is premultiplied over black for losses and metrics.
    Transparent,
    /// Composite over a solid color.
    Color([f64; 3]),
}

impl Background {
    pub fn rgb(&self) -> [f64; 3] {
        match self {
            Background::Transparent => [0.0; 3],
            Background::Color(c) => *c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub background: Background,
    pub seed: u64,
    pub near: f64,
    pub far: f64,
    /// Skip field evaluation outside the shell interval found from the BVH.
    pub shell_clipping: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples_per_ray: 128,
            stratified: true,
            background: Background::Transparent,
            seed: 0,
            near: 2.0,
            far: 6.0,
            shell_clipping: true,
        }
    }
}

/// Sample depths, one per bin of `[t_near, t_far]`: uniform within the bin
/// when `stratified`, the bin midpoint otherwise.
pub fn sample_stratified(ray: &Ray, n: usize, stratified: bool, rng: &mut impl Rng) -> Vec<f64> {
    let n = n.max(1);
    let step = (ray.t_far - ray.t_near) / n as f64;
    (0..n)
        .map(|i| {
            let u = if stratified { rng.gen::<f64>() } else { 0.5 };
            ray.t_near + (i as f64 + u) * step
        })
        .collect()
}

/// Interval lengths for samples `ts`; the last interval runs to `t_far`.
pub fn sample_deltas(ts: &[f64], t_far: f64) -> Vec<f64> {
    (0..ts.len())
        .map(|i| {
            let next = if i + 1 < ts.len() { ts[i + 1] } else { t_far };
            (next - ts[i]).max(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    /// Premultiplied color.
    pub rgb: [f64; 3],
    pub alpha: f64,
    /// `T_1 ..= T_{N+1}`.
    pub transmittance: Vec<f64>,
}

/// Quadrature `C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i`, `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn composite(sigma: &[f64], rgb: &[[f64; 3]], delta: &[f64]) -> Composite {
    let mut trans = Vec::with_capacity(sigma.len() + 1);
    let mut t = 1.0;
    let mut acc = [0.0; 3];
    trans.push(t);
    for i in 0..sigma.len() {
        let tau = sigma[i] * delta[i];
        if tau > 0.0 {
            let keep = (-tau).exp();
            let w = t * (1.0 - keep);
            for k in 0..3 {
                acc[k] += w * rgb[i][k];
            }
            t *= keep;
        }
        trans.push(t);
    }
    Composite {
        rgb: acc,
        alpha: 1.0 - t,
        transmittance: trans,
    }
}

/// Gradients of `d_rgb . C + d_alpha * alpha` with respect to every sample's density and color.
pub fn composite_backward(
    sigma: &[f64],
    rgb: &[[f64; 3]],
    delta: &[f64],
    comp: &Composite,
    d_rgb: [f64; 3],
    d_alpha: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = sigma.len();
    let t_end = comp.transmittance[n];
    let mut d_sigma = vec![0.0; n];
    let mut d_col = vec![[0.0; 3]; n];
    // Running sum of d_rgb . (w_j c_j) over j > i.
    let mut tail = 0.0;
    for i in (0..n).rev() {
        let t_i = comp.transmittance[i];
        let t_next = comp.transmittance[i + 1];
        let w = t_i - t_next;
        let proj = d_rgb[0] * rgb[i][0] + d_rgb[1] * rgb[i][1] + d_rgb[2] * rgb[i][2];
        d_col[i] = [w * d_rgb[0], w * d_rgb[1], w * d_rgb[2]];
        d_sigma[i] = delta[i] * (t_next * proj - tail + d_alpha * t_end);
        tail += w * proj;
    }
    (d_sigma, d_col)
}

/// Anything that can be ray-marched: density and color at points plus a
/// conservative interval outside which density is exactly zero.
pub trait VolumeScene: Sync {
    fn support(&self, ray: &Ray) -> Option<(f64, f64)>;

    /// Density and color at each point; density 0 means empty space.
    fn eval(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])>;

    /// Rays for which this returns false render as fully transparent.
    fn keep_ray(&self, _ray: &Ray) -> bool {
        true
    }
}

/// A trained field over its own mesh.
pub struct FieldScene<'a> {
    pub field: &'a RadianceField,
    pub mesh: &'a TriangleMesh,
    pub bvh: &'a Bvh,
}

impl<'a> FieldScene<'a> {
    pub fn new(field: &'a RadianceField, mesh: &'a TriangleMesh, bvh: &'a Bvh) -> Self {
        Self { field, mesh, bvh }
    }
}

impl VolumeScene for FieldScene<'_> {
    fn support(&self, ray: &Ray) -> Option<(f64, f64)> {
        self.bvh.shell_interval(ray, self.field.epsilon())
    }

    fn eval(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])> {
        let eps = self.field.epsilon();
        let mut idx = Vec::new();
        let mut samples = Vec::new();
        for (i, x) in points.iter().enumerate() {
            if let Some(sp) = self.bvh.closest_point_within(self.mesh, x, eps) {
                idx.push(i);
                samples.push(ShellSample { x: *x, surface: sp });
            }
        }
        let batch = self.field.forward(&samples, None);
        let mut out = vec![(0.0, [0.0; 3]); points.len()];
        for (k, &i) in idx.iter().enumerate() {
            out[i] = (batch.sigma[k], batch.rgb[k]);
        }
        out
    }
}

/// Smooth color used for synthetic ground truth.
pub fn procedural_color(x: &Vec3) -> [f64; 3] {
    [
        0.5 + 0.35 * (3.0 * x.x + 1.0).sin(),
        0.5 + 0.35 * (2.5 * x.y + 0.5).sin(),
        0.5 + 0.35 * (2.0 * x.z + 3.0 * x.x).cos(),
    ]
}

/// Distance density around a mesh with a fixed color function.
pub struct AnalyticScene<'a> {
    pub mesh: &'a TriangleMesh,
    pub bvh: &'a Bvh,
    pub epsilon: f64,
    pub color: fn(&Vec3) -> [f64; 3],
}

impl<'a> AnalyticScene<'a> {
    pub fn new(mesh: &'a TriangleMesh, bvh: &'a Bvh, epsilon: f64) -> Self {
        Self {
            mesh,
            bvh,
            epsilon,
            color: procedural_color,
        }
    }
}

impl VolumeScene for AnalyticScene<'_> {
    fn support(&self, ray: &Ray) -> Option<(f64, f64)> {
        self.bvh.shell_interval(ray, self.epsilon)
    }

    fn eval(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])> {
        points
            .iter()
            .map(|x| match self.bvh.closest_point_within(self.mesh, x, self.epsilon) {
                Some(sp) => (density_from_distance(sp.distance, self.epsilon), (self.color)(x)),
                None => (0.0, [0.0; 3]),
            })
            .collect()
    }
}

/// Per-ray generator seeded from the render seed and the pixel index, so
/// results do not depend on scheduling.
pub fn ray_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Renders a group of rays with one batched scene evaluation.
/// Returns premultiplied color and alpha per ray.
pub fn render_rays<S: VolumeScene + ?Sized>(
    scene: &S,
    rays: &[Ray],
    rngs: &mut [ChaCha8Rng],
    settings: &RenderSettings,
) -> Vec<([f64; 3], f64)> {
    let n = settings.samples_per_ray.max(1);
    let mut points = Vec::new();
    let mut owners: Vec<(usize, usize)> = Vec::new();
    let mut per_ray = Vec::with_capacity(rays.len());
    for (r, (ray, rng)) in rays.iter().zip(rngs.iter_mut()).enumerate() {
        let ts = sample_stratified(ray, n, settings.stratified, rng);
        let keep = scene.keep_ray(ray);
        let window = if !keep {
            None
        } else if settings.shell_clipping {
            scene.support(ray)
        } else {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        };
        if let Some((lo, hi)) = window {
            for (i, &t) in ts.iter().enumerate() {
                if t >= lo && t <= hi {
                    points.push(ray.at(t));
                    owners.push((r, i));
                }
            }
        }
        per_ray.push((ts, keep));
    }
    let values = scene.eval(&points);
    let mut sigma: Vec<Vec<f64>> = per_ray.iter().map(|_| vec![0.0; n]).collect();
    let mut color: Vec<Vec<[f64; 3]>> = per_ray.iter().map(|_| vec![[0.0; 3]; n]).collect();
    for (&(r, i), &(s, c)) in owners.iter().zip(&values) {
        sigma[r][i] = s;
        color[r][i] = c;
    }
    per_ray
        .iter()
        .enumerate()
        .map(|(r, (ts, keep))| {
            if !keep {
                return ([0.0; 3], 0.0);
            }
            let delta = sample_deltas(ts, rays[r].t_far);
            let comp = composite(&sigma[r], &color[r], &delta);
            (comp.rgb, comp.alpha)
        })
        .collect()
}

pub fn render_ray<S: VolumeScene + ?Sized>(
    scene: &S,
    ray: &Ray,
    settings: &RenderSettings,
    rng: &mut ChaCha8Rng,
) -> ([f64; 3], f64) {
    render_rays(scene, std::slice::from_ref(ray), std::slice::from_mut(rng), settings)[0]
}

/// Straight-alpha RGBA image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbaImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 4]>,
}

impl RgbaImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 4]; width as usize * height as usize],
        }
    }

    pub fn from_premultiplied(width: u32, height: u32, values: &[([f64; 3], f64)]) -> Self {
        let pixels = values
            .iter()
            .map(|&(c, a)| {
                if a > 0.0 {
                    [(c[0] / a).clamp(0.0, 1.0), (c[1] / a).clamp(0.0, 1.0), (c[2] / a).clamp(0.0, 1.0), a.clamp(0.0, 1.0)]
                } else {
                    [0.0; 4]
                }
            })
            .collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, i: u32, j: u32) -> [f64; 4] {
        self.pixels[(j * self.width + i) as usize]
    }

    /// Color over `bg`: `c * a + bg * (1 - a)` per pixel.
    pub fn composite_over(&self, bg: [f64; 3]) -> Vec<[f64; 3]> {
        self.pixels
            .iter()
            .map(|p| {
                let a = p[3];
                [p[0] * a + bg[0] * (1.0 - a), p[1] * a + bg[1] * (1.0 - a), p[2] * a + bg[2] * (1.0 - a)]
            })
            .collect()
    }

    pub fn to_rgba8(&self) -> image::RgbaImage {
        let mut img = image::RgbaImage::new(self.width, self.height);
        for (px, p) in img.pixels_mut().zip(&self.pixels) {
            *px = image::Rgba(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        img
    }

    pub fn from_rgba8(img: &image::RgbaImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            pixels: img.pixels().map(|p| p.0.map(|v| v as f64 / 255.0)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        self.to_rgba8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, RenderError> {
        Ok(Self::from_rgba8(&image::open(path)?.to_rgba8()))
    }
}

/// Rows of pixels rendered together; fixed so results never depend on thread count.
const ROWS_PER_TASK: usize = 2;

/// Renders every pixel of `camera`. With a solid background the result is opaque.
pub fn render_image<S: VolumeScene + ?Sized>(scene: &S, camera: &Camera, settings: &RenderSettings) -> RgbaImage {
    let w = camera.width as usize;
    let h = camera.height as usize;
    let rows: Vec<usize> = (0..h).step_by(ROWS_PER_TASK).collect();
    let values: Vec<([f64; 3], f64)> = rows
        .par_iter()
        .flat_map_iter(|&j0| {
            let j1 = (j0 + ROWS_PER_TASK).min(h);
            let mut rays = Vec::with_capacity((j1 - j0) * w);
            let mut rngs = Vec::with_capacity((j1 - j0) * w);
            for j in j0..j1 {
                for i in 0..w {
                    rays.push(camera.pixel_ray(i as u32, j as u32, settings.near, settings.far));
                    rngs.push(ray_rng(settings.seed, (j * w + i) as u64));
                }
            }
            render_rays(scene, &rays, &mut rngs, settings)
        })
        .collect();
    let mut img = RgbaImage::from_premultiplied(camera.width, camera.height, &values);
    if let Background::Color(bg) = settings.background {
        let flat = img.composite_over(bg);
        for (p, c) in img.pixels.iter_mut().zip(flat) {
            *p = [c[0], c[1], c[2], 1.0];
        }
    }
    img
}
