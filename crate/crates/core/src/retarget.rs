//! Rendering a trained field under new expression and pose parameters.
//!
//! Density is computed around the deformed mesh; color is looked up after
//! carrying each sample back to the trained mesh with the affine map of its
//! nearest triangle.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Phase, RadianceField, ShellSample};
use crate::geometry::{Bvh, GeometryError, Ray, TriangleMesh, Vec3};
use crate::head::{FaceParams, HeadError, HeadModelAssets};
use crate::render::{render_image, Camera, RenderSettings, RgbaImage, VolumeScene};

/// Triangles with area at or below this are treated as degenerate.
pub const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleAffine {
    pub linear: Matrix3<f64>,
    pub translation: Vec3,
}

impl TriangleAffine {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.linear * x + self.translation
    }
}

/// Affine that sends `src` vertices to `dst` vertices and `src[0] + src_normal`
/// to `dst[0] + dst_normal`. `None` when either triangle is degenerate.
pub fn estimate_triangle_affine(src: &[Vec3; 3], src_normal: &Vec3, dst: &[Vec3; 3], dst_normal: &Vec3) -> Option<TriangleAffine> {
    let area = |t: &[Vec3; 3]| 0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm();
    if area(src) <= MIN_AREA || area(dst) <= MIN_AREA {
        return None;
    }
    if src == dst && src_normal == dst_normal {
        return Some(TriangleAffine::identity());
    }
    let v = Matrix3::from_columns(&[src[1] - src[0], src[2] - src[0], *src_normal]);
    let w = Matrix3::from_columns(&[dst[1] - dst[0], dst[2] - dst[0], *dst_normal]);
    let linear = w * v.try_inverse()?;
    Some(TriangleAffine {
        linear,
        translation: dst[0] - linear * src[0],
    })
}

/// One affine per triangle, carrying points near `from` to `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleAffineMap {
    pub maps: Vec<TriangleAffine>,
    /// Triangles that were degenerate on either side; they carry the identity.
    pub degenerate: Vec<usize>,
}

impl TriangleAffineMap {
    pub fn apply(&self, triangle: usize, x: &Vec3) -> Vec3 {
        self.maps[triangle].apply(x)
    }
}

pub fn build_affine_field(from: &TriangleMesh, to: &TriangleMesh) -> Result<TriangleAffineMap, RetargetError> {
    if from.triangles() != to.triangles() {
        return Err(RetargetError::Topology(format!(
            "{} vs {} triangles or differing indices",
            from.triangle_count(),
            to.triangle_count()
        )));
    }
    if from.vertices().len() != to.vertices().len() {
        return Err(RetargetError::Topology(format!(
            "{} vs {} vertices",
            from.vertices().len(),
            to.vertices().len()
        )));
    }
    let mut degenerate = Vec::new();
    let maps = (0..from.triangle_count())
        .map(|t| {
            estimate_triangle_affine(&from.triangle(t), &from.normal(t), &to.triangle(t), &to.normal(t)).unwrap_or_else(|| {
                degenerate.push(t);
                TriangleAffine::identity()
            })
        })
        .collect();
    Ok(TriangleAffineMap { maps, degenerate })
}

/// Carries `x` through the affine of its nearest triangle on `mesh`.
pub fn retarget_point(x: &Vec3, bvh: &Bvh, mesh: &TriangleMesh, affine: &TriangleAffineMap) -> Result<Vec3, GeometryError> {
    let sp = bvh.closest_point(mesh, x)?;
    Ok(affine.apply(sp.triangle_id, x))
}

/// True when the first surface the ray meets faces the camera.
pub fn ray_enters_front(ray: &Ray, bvh: &Bvh, mesh: &TriangleMesh) -> bool {
    bvh.first_hit(mesh, ray).is_some_and(|h| h.front_facing)
}

/// Keeps rays whose first hit is front-facing; rays that miss or first meet a
/// back face are dropped.
pub fn filter_open_mouth_rays(rays: &[Ray], bvh: &Bvh, mesh: &TriangleMesh) -> Vec<bool> {
    rays.iter().map(|r| ray_enters_front(r, bvh, mesh)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetargetDensity {
    /// Distance formula around the new mesh with the field's current width.
    #[default]
    Analytic,
    /// Density network evaluated at the retargeted points.
    Learned,
}

impl std::str::FromStr for RetargetDensity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "learned" => Ok(Self::Learned),
            _ => Err(format!("expected analytic or learned, got {s:?}")),
        }
    }
}

pub struct RetargetScene<'a> {
    field: RadianceField,
    pub mesh: &'a TriangleMesh,
    pub bvh: &'a Bvh,
    pub affine: &'a TriangleAffineMap,
    pub mouth_filter: bool,
}

impl<'a> RetargetScene<'a> {
    /// `mesh` is the deformed mesh and `affine` maps it back to the trained one.
    pub fn new(
        field: &RadianceField,
        mesh: &'a TriangleMesh,
        bvh: &'a Bvh,
        affine: &'a TriangleAffineMap,
        density: RetargetDensity,
        mouth_filter: bool,
    ) -> Self {
        let mut field = field.clone();
        field.phase = match density {
            RetargetDensity::Analytic => Phase::DistanceDensity,
            RetargetDensity::Learned => Phase::LearnedDensity,
        };
        Self {
            field,
            mesh,
            bvh,
            affine,
            mouth_filter,
        }
    }
}

impl VolumeScene for RetargetScene<'_> {
    fn support(&self, ray: &Ray) -> Option<(f64, f64)> {
        self.bvh.shell_interval(ray, self.field.epsilon())
    }

    fn eval(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])> {
        let eps = self.field.epsilon();
        let mut idx = Vec::new();
        let mut samples = Vec::new();
        let mut moved = Vec::new();
        for (i, x) in points.iter().enumerate() {
            if let Some(sp) = self.bvh.closest_point_within(self.mesh, x, eps) {
                idx.push(i);
                moved.push(self.affine.apply(sp.triangle_id, x));
                samples.push(ShellSample { x: *x, surface: sp });
            }
        }
        let batch = self.field.forward(&samples, Some(&moved));
        let mut out = vec![(0.0, [0.0; 3]); points.len()];
        for (k, &i) in idx.iter().enumerate() {
            out[i] = (batch.sigma[k], batch.rgb[k]);
        }
        out
    }

    fn keep_ray(&self, ray: &Ray) -> bool {
        !self.mouth_filter || ray_enters_front(ray, self.bvh, self.mesh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RetargetOptions {
    pub density: RetargetDensity,
    pub mouth_filter: bool,
}

/// Renders the field trained with `trained` parameters under `new_params`.
pub fn render_retargeted(
    field: &RadianceField,
    assets: &HeadModelAssets,
    trained: &FaceParams,
    new_params: &FaceParams,
    camera: &Camera,
    settings: &RenderSettings,
    options: RetargetOptions,
) -> Result<RgbaImage, RetargetError> {
    let original = assets.deform(trained)?;
    let moved = assets.deform(new_params)?;
    let bvh = Bvh::build(&moved);
    let affine = build_affine_field(&moved, &original)?;
    let scene = RetargetScene::new(field, &moved, &bvh, &affine, options.density, options.mouth_filter);
    Ok(render_image(&scene, camera, settings))
}
