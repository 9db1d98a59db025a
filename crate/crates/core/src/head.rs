//! Parametric head model: linear shape and expression blendshapes followed by
//! linear blend skinning over a small joint tree with axis-angle joint rotations.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ArrayData, Container, ContainerError, NamedArray};
use crate::geometry::{GeometryError, TriangleMesh, Vec3};

pub const ASSET_MAGIC: &str = "MESHFIELD-HEAD v1";

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("parameter shape mismatch: {field} has length {got}, model expects {expected}")]
    ParamShape {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid head assets: {0}")]
    Invalid(String),
    #[error("skinning weight row {row} sums to {sum} (expected 1)")]
    SkinningRow { row: usize, sum: f64 },
    #[error("skinning weight row {row} has a negative entry")]
    NegativeWeight { row: usize },
    #[error("asset file: {0}")]
    File(#[from] ContainerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Immutable definition of the head model.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModelAssets {
    template: Vec<Vec3>,
    /// One slice of `n` displacements per shape coefficient.
    shape_basis: Vec<Vec<Vec3>>,
    expression_basis: Vec<Vec<Vec3>>,
    joints: Vec<Vec3>,
    parents: Vec<Option<usize>>,
    /// Row-major `n x J`.
    weights: Vec<f64>,
    triangles: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
}

impl FaceParams {
    pub fn zeros(assets: &HeadModelAssets) -> Self {
        Self {
            beta: vec![0.0; assets.num_shape()],
            psi: vec![0.0; assets.num_expression()],
            phi: vec![0.0; assets.num_pose()],
        }
    }

    /// Concatenation `[beta, psi, phi]`, the ordering used by [`DeformJacobian`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.psi).chain(&self.phi).copied().collect()
    }

    pub fn from_flat(flat: &[f64], assets: &HeadModelAssets) -> Self {
        let (kb, ke) = (assets.num_shape(), assets.num_expression());
        Self {
            beta: flat[..kb].to_vec(),
            psi: flat[kb..kb + ke].to_vec(),
            phi: flat[kb + ke..].to_vec(),
        }
    }

    pub fn check(&self, assets: &HeadModelAssets) -> Result<(), HeadError> {
        for (field, got, expected) in [
            ("beta", self.beta.len(), assets.num_shape()),
            ("psi", self.psi.len(), assets.num_expression()),
            ("phi", self.phi.len(), assets.num_pose()),
        ] {
            if got != expected {
                return Err(HeadError::ParamShape { field, got, expected });
            }
        }
        Ok(())
    }
}

/// Rotation plus translation, applied as `rot * x + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rot: Matrix3<f64>,
    pub trans: Vec3,
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rot: Matrix3::identity(),
            trans: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rot * x + self.trans
    }

    pub fn compose(&self, inner: &Rigid) -> Rigid {
        Rigid {
            rot: self.rot * inner.rot,
            trans: self.rot * inner.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rot.transpose();
        Rigid {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of an axis-angle vector (Rodrigues).
pub fn axis_angle_to_matrix(r: &Vec3) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives of [`axis_angle_to_matrix`] with respect to each component of `r`.
pub fn axis_angle_derivatives(r: &Vec3) -> [Matrix3<f64>; 3] {
    let theta2 = r.norm_squared();
    let rot = axis_angle_to_matrix(r);
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < 1e-16 {
        return basis.map(|e| skew(&e) * rot);
    }
    let i_minus_r = Matrix3::identity() - rot;
    basis.map(|e| {
        let c = r.dot(&e);
        (skew(r) * c + skew(&r.cross(&(i_minus_r * e)))) * rot / theta2
    })
}

/// Derivative of every vertex with respect to each entry of `[beta, psi, phi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformJacobian {
    pub columns: Vec<Vec<Vec3>>,
}

impl DeformJacobian {
    /// Chains per-vertex gradients back to the flat parameter vector.
    pub fn pull_back(&self, vertex_grads: &[Vec3]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|col| col.iter().zip(vertex_grads).map(|(j, g)| j.dot(g)).sum())
            .collect()
    }
}

impl HeadModelAssets {
    pub fn new(
        template: Vec<Vec3>,
        shape_basis: Vec<Vec<Vec3>>,
        expression_basis: Vec<Vec<Vec3>>,
        joints: Vec<Vec3>,
        parents: Vec<Option<usize>>,
        weights: Vec<f64>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self, HeadError> {
        let assets = Self {
            template,
            shape_basis,
            expression_basis,
            joints,
            parents,
            weights,
            triangles,
        };
        assets.validate()?;
        Ok(assets)
    }

    fn validate(&self) -> Result<(), HeadError> {
        let n = self.template.len();
        let nj = self.joints.len();
        let invalid = |s: String| Err(HeadError::Invalid(s));
        if n == 0 {
            return invalid("template has no vertices".into());
        }
        for (name, basis) in [("shape_basis", &self.shape_basis), ("expression_basis", &self.expression_basis)] {
            if let Some(k) = basis.iter().position(|s| s.len() != n) {
                return invalid(format!("{name} slice {k} has {} vertices, template has {n}", basis[k].len()));
            }
        }
        if nj == 0 {
            return invalid("model needs at least one joint".into());
        }
        if self.parents.len() != nj {
            return invalid(format!("{} parents for {nj} joints", self.parents.len()));
        }
        for (j, p) in self.parents.iter().enumerate() {
            match (j, p) {
                (0, None) => {}
                (0, Some(_)) => return invalid("joint 0 must be the root".into()),
                (_, None) => return invalid(format!("joint {j} has no parent; only joint 0 may be a root")),
                (_, Some(p)) if *p >= j => {
                    return invalid(format!("joint {j} has parent {p}; parents must precede children"))
                }
                _ => {}
            }
        }
        if self.weights.len() != n * nj {
            return invalid(format!("weights have {} entries, expected {}", self.weights.len(), n * nj));
        }
        for (row, w) in self.weights.chunks_exact(nj).enumerate() {
            if w.iter().any(|&x| !(x >= 0.0)) {
                return Err(HeadError::NegativeWeight { row });
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(HeadError::SkinningRow { row, sum });
            }
        }
        if let Some((t, _)) = self
            .triangles
            .iter()
            .enumerate()
            .find(|(_, tri)| tri.iter().any(|&i| i as usize >= n))
        {
            return invalid(format!("triangle {t} references a vertex index >= {n}"));
        }
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_shape(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn num_expression(&self) -> usize {
        self.expression_basis.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_pose(&self) -> usize {
        3 * self.joints.len()
    }

    pub fn num_params(&self) -> usize {
        self.num_shape() + self.num_expression() + self.num_pose()
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn shape_slice(&self, k: usize) -> &[Vec3] {
        &self.shape_basis[k]
    }

    pub fn expression_slice(&self, k: usize) -> &[Vec3] {
        &self.expression_basis[k]
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn weight(&self, vertex: usize, joint: usize) -> f64 {
        self.weights[vertex * self.joints.len() + joint]
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    fn rest_shape(&self, params: &FaceParams) -> Vec<Vec3> {
        let mut rest = self.template.clone();
        for (basis, coeffs) in [(&self.shape_basis, &params.beta), (&self.expression_basis, &params.psi)] {
            for (slice, &c) in basis.iter().zip(coeffs.iter()) {
                if c != 0.0 {
                    rest.iter_mut().zip(slice).for_each(|(v, d)| *v += d * c);
                }
            }
        }
        rest
    }

    /// World transform of each joint for the pose block of `params`.
    pub fn joint_transforms(&self, phi: &[f64]) -> Vec<Rigid> {
        let mut world: Vec<Rigid> = Vec::with_capacity(self.joints.len());
        for (j, joint) in self.joints.iter().enumerate() {
            let r = Vec3::new(phi[3 * j], phi[3 * j + 1], phi[3 * j + 2]);
            let rot = axis_angle_to_matrix(&r);
            let local = Rigid {
                rot,
                trans: joint - rot * joint,
            };
            world.push(match self.parents[j] {
                Some(p) => world[p].compose(&local),
                None => local,
            });
        }
        world
    }

    fn skin(&self, rest: &[Vec3], world: &[Rigid]) -> Vec<Vec3> {
        let nj = self.joints.len();
        rest.iter()
            .enumerate()
            .map(|(i, p)| {
                let w = &self.weights[i * nj..(i + 1) * nj];
                // p + sum_j w_j (A_j p - p): equals the usual weighted sum when rows
                // sum to one, and reproduces p exactly at the rest pose.
                p + w
                    .iter()
                    .zip(world)
                    .filter(|(&wi, _)| wi != 0.0)
                    .map(|(&wi, a)| (a.apply(p) - p) * wi)
                    .sum::<Vec3>()
            })
            .collect()
    }

    /// Vertex positions for `params`; topology is the template's.
    pub fn deform_vertices(&self, params: &FaceParams) -> Result<Vec<Vec3>, HeadError> {
        params.check(self)?;
        let rest = self.rest_shape(params);
        let world = self.joint_transforms(&params.phi);
        Ok(self.skin(&rest, &world))
    }

    pub fn deform(&self, params: &FaceParams) -> Result<TriangleMesh, HeadError> {
        Ok(TriangleMesh::new(self.deform_vertices(params)?, self.triangles.clone())?)
    }

    /// Analytic Jacobian of [`HeadModelAssets::deform_vertices`].
    pub fn deform_jacobian(&self, params: &FaceParams) -> Result<DeformJacobian, HeadError> {
        params.check(self)?;
        let n = self.template.len();
        let nj = self.joints.len();
        let rest = self.rest_shape(params);
        let world = self.joint_transforms(&params.phi);
        let mut columns = Vec::with_capacity(self.num_params());

        // Blendshape terms: basis slice rotated by the blended skinning rotation.
        let blended_rot: Vec<Matrix3<f64>> = (0..n)
            .map(|i| {
                (0..nj)
                    .map(|j| (world[j].rot - Matrix3::identity()) * self.weights[i * nj + j])
                    .fold(Matrix3::identity(), |acc, m| acc + m)
            })
            .collect();
        for slice in self.shape_basis.iter().chain(&self.expression_basis) {
            columns.push(slice.iter().zip(&blended_rot).map(|(d, r)| r * d).collect());
        }

        // Pose terms. For joint m and any descendant j:
        // A_j = A_parent(m) * L_m * B, with B = A_m^-1 * A_j, so
        // dA_j(p) = R_parent(m) * dR_m * (B(p) - J_m).
        let descends = |j: usize, m: usize| {
            let mut cur = Some(j);
            while let Some(c) = cur {
                if c == m {
                    return true;
                }
                cur = self.parents[c];
            }
            false
        };
        for m in 0..nj {
            let r = Vec3::new(params.phi[3 * m], params.phi[3 * m + 1], params.phi[3 * m + 2]);
            let d_rot = axis_angle_derivatives(&r);
            let parent_rot = self.parents[m].map_or_else(Matrix3::identity, |p| world[p].rot);
            let inv_m = world[m].inverse();
            let subtree: Vec<usize> = (0..nj).filter(|&j| descends(j, m)).collect();
            for dr in &d_rot {
                let lead = parent_rot * dr;
                let col = (0..n)
                    .map(|i| {
                        let mut acc = Vec3::zeros();
                        for &j in &subtree {
                            let w = self.weights[i * nj + j];
                            if w != 0.0 {
                                let local = inv_m.apply(&world[j].apply(&rest[i]));
                                acc += (lead * (local - self.joints[m])) * w;
                            }
                        }
                        acc
                    })
                    .collect();
                columns.push(col);
            }
        }
        Ok(DeformJacobian { columns })
    }

    pub fn to_container(&self) -> Container {
        let n = self.template.len();
        let nj = self.joints.len();
        let f32s = |it: &mut dyn Iterator<Item = f64>| ArrayData::F32(it.map(|x| x as f32).collect());
        // Bases are stored vertex-major as n x 3 x k.
        let basis = |b: &Vec<Vec<Vec3>>| {
            let k = b.len();
            let mut out = Vec::with_capacity(n * 3 * k);
            for i in 0..n {
                for c in 0..3 {
                    for slice in b {
                        out.push(slice[i][c] as f32);
                    }
                }
            }
            NamedArray::new("", vec![n, 3, k], ArrayData::F32(out))
        };
        let mut c = Container::new(ASSET_MAGIC);
        c.push(NamedArray::new(
            "template",
            vec![n, 3],
            f32s(&mut self.template.iter().flat_map(|v| [v.x, v.y, v.z])),
        ));
        let mut sb = basis(&self.shape_basis);
        sb.name = "shape_basis".into();
        c.push(sb);
        let mut eb = basis(&self.expression_basis);
        eb.name = "expression_basis".into();
        c.push(eb);
        c.push(NamedArray::new(
            "joints",
            vec![nj, 3],
            f32s(&mut self.joints.iter().flat_map(|v| [v.x, v.y, v.z])),
        ));
        c.push(NamedArray::new(
            "parents",
            vec![nj],
            ArrayData::I32(self.parents.iter().map(|p| p.map_or(-1, |p| p as i32)).collect()),
        ));
        c.push(NamedArray::new("weights", vec![n, nj], f32s(&mut self.weights.iter().copied())));
        c.push(NamedArray::new(
            "triangles",
            vec![self.triangles.len(), 3],
            ArrayData::U32(self.triangles.iter().flatten().copied().collect()),
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, HeadError> {
        let template = c.get("template")?;
        template.expect_shape(&[None, Some(3)])?;
        let n = template.shape[0];
        let to_vecs = |data: &[f32]| -> Vec<Vec3> {
            data.chunks_exact(3)
                .map(|v| Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64))
                .collect()
        };
        let basis = |name: &str| -> Result<Vec<Vec<Vec3>>, HeadError> {
            let a = c.get(name)?;
            a.expect_shape(&[Some(n), Some(3), None])?;
            let k = a.shape[2];
            let data = a.as_f32()?;
            Ok((0..k)
                .map(|s| {
                    (0..n)
                        .map(|i| Vec3::from_fn(|comp, _| data[(i * 3 + comp) * k + s] as f64))
                        .collect()
                })
                .collect())
        };
        let joints = c.get("joints")?;
        joints.expect_shape(&[None, Some(3)])?;
        let nj = joints.shape[0];
        let parents = c.get("parents")?;
        parents.expect_shape(&[Some(nj)])?;
        let weights = c.get("weights")?;
        weights.expect_shape(&[Some(n), Some(nj)])?;
        let triangles = c.get("triangles")?;
        triangles.expect_shape(&[None, Some(3)])?;
        let parents = parents
            .as_i32()?
            .iter()
            .map(|&p| if p < 0 { None } else { Some(p as usize) })
            .collect();
        Self::new(
            to_vecs(template.as_f32()?),
            basis("shape_basis")?,
            basis("expression_basis")?,
            to_vecs(joints.as_f32()?),
            parents,
            weights.as_f32()?.iter().map(|&w| w as f64).collect(),
            triangles
                .as_u32()?
                .chunks_exact(3)
                .map(|t| [t[0], t[1], t[2]])
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        self.to_container().write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        let c = Container::read_from(BufReader::new(File::open(path)?), ASSET_MAGIC)?;
        Self::from_container(&c)
    }
}

/// Expression slot that opens the jaw in [`make_toy_head`].
pub const TOY_JAW_OPEN: usize = 0;
/// Joint whose subtree holds the upper head in [`make_toy_head`].
pub const TOY_HEAD_JOINT: usize = 1;

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Smooth bump with compact support: `(1 - (r/radius)^2)^2` inside, exactly 0 outside.
fn bump(r: f64, radius: f64) -> f64 {
    if r >= radius {
        0.0
    } else {
        let s = 1.0 - (r / radius).powi(2);
        s * s
    }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Subdivided icosphere of radius 1; `20 * 4^n` triangles, counterclockwise outward.
pub fn icosphere(n_subdiv: u32) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..n_subdiv {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for &[a, b, c] in &tris {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    (verts, tris)
}

/// Synthetic head used for tests and demos.
///
/// A unit icosphere squashed into a head-like ellipsoid (face toward +z, up +y)
/// with seeded surface bumps. Two shape bases (height, width), two expression
/// bases with compact support (`TOY_JAW_OPEN` drops the chin, slot 1 lifts the
/// mouth corners) and two joints: a root at the neck and a head joint that
/// carries everything above the neck. All numbers are rounded to f32 so the
/// asset survives a save/load cycle bit for bit.
pub fn make_toy_head(n_subdiv: u32, seed: u64) -> HeadModelAssets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sphere, triangles) = icosphere(n_subdiv);
    let bumps: Vec<(Vec3, f64, f64)> = (0..6)
        .map(|_| {
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..1.0), rng.gen_range(-1.0..0.3))
                .normalize();
            (dir, rng.gen_range(0.3..0.6), rng.gen_range(-0.04..0.04))
        })
        .collect();
    let template: Vec<Vec3> = sphere
        .iter()
        .map(|u| {
            let radial: f64 = bumps.iter().map(|(d, r, a)| a * bump((u - d).norm(), *r)).sum();
            let p = u * (1.0 + radial);
            Vec3::new(0.8 * p.x, 1.0 * p.y, 0.9 * p.z).map(round_f32)
        })
        .collect();

    let shape_basis = vec![
        template.iter().map(|p| Vec3::new(0.0, 0.2 * p.y, 0.0).map(round_f32)).collect(),
        template.iter().map(|p| Vec3::new(0.2 * p.x, 0.0, 0.0).map(round_f32)).collect(),
    ];
    let chin = Vec3::new(0.0, -0.6, 0.6);
    let corners = [Vec3::new(-0.45, -0.3, 0.7), Vec3::new(0.45, -0.3, 0.7)];
    let expression_basis = vec![
        template
            .iter()
            .map(|p| (Vec3::new(0.0, -0.3, 0.1) * bump((p - chin).norm(), 0.55)).map(round_f32))
            .collect(),
        template
            .iter()
            .map(|p| {
                corners
                    .iter()
                    .map(|c| Vec3::new(0.1 * c.x.signum(), 0.15, -0.05) * bump((p - c).norm(), 0.35))
                    .sum::<Vec3>()
                    .map(round_f32)
            })
            .collect(),
    ];
    let joints = vec![Vec3::new(0.0, -1.1, 0.0).map(round_f32), Vec3::new(0.0, -0.7, -0.1).map(round_f32)];
    let parents = vec![None, Some(0)];
    let weights = template
        .iter()
        .flat_map(|p| {
            let head = round_f32(smoothstep(-0.95, -0.6, p.y));
            [round_f32(1.0 - head), head]
        })
        .collect();
    HeadModelAssets::new(
        template,
        shape_basis,
        expression_basis,
        joints,
        parents,
        weights,
        triangles,
    )
    .expect("toy head satisfies asset invariants")
}
