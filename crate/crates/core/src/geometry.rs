//! Triangle meshes, a median-split BVH, exact point-to-mesh distance and ray casting.

use std::io::Write;

use nalgebra::Vector3;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Largest number of triangles stored in one BVH leaf.
pub const LEAF_SIZE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("triangle {triangle} references vertex {index} but the mesh has {vertex_count} vertices")]
    IndexOutOfRange {
        triangle: usize,
        index: u32,
        vertex_count: usize,
    },
    #[error("distance gradient undefined at zero distance")]
    DegenerateGradient,
    #[error("ray direction must be finite and nonzero")]
    BadDirection,
    #[error("ray interval [{t_near}, {t_far}] is empty")]
    BadInterval { t_near: f64, t_far: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    normals: Vec<Vec3>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i as usize >= vertices.len()) {
                return Err(GeometryError::IndexOutOfRange {
                    triangle: t,
                    index,
                    vertex_count: vertices.len(),
                });
            }
        }
        let normals = triangles
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|i| vertices[i as usize]);
                (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_else(Vec3::zeros)
            })
            .collect();
        Ok(Self {
            vertices,
            triangles,
            normals,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Unit normal for triangle `t` (counterclockwise winding); zero for degenerate triangles.
    pub fn normal(&self, t: usize) -> Vec3 {
        self.normals[t]
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.vertices.iter().sum();
        sum / self.vertices.len().max(1) as f64
    }

    /// Writes the mesh as Wavefront OBJ (1-based indices, counterclockwise faces).
    pub fn write_obj<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self, GeometryError> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(GeometryError::BadDirection);
        }
        if !(t_near < t_far) {
            return Err(GeometryError::BadInterval { t_near, t_far });
        }
        Ok(Self {
            origin,
            direction: direction / norm,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Which feature of a triangle the closest point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Face,
    /// Edge `k` joins vertex `k` and vertex `(k + 1) % 3`.
    Edge(u8),
    Vertex(u8),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub triangle_id: usize,
    pub barycentric: [f64; 3],
    pub position: Vec3,
    pub distance: f64,
    pub region: Region,
}

/// Closest point on triangle `abc` to `p` by Voronoi-region classification.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> ([f64; 3], Region) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ([1.0, 0.0, 0.0], Region::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return ([0.0, 1.0, 0.0], Region::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return ([1.0 - v, v, 0.0], Region::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return ([0.0, 0.0, 1.0], Region::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return ([1.0 - w, 0.0, w], Region::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return ([0.0, 1.0 - w, w], Region::Edge(1));
    }
    let sum = va + vb + vc;
    if !(sum > 0.0) || !sum.is_finite() {
        return closest_on_degenerate(p, a, b, c);
    }
    let v = vb / sum;
    let w = vc / sum;
    ([1.0 - v - w, v, w], Region::Face)
}

// Zero-area triangle: the closest point lies on one of the three edges.
fn closest_on_degenerate(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> ([f64; 3], Region) {
    let verts = [a, b, c];
    let mut best: Option<(f64, [f64; 3], Region)> = None;
    for k in 0..3 {
        let (s, e) = (verts[k], verts[(k + 1) % 3]);
        let se = e - s;
        let len2 = se.norm_squared();
        let u = if len2 > 0.0 { ((p - s).dot(&se) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let d2 = (p - (s + se * u)).norm_squared();
        let mut bary = [0.0; 3];
        bary[k] = 1.0 - u;
        bary[(k + 1) % 3] += u;
        let region = if u == 0.0 {
            Region::Vertex(k as u8)
        } else if u == 1.0 {
            Region::Vertex(((k + 1) % 3) as u8)
        } else {
            Region::Edge(k as u8)
        };
        if best.map_or(true, |(bd, _, _)| d2 < bd) {
            best = Some((d2, bary, region));
        }
    }
    let (_, bary, region) = best.unwrap();
    (bary, region)
}

fn surface_point(mesh: &TriangleMesh, t: usize, x: &Vec3) -> (f64, SurfacePoint) {
    let [a, b, c] = mesh.triangle(t);
    let (bary, region) = closest_point_on_triangle(x, &a, &b, &c);
    let position = a * bary[0] + b * bary[1] + c * bary[2];
    let d2 = (x - position).norm_squared();
    (
        d2,
        SurfacePoint {
            triangle_id: t,
            barycentric: bary,
            position,
            distance: d2.sqrt(),
            region,
        },
    )
}

/// Reference scan over every triangle. Ties go to the lowest triangle index.
pub fn closest_point_brute_force(mesh: &TriangleMesh, x: &Vec3) -> Result<SurfacePoint, GeometryError> {
    let mut best: Option<(f64, SurfacePoint)> = None;
    for t in 0..mesh.triangle_count() {
        let (d2, sp) = surface_point(mesh, t, x);
        if best.as_ref().map_or(true, |(bd, _)| d2 < *bd) {
            best = Some((d2, sp));
        }
    }
    best.map(|(_, sp)| sp).ok_or(GeometryError::EmptyMesh)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.min[k] && self.max[k] >= other.max[k])
    }

    pub fn expanded(&self, r: f64) -> Aabb {
        Aabb {
            min: self.min.add_scalar(-r),
            max: self.max.add_scalar(r),
        }
    }

    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2
    }

    /// Slab test; returns the overlap of the ray with the box inside `[t0, t1]`.
    pub fn ray_interval(&self, origin: &Vec3, inv_dir: &Vec3, t0: f64, t1: f64) -> Option<(f64, f64)> {
        let mut lo = t0;
        let mut hi = t1;
        for k in 0..3 {
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            // NaN arises for a zero direction component with the origin on a slab plane.
            if near.is_nan() || far.is_nan() {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            lo = lo.max(near);
            hi = hi.min(far);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NodeKind {
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BvhNode {
    bounds: Aabb,
    kind: NodeKind,
}

/// Axis-aligned bounding-box tree over the triangles of one mesh.
///
/// Built by recursive median split of triangle centroids along the longest
/// axis of the centroid bounds. Leaves hold at most [`LEAF_SIZE`] triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle_id: usize,
    pub front_facing: bool,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let m = mesh.triangle_count();
        let mut order: Vec<u32> = (0..m as u32).collect();
        let mut nodes = Vec::with_capacity(2 * m / LEAF_SIZE + 1);
        if m > 0 {
            let boxes: Vec<Aabb> = (0..m)
                .map(|t| {
                    let mut b = Aabb::empty();
                    mesh.triangle(t).iter().for_each(|v| b.grow(v));
                    b
                })
                .collect();
            let centroids: Vec<Vec3> = boxes.iter().map(|b| (b.min + b.max) * 0.5).collect();
            build_node(&mut nodes, &mut order, 0, m, &boxes, &centroids);
        }
        Self { nodes, order }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .count()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.nodes.first().map(|n| n.bounds)
    }

    /// Depth of the deepest leaf; a single leaf root has depth 0.
    pub fn depth(&self) -> usize {
        fn rec(nodes: &[BvhNode], i: usize) -> usize {
            match nodes[i].kind {
                NodeKind::Leaf { .. } => 0,
                NodeKind::Inner { left, right } => 1 + rec(nodes, left as usize).max(rec(nodes, right as usize)),
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            rec(&self.nodes, 0)
        }
    }

    /// Checks the structural invariants: every triangle in exactly one leaf,
    /// every node box containing its children's boxes.
    pub fn check_invariants(&self, mesh: &TriangleMesh) -> bool {
        let mut seen = vec![0u32; mesh.triangle_count()];
        for node in &self.nodes {
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.order[start as usize..(start + count) as usize] {
                        seen[t as usize] += 1;
                        if !mesh.triangle(t as usize).iter().all(|v| {
                            (0..3).all(|k| node.bounds.min[k] <= v[k] && v[k] <= node.bounds.max[k])
                        }) {
                            return false;
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    if !node.bounds.contains(&self.nodes[left as usize].bounds)
                        || !node.bounds.contains(&self.nodes[right as usize].bounds)
                    {
                        return false;
                    }
                }
            }
        }
        seen.iter().all(|&c| c == 1)
    }

    /// Exact closest point on the mesh; ties go to the lowest triangle index.
    pub fn closest_point(&self, mesh: &TriangleMesh, x: &Vec3) -> Result<SurfacePoint, GeometryError> {
        self.closest_within_sq(mesh, x, f64::INFINITY)
            .ok_or(GeometryError::EmptyMesh)
    }

    /// Closest point if it lies within `max_distance` of `x`, else `None`.
    ///
    /// Whenever it returns `Some`, the result is identical to [`Bvh::closest_point`].
    pub fn closest_point_within(&self, mesh: &TriangleMesh, x: &Vec3, max_distance: f64) -> Option<SurfacePoint> {
        self.closest_within_sq(mesh, x, max_distance * max_distance)
            .filter(|sp| sp.distance <= max_distance)
    }

    fn closest_within_sq(&self, mesh: &TriangleMesh, x: &Vec3, limit_sq: f64) -> Option<SurfacePoint> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(f64, SurfacePoint)> = None;
        let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
        stack.push((0, self.nodes[0].bounds.distance_squared(x)));
        while let Some((idx, box_d2)) = stack.pop() {
            let bound = best.as_ref().map_or(limit_sq, |(bd, _)| bd.min(limit_sq));
            if box_d2 > bound {
                continue;
            }
            match self.nodes[idx as usize].kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.order[start as usize..(start + count) as usize] {
                        let (d2, sp) = surface_point(mesh, t as usize, x);
                        let better = match &best {
                            None => true,
                            Some((bd, bsp)) => d2 < *bd || (d2 == *bd && sp.triangle_id < bsp.triangle_id),
                        };
                        if better {
                            best = Some((d2, sp));
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = self.nodes[left as usize].bounds.distance_squared(x);
                    let dr = self.nodes[right as usize].bounds.distance_squared(x);
                    // Push the farther child first so the nearer one is visited first.
                    if dl <= dr {
                        stack.push((right, dr));
                        stack.push((left, dl));
                    } else {
                        stack.push((left, dl));
                        stack.push((right, dr));
                    }
                }
            }
        }
        best.map(|(_, sp)| sp)
    }

    /// Nearest intersection with `t` in `[ray.t_near, ray.t_far]`; ties go to the lowest triangle index.
    pub fn first_hit(&self, mesh: &TriangleMesh, ray: &Ray) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = ray.direction.map(|d| 1.0 / d);
        let mut best: Option<Hit> = None;
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            let t_hi = best.map_or(ray.t_far, |h| h.t);
            if node.bounds.ray_interval(&ray.origin, &inv, ray.t_near, t_hi).is_none() {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.order[start as usize..(start + count) as usize] {
                        if let Some(hit) = intersect_triangle(mesh, t as usize, ray) {
                            if best.map_or(true, |b| hit.t < b.t || (hit.t == b.t && hit.triangle_id < b.triangle_id)) {
                                best = Some(hit);
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }

    /// Range of `t` over which the ray can come within `radius` of the mesh,
    /// found from leaf boxes grown by `radius`. Points of the ray outside the
    /// returned interval are strictly farther than `radius` from every triangle.
    pub fn shell_interval(&self, ray: &Ray, radius: f64) -> Option<(f64, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        // Slack keeps slab rounding from cutting off points at exactly `radius`.
        let pad = radius * (1.0 + 1e-9) + 1e-12;
        let inv = ray.direction.map(|d| 1.0 / d);
        let mut out: Option<(f64, f64)> = None;
        let mut stack = vec![0u32];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx as usize];
            let Some((lo, hi)) = node
                .bounds
                .expanded(pad)
                .ray_interval(&ray.origin, &inv, ray.t_near, ray.t_far)
            else {
                continue;
            };
            match node.kind {
                NodeKind::Leaf { .. } => {
                    out = Some(out.map_or((lo, hi), |(a, b)| (a.min(lo), b.max(hi))));
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        out
    }
}

fn build_node(
    nodes: &mut Vec<BvhNode>,
    order: &mut [u32],
    start: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[Vec3],
) -> u32 {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &t in &order[start..end] {
        bounds.merge(&boxes[t as usize]);
        cbounds.grow(&centroids[t as usize]);
    }
    let idx = nodes.len() as u32;
    nodes.push(BvhNode {
        bounds,
        kind: NodeKind::Leaf {
            start: start as u32,
            count: (end - start) as u32,
        },
    });
    if end - start <= LEAF_SIZE {
        return idx;
    }
    let extent = cbounds.max - cbounds.min;
    let axis = extent.imax();
    order[start..end].sort_by(|&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let mid = start + (end - start) / 2;
    let left = build_node(nodes, order, start, mid, boxes, centroids);
    let right = build_node(nodes, order, mid, end, boxes, centroids);
    nodes[idx as usize].kind = NodeKind::Inner { left, right };
    idx
}

/// Watertight ray/triangle test (shear-and-scale to ray space, signed edge functions).
pub fn intersect_triangle(mesh: &TriangleMesh, t: usize, ray: &Ray) -> Option<Hit> {
    let dir = &ray.direction;
    let kz = dir.abs().imax();
    let mut kx = (kz + 1) % 3;
    let mut ky = (kx + 1) % 3;
    if dir[kz] < 0.0 {
        std::mem::swap(&mut kx, &mut ky);
    }
    let sx = dir[kx] / dir[kz];
    let sy = dir[ky] / dir[kz];
    let sz = 1.0 / dir[kz];
    let [a, b, c] = mesh.triangle(t).map(|v| v - ray.origin);
    let ax = a[kx] - sx * a[kz];
    let ay = a[ky] - sy * a[kz];
    let bx = b[kx] - sx * b[kz];
    let by = b[ky] - sy * b[kz];
    let cx = c[kx] - sx * c[kz];
    let cy = c[ky] - sy * c[kz];
    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return None;
    }
    let det = u + v + w;
    if det == 0.0 {
        return None;
    }
    let tz = u * (sz * a[kz]) + v * (sz * b[kz]) + w * (sz * c[kz]);
    let hit_t = tz / det;
    if !(hit_t >= ray.t_near && hit_t <= ray.t_far) {
        return None;
    }
    Some(Hit {
        t: hit_t,
        triangle_id: t,
        front_facing: dir.dot(&mesh.normal(t)) < 0.0,
    })
}

/// Reference scan for [`Bvh::first_hit`].
pub fn first_hit_brute_force(mesh: &TriangleMesh, ray: &Ray) -> Option<Hit> {
    (0..mesh.triangle_count())
        .filter_map(|t| intersect_triangle(mesh, t, ray))
        .fold(None, |best: Option<Hit>, hit| match best {
            Some(b) if b.t <= hit.t => Some(b),
            _ => Some(hit),
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceGradient {
    /// Derivative of the distance with respect to the query point.
    pub wrt_point: Vec3,
    /// Derivatives with respect to the three vertices of the closest triangle,
    /// holding the barycentric weights fixed.
    pub wrt_vertices: [Vec3; 3],
}

/// Gradient of `d(x, M)` at a closest point found for `x`. Distances at or
/// below 1e-12 count as zero.
pub fn distance_gradient(sp: &SurfacePoint, x: &Vec3) -> Result<DistanceGradient, GeometryError> {
    let diff = x - sp.position;
    let d = diff.norm();
    if !(d > 1e-12) {
        return Err(GeometryError::DegenerateGradient);
    }
    let dx = diff / d;
    Ok(DistanceGradient {
        wrt_point: dx,
        wrt_vertices: sp.barycentric.map(|w| -dx * w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single() -> TriangleMesh {
        TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn tetra() -> TriangleMesh {
        let v = vec![
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(1.0, -1.0, -1.0),
            Vec3::new(-1.0, 1.0, -1.0),
            Vec3::new(-1.0, -1.0, 1.0),
        ];
        TriangleMesh::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]).unwrap()
    }

    #[test]
    fn rejects_bad_index() {
        let err = TriangleMesh::new(vec![Vec3::zeros(); 2], vec![[0, 1, 2]]).unwrap_err();
        assert_eq!(
            err,
            GeometryError::IndexOutOfRange {
                triangle: 0,
                index: 2,
                vertex_count: 2
            }
        );
    }

    #[test]
    fn on_vertex_is_zero_distance() {
        let m = single();
        let bvh = Bvh::build(&m);
        let sp = bvh.closest_point(&m, &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(sp.distance, 0.0);
        assert_eq!(sp.barycentric, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn height_above_centroid() {
        let m = single();
        let bvh = Bvh::build(&m);
        let c = Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0);
        let sp = bvh.closest_point(&m, &(c + m.normal(0) * 0.37)).unwrap();
        assert!((sp.distance - 0.37).abs() < 1e-12);
        assert_eq!(sp.region, Region::Face);
    }

    #[test]
    fn empty_mesh_errors() {
        let m = TriangleMesh::new(vec![], vec![]).unwrap();
        let bvh = Bvh::build(&m);
        assert_eq!(bvh.closest_point(&m, &Vec3::zeros()), Err(GeometryError::EmptyMesh));
        assert_eq!(closest_point_brute_force(&m, &Vec3::zeros()), Err(GeometryError::EmptyMesh));
    }

    #[test]
    fn single_triangle_is_one_leaf() {
        let bvh = Bvh::build(&single());
        assert_eq!(bvh.node_count(), 1);
        assert_eq!(bvh.leaf_count(), 1);
        assert_eq!(bvh.depth(), 0);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // Centroid of a regular tetrahedron is equidistant from all faces.
        let m = tetra();
        let bvh = Bvh::build(&m);
        let sp = bvh.closest_point(&m, &Vec3::zeros()).unwrap();
        let bf = closest_point_brute_force(&m, &Vec3::zeros()).unwrap();
        assert_eq!(sp, bf);
        assert_eq!(sp.triangle_id, 0);
    }

    #[test]
    fn hit_from_outside_and_inside() {
        let m = tetra();
        let bvh = Bvh::build(&m);
        let out = Ray::new(Vec3::new(5.0, 0.1, 0.2), Vec3::new(-1.0, 0.0, 0.0), 0.0, 100.0).unwrap();
        let h = bvh.first_hit(&m, &out).unwrap();
        assert!(h.front_facing);
        let inside = Ray::new(Vec3::zeros(), Vec3::new(0.3, 0.2, 1.0), 0.0, 100.0).unwrap();
        let h = bvh.first_hit(&m, &inside).unwrap();
        assert!(!h.front_facing);
        let miss = Ray::new(Vec3::new(5.0, 5.0, 5.0), Vec3::new(1.0, 0.0, 0.0), 0.0, 100.0).unwrap();
        assert_eq!(bvh.first_hit(&m, &miss), None);
    }

    #[test]
    fn plane_gradient_is_normal() {
        let m = single();
        let x = Vec3::new(0.2, 0.3, -0.5);
        let sp = closest_point_brute_force(&m, &x).unwrap();
        let g = distance_gradient(&sp, &x).unwrap();
        assert!((g.wrt_point - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn vertex_support_gradient() {
        let m = single();
        let x = Vec3::new(-0.5, -0.4, 0.3);
        let sp = closest_point_brute_force(&m, &x).unwrap();
        assert_eq!(sp.region, Region::Vertex(0));
        let g = distance_gradient(&sp, &x).unwrap();
        assert!((g.wrt_vertices[0] + g.wrt_point).norm() < 1e-15);
        assert_eq!(g.wrt_vertices[1], Vec3::zeros());
        assert_eq!(g.wrt_vertices[2], Vec3::zeros());
    }

    #[test]
    fn zero_distance_gradient_is_flagged() {
        let m = single();
        let x = Vec3::new(0.2, 0.2, 0.0);
        let sp = closest_point_brute_force(&m, &x).unwrap();
        assert_eq!(distance_gradient(&sp, &x), Err(GeometryError::DegenerateGradient));
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let verts: Vec<Vec3> = (0..3).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
            let x = Vec3::from_fn(|_, _| rng.gen_range(-1.5..1.5));
            let m = TriangleMesh::new(verts.clone(), vec![[0, 1, 2]]).unwrap();
            let sp = closest_point_brute_force(&m, &x).unwrap();
            // Stay away from Voronoi region boundaries.
            let stable = (0..3).all(|k| {
                (0..3).all(|c| {
                    let mut v = verts.clone();
                    v[k][c] += h;
                    let mp = TriangleMesh::new(v.clone(), vec![[0, 1, 2]]).unwrap();
                    v[k][c] -= 2.0 * h;
                    let mm = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap();
                    closest_point_brute_force(&mp, &x).unwrap().region == sp.region
                        && closest_point_brute_force(&mm, &x).unwrap().region == sp.region
                })
            });
            if !stable || sp.distance < 1e-3 {
                continue;
            }
            let g = distance_gradient(&sp, &x).unwrap();
            for k in 0..3 {
                for c in 0..3 {
                    let mut v = verts.clone();
                    v[k][c] += h;
                    let dp = closest_point_brute_force(&TriangleMesh::new(v.clone(), vec![[0, 1, 2]]).unwrap(), &x)
                        .unwrap()
                        .distance;
                    v[k][c] -= 2.0 * h;
                    let dm = closest_point_brute_force(&TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap(), &x)
                        .unwrap()
                        .distance;
                    let fd = (dp - dm) / (2.0 * h);
                    let a = g.wrt_vertices[k][c];
                    // Edge and vertex regions: fixed weights give the exact derivative.
                    let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                    assert!(err < 1e-4, "region {:?} vertex {k} comp {c}: fd {fd} analytic {a}", sp.region);
                }
            }
            for c in 0..3 {
                let mut xp = x;
                xp[c] += h;
                let mut xm = x;
                xm[c] -= h;
                let fd = (closest_point_brute_force(&m, &xp).unwrap().distance
                    - closest_point_brute_force(&m, &xm).unwrap().distance)
                    / (2.0 * h);
                assert!((fd - g.wrt_point[c]).abs() < 1e-6);
            }
            checked += 1;
        }
    }

    #[test]
    fn obj_export() {
        let mut buf = Vec::new();
        single().write_obj(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 4);
        assert!(s.ends_with("f 1 2 3\n"));
    }

    proptest! {
        #[test]
        fn bvh_matches_brute_force_on_random_soups(seed in 0u64..10_000, q in [-2.0..2.0f64, -2.0..2.0, -2.0..2.0]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..40);
            let vertices: Vec<Vec3> = (0..3 * n).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
            let triangles: Vec<[u32; 3]> = (0..n as u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
            let mesh = TriangleMesh::new(vertices, triangles).unwrap();
            let bvh = Bvh::build(&mesh);
            prop_assert!(bvh.check_invariants(&mesh));
            let x = Vec3::new(q[0], q[1], q[2]);
            let a = bvh.closest_point(&mesh, &x).unwrap();
            let b = closest_point_brute_force(&mesh, &x).unwrap();
            prop_assert!((a.distance - b.distance).abs() <= 1e-12);
            prop_assert!(a.distance >= 0.0);
            prop_assert!(((a.position - x).norm() - a.distance).abs() <= 1e-12);
            prop_assert!((a.barycentric.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(a.barycentric.iter().all(|w| *w >= -1e-12));
        }
    }
}
