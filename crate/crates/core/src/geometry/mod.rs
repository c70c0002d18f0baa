//! Meshes, boxes, rays and the triangle BVH used by voxelization and
//! attention capture. All lengths are meters in a right-handed frame.

mod bvh;
mod mesh;
mod overlap;
mod shapes;
mod vec;

pub use bvh::{Bvh, BvhNode, ClosestPoint, NodeKind, RayHit, MAX_LEAF_SIZE};
pub use mesh::{closest_point_on_triangle, ray_triangle, TriangleMesh};
pub use overlap::triangle_aabb_overlap;
pub use shapes::{Aabb, Ray};
pub use vec::{Point3, Vec3};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("triangle {triangle} references vertex {index} but only {vertex_count} exist")]
    IndexOutOfRange {
        triangle: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("box min exceeds max")]
    InvertedBox,
    #[error("ray direction has zero length")]
    ZeroDirection,
    #[error("ray direction is not unit length")]
    NotUnit,
    #[error("OBJ line {line}: {message}")]
    Obj { line: usize, message: String },
}

/// Nearest intersection by exhaustive scan; the reference for BVH queries.
pub fn intersect_ray_brute_force(mesh: &TriangleMesh, ray: &Ray) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for tri in 0..mesh.triangle_count() {
        if let Some(t) = ray_triangle(ray, &mesh.triangle(tri)) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(RayHit { t, triangle: tri });
            }
        }
    }
    best
}

pub fn build_bvh(mesh: &TriangleMesh) -> Result<Bvh, GeometryError> {
    Bvh::build(mesh)
}

pub fn intersect_ray_mesh(bvh: &Bvh, mesh: &TriangleMesh, ray: &Ray) -> Option<RayHit> {
    bvh.intersect_ray(mesh, ray)
}
