//! Voxel grid over a visualization's bounding volume.
//!
//! The active set marks voxels whose box intersects mesh geometry; only
//! those register attention in data-aware capture. Ray queries walk the grid
//! with a 3D DDA and are exposed both as a full traversal and as the nearest
//! active hit.

mod traverse;

pub use traverse::RayTraversal;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{triangle_aabb_overlap, Aabb, Bvh, GeometryError, Point3, Ray, TriangleMesh, Vec3};
use crate::text::fmt_f64;

/// Upper bound per axis, imposed by the u16 wire encoding of indices.
pub const MAX_DIM: usize = u16::MAX as usize;

/// Relative padding applied to mesh bounds before gridding.
pub const BOUNDS_PADDING: f64 = 0.005;

pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("grid dimensions must be in 1..={MAX_DIM}, got {0:?}")]
    BadDims([usize; 3]),
    #[error("active voxel {0:?} outside grid")]
    OutOfGrid(VoxelIndex),
    #[error("grid has no active voxels")]
    NoActive,
    #[error("grid export line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub i: u16,
    pub j: u16,
    pub k: u16,
}

impl VoxelIndex {
    pub const fn new(i: u16, j: u16, k: u16) -> Self {
        Self { i, j, k }
    }

    pub fn axis(&self, a: usize) -> u16 {
        match a {
            0 => self.i,
            1 => self.j,
            _ => self.k,
        }
    }
}

impl std::fmt::Display for VoxelIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.i, self.j, self.k)
    }
}

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    bounds: Aabb,
    dims: [usize; 3],
    voxel_size: Vec3,
    active_mask: Vec<bool>,
    active: Vec<VoxelIndex>,
}

impl PartialEq for VoxelGrid {
    fn eq(&self, o: &Self) -> bool {
        self.bounds == o.bounds && self.dims == o.dims && self.active == o.active
    }
}

fn check_dims(dims: [usize; 3]) -> Result<(), VoxelError> {
    if dims.iter().any(|&d| d == 0 || d > MAX_DIM) {
        return Err(VoxelError::BadDims(dims));
    }
    Ok(())
}

/// Per-axis counts with `longest` voxels on the longest axis of `bounds`
/// and the other axes scaled proportionally, rounded up.
pub fn dims_for_resolution(bounds: &Aabb, longest: usize) -> [usize; 3] {
    let e = bounds.extent();
    let max = e.max_component();
    if max <= 0.0 {
        return [1; 3];
    }
    [0, 1, 2].map(|a| {
        let n = (longest as f64 * e[a] / max).ceil() as usize;
        n.clamp(1, longest.max(1))
    })
}

/// Mesh bounds grown by [`BOUNDS_PADDING`] of the extent on each side. Flat
/// axes borrow the padding of the largest axis so no axis has zero width.
pub fn padded_bounds(mesh_bounds: &Aabb) -> Aabb {
    let e = mesh_bounds.extent();
    let fallback = if e.max_component() > 0.0 {
        BOUNDS_PADDING * e.max_component()
    } else {
        1e-3
    };
    let margin = Vec3::new(
        pad_axis(e.x, fallback),
        pad_axis(e.y, fallback),
        pad_axis(e.z, fallback),
    );
    mesh_bounds.expanded(margin)
}

fn pad_axis(extent: f64, fallback: f64) -> f64 {
    let p = BOUNDS_PADDING * extent;
    if p > 0.0 {
        p
    } else {
        fallback
    }
}

const BLOCK: usize = 8;

impl VoxelGrid {
    /// Grid with an empty active set.
    pub fn new(bounds: Aabb, dims: [usize; 3]) -> Result<Self, VoxelError> {
        check_dims(dims)?;
        let e = bounds.extent();
        if e.x <= 0.0 || e.y <= 0.0 || e.z <= 0.0 {
            return Err(VoxelError::Geometry(GeometryError::InvertedBox));
        }
        let voxel_size = Vec3::new(
            e.x / dims[0] as f64,
            e.y / dims[1] as f64,
            e.z / dims[2] as f64,
        );
        Ok(Self {
            bounds,
            dims,
            voxel_size,
            active_mask: vec![false; dims[0] * dims[1] * dims[2]],
            active: Vec::new(),
        })
    }

    pub fn with_active<I>(bounds: Aabb, dims: [usize; 3], active: I) -> Result<Self, VoxelError>
    where
        I: IntoIterator<Item = VoxelIndex>,
    {
        let mut grid = Self::new(bounds, dims)?;
        for v in active {
            if !grid.in_range(v) {
                return Err(VoxelError::OutOfGrid(v));
            }
            let li = grid.linear(v);
            grid.active_mask[li] = true;
        }
        grid.rebuild_active_list();
        Ok(grid)
    }

    /// Data-aware voxelization over the padded mesh bounds.
    pub fn voxelize(mesh: &TriangleMesh, bvh: &Bvh, dims: [usize; 3]) -> Result<Self, VoxelError> {
        Self::voxelize_in(mesh, bvh, padded_bounds(&mesh.aabb()), dims)
    }

    /// Voxelization with default resolution ([`DEFAULT_RESOLUTION`] on the
    /// longest axis).
    pub fn voxelize_default(mesh: &TriangleMesh, bvh: &Bvh) -> Result<Self, VoxelError> {
        let bounds = padded_bounds(&mesh.aabb());
        Self::voxelize_in(mesh, bvh, bounds, dims_for_resolution(&bounds, DEFAULT_RESOLUTION))
    }

    /// Marks voxel `v` active iff some triangle passes
    /// [`triangle_aabb_overlap`] against `voxel_aabb(v)`. The BVH prunes
    /// 8³ blocks of voxels; the exact predicate decides every candidate.
    pub fn voxelize_in(
        mesh: &TriangleMesh,
        bvh: &Bvh,
        bounds: Aabb,
        dims: [usize; 3],
    ) -> Result<Self, VoxelError> {
        let mut grid = Self::new(bounds, dims)?;
        let blocks = dims.map(|d| d.div_ceil(BLOCK));
        let block_ids: Vec<[usize; 3]> = (0..blocks[0])
            .flat_map(|a| (0..blocks[1]).flat_map(move |b| (0..blocks[2]).map(move |c| [a, b, c])))
            .collect();
        // Conservative slack so float noise in the pruning boxes can never
        // drop a candidate the exact predicate would accept.
        let slack = Vec3::splat(1e-9 * bounds.diagonal().max(1e-12));
        let found: Vec<Vec<usize>> = block_ids
            .par_iter()
            .map(|&block| grid.voxelize_block(mesh, bvh, block, slack))
            .collect();
        for li in found.into_iter().flatten() {
            grid.active_mask[li] = true;
        }
        grid.rebuild_active_list();
        Ok(grid)
    }

    fn voxelize_block(&self, mesh: &TriangleMesh, bvh: &Bvh, block: [usize; 3], slack: Vec3) -> Vec<usize> {
        let lo = block.map(|b| b * BLOCK);
        let hi = [0, 1, 2].map(|a| ((block[a] + 1) * BLOCK).min(self.dims[a]));
        let block_box = Aabb {
            min: self.corner(lo),
            max: self.corner(hi),
        }
        .expanded(slack);
        let mut seen = [false; BLOCK * BLOCK * BLOCK];
        let mut out = Vec::new();
        bvh.for_each_overlapping(mesh, &block_box, |tri_id| {
            let tri = mesh.triangle(tri_id);
            let tb = Aabb::from_points(tri).expanded(slack);
            let (rlo, rhi) = self.index_range(&tb);
            let from = [0, 1, 2].map(|a| rlo[a].max(lo[a]));
            let to = [0, 1, 2].map(|a| rhi[a].min(hi[a] - 1));
            if (0..3).any(|a| from[a] > to[a]) {
                return;
            }
            for i in from[0]..=to[0] {
                for j in from[1]..=to[1] {
                    for k in from[2]..=to[2] {
                        let local = ((i - lo[0]) * BLOCK + (j - lo[1])) * BLOCK + (k - lo[2]);
                        if seen[local] {
                            continue;
                        }
                        let v = VoxelIndex::new(i as u16, j as u16, k as u16);
                        if triangle_aabb_overlap(&tri, &self.voxel_aabb(v)) {
                            seen[local] = true;
                            out.push(self.linear(v));
                        }
                    }
                }
            }
        });
        out
    }

    fn rebuild_active_list(&mut self) {
        self.active = self
            .active_mask
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(li, _)| self.from_linear(li))
            .collect();
    }

    /// Inclusive voxel index range covering `b`, clamped to the grid, with
    /// one voxel of slack on each side.
    fn index_range(&self, b: &Aabb) -> ([usize; 3], [usize; 3]) {
        let lo = [0, 1, 2].map(|a| {
            let f = ((b.min[a] - self.bounds.min[a]) / self.voxel_size[a]).floor() - 1.0;
            f.clamp(0.0, (self.dims[a] - 1) as f64) as usize
        });
        let hi = [0, 1, 2].map(|a| {
            let f = ((b.max[a] - self.bounds.min[a]) / self.voxel_size[a]).floor() + 1.0;
            f.clamp(0.0, (self.dims[a] - 1) as f64) as usize
        });
        (lo, hi)
    }

    fn corner(&self, idx: [usize; 3]) -> Point3 {
        Vec3::new(
            self.bounds.min.x + idx[0] as f64 * self.voxel_size.x,
            self.bounds.min.y + idx[1] as f64 * self.voxel_size.y,
            self.bounds.min.z + idx[2] as f64 * self.voxel_size.z,
        )
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.voxel_size
    }

    /// Total voxel count `nx * ny * nz`.
    pub fn len(&self) -> usize {
        self.active_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active_mask.is_empty()
    }

    pub fn in_range(&self, v: VoxelIndex) -> bool {
        (v.i as usize) < self.dims[0] && (v.j as usize) < self.dims[1] && (v.k as usize) < self.dims[2]
    }

    /// i-major linearization.
    pub fn linear(&self, v: VoxelIndex) -> usize {
        (v.i as usize * self.dims[1] + v.j as usize) * self.dims[2] + v.k as usize
    }

    pub fn from_linear(&self, li: usize) -> VoxelIndex {
        let k = li % self.dims[2];
        let j = (li / self.dims[2]) % self.dims[1];
        let i = li / (self.dims[1] * self.dims[2]);
        VoxelIndex::new(i as u16, j as u16, k as u16)
    }

    pub fn iter_indices(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        (0..self.len()).map(|li| self.from_linear(li))
    }

    pub fn voxel_aabb(&self, v: VoxelIndex) -> Aabb {
        let lo = [v.i as usize, v.j as usize, v.k as usize];
        Aabb {
            min: self.corner(lo),
            max: self.corner(lo.map(|x| x + 1)),
        }
    }

    pub fn voxel_center(&self, v: VoxelIndex) -> Point3 {
        Vec3::new(
            self.bounds.min.x + (v.i as f64 + 0.5) * self.voxel_size.x,
            self.bounds.min.y + (v.j as f64 + 0.5) * self.voxel_size.y,
            self.bounds.min.z + (v.k as f64 + 0.5) * self.voxel_size.z,
        )
    }

    /// Voxel containing `p`; points on the max faces belong to the last
    /// layer. `None` outside the closed bounds.
    pub fn containing(&self, p: Point3) -> Option<VoxelIndex> {
        if !self.bounds.contains_point(p) {
            return None;
        }
        let c = [0, 1, 2].map(|a| {
            let f = ((p[a] - self.bounds.min[a]) / self.voxel_size[a]).floor();
            f.clamp(0.0, (self.dims[a] - 1) as f64) as u16
        });
        Some(VoxelIndex::new(c[0], c[1], c[2]))
    }

    pub fn is_active(&self, v: VoxelIndex) -> bool {
        self.in_range(v) && self.active_mask[self.linear(v)]
    }

    pub fn is_active_linear(&self, li: usize) -> bool {
        self.active_mask[li]
    }

    /// Active voxels in i-major order.
    pub fn active(&self) -> &[VoxelIndex] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn traversal(&self, ray: &Ray) -> RayTraversal<'_> {
        RayTraversal::new(self, ray)
    }

    /// Every voxel the ray passes through inside the bounds, in ray order.
    pub fn traverse_ray(&self, ray: &Ray) -> Vec<VoxelIndex> {
        self.traversal(ray).collect()
    }

    /// First active voxel along the ray.
    pub fn nearest_active_hit(&self, ray: &Ray) -> Option<VoxelIndex> {
        self.traversal(ray).find(|&v| self.active_mask[self.linear(v)])
    }

    /// Voxels whose center is within `radius` of `center`; radius 0 selects
    /// just the voxel containing `center`. Result is i-major sorted.
    pub fn voxels_in_sphere(&self, center: Point3, radius: f64) -> Vec<VoxelIndex> {
        if radius <= 0.0 {
            return self.containing(center).into_iter().collect();
        }
        let r2 = radius * radius;
        let probe = Aabb {
            min: center - Vec3::splat(radius),
            max: center + Vec3::splat(radius),
        };
        if !probe.overlaps(&self.bounds) {
            return Vec::new();
        }
        let (lo, hi) = self.index_range(&probe);
        let mut out = Vec::new();
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let v = VoxelIndex::new(i as u16, j as u16, k as u16);
                    if (self.voxel_center(v) - center).length_squared() <= r2 {
                        out.push(v);
                    }
                }
            }
        }
        out
    }

    /// Debug export: dims, bounds and the active list in i-major order.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        let b = &self.bounds;
        let _ = writeln!(out, "heed-grid 1");
        let _ = writeln!(out, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(
            out,
            "bounds {} {} {} {} {} {}",
            fmt_f64(b.min.x),
            fmt_f64(b.min.y),
            fmt_f64(b.min.z),
            fmt_f64(b.max.x),
            fmt_f64(b.max.y),
            fmt_f64(b.max.z)
        );
        let _ = writeln!(out, "active {}", self.active.len());
        for v in &self.active {
            let _ = writeln!(out, "{} {} {}", v.i, v.j, v.k);
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, VoxelError> {
        let mut lines = text.lines().enumerate();
        let mut next = |want: &str| -> Result<(usize, Vec<String>), VoxelError> {
            let (n, line) = lines.next().ok_or(VoxelError::Parse {
                line: 0,
                message: format!("missing {want}"),
            })?;
            Ok((n + 1, line.split_whitespace().map(str::to_string).collect()))
        };
        let perr = |line: usize, m: &str| VoxelError::Parse {
            line,
            message: m.to_string(),
        };
        let (n, head) = next("header")?;
        if head != ["heed-grid", "1"] {
            return Err(perr(n, "expected 'heed-grid 1'"));
        }
        let (n, d) = next("dims")?;
        if d.len() != 4 || d[0] != "dims" {
            return Err(perr(n, "expected dims"));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = d[a + 1].parse().map_err(|_| perr(n, "bad dim"))?;
        }
        let (n, b) = next("bounds")?;
        if b.len() != 7 || b[0] != "bounds" {
            return Err(perr(n, "expected bounds"));
        }
        let mut c = [0f64; 6];
        for a in 0..6 {
            c[a] = b[a + 1].parse().map_err(|_| perr(n, "bad bound"))?;
        }
        let bounds = Aabb::new(Vec3::new(c[0], c[1], c[2]), Vec3::new(c[3], c[4], c[5]))?;
        let (n, a) = next("active")?;
        if a.len() != 2 || a[0] != "active" {
            return Err(perr(n, "expected active count"));
        }
        let count: usize = a[1].parse().map_err(|_| perr(n, "bad count"))?;
        let mut active = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, f) = next("active voxel")?;
            if f.len() != 3 {
                return Err(perr(n, "expected i j k"));
            }
            let p = |s: &str| s.parse::<u16>().map_err(|_| perr(n, "bad index"));
            active.push(VoxelIndex::new(p(&f[0])?, p(&f[1])?, p(&f[2])?));
        }
        Self::with_active(bounds, dims, active)
    }
}
