//! Bounding volume hierarchy over a [`TriangleMesh`].
//!
//! Built top-down with a median split on the longest axis of the centroid
//! bounds; leaves hold at most [`MAX_LEAF_SIZE`] triangles. The hierarchy is
//! immutable once built and only borrows the mesh during queries.

use super::{closest_point_on_triangle, ray_triangle, Aabb, GeometryError, Point3, Ray, TriangleMesh};

pub const MAX_LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    /// Range into [`Bvh::triangle_order`].
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    pub kind: NodeKind,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub triangle: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub point: Point3,
    pub triangle: usize,
    pub distance: f64,
}

struct BuildItem {
    id: u32,
    centroid: Point3,
    bounds: Aabb,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Result<Self, GeometryError> {
        if mesh.triangle_count() == 0 {
            return Err(GeometryError::EmptyMesh);
        }
        let mut items: Vec<BuildItem> = (0..mesh.triangle_count())
            .map(|id| {
                let bounds = mesh.triangle_aabb(id);
                BuildItem {
                    id: id as u32,
                    centroid: bounds.center(),
                    bounds,
                }
            })
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::with_capacity(2 * items.len() / MAX_LEAF_SIZE + 1),
            order: Vec::with_capacity(items.len()),
        };
        bvh.build_node(&mut items);
        Ok(bvh)
    }

    fn build_node(&mut self, items: &mut [BuildItem]) -> u32 {
        let bounds = items
            .iter()
            .skip(1)
            .fold(items[0].bounds, |acc, it| acc.union(&it.bounds));
        let index = self.nodes.len() as u32;
        if items.len() <= MAX_LEAF_SIZE {
            let start = self.order.len() as u32;
            self.order.extend(items.iter().map(|it| it.id));
            self.nodes.push(BvhNode {
                bounds,
                kind: NodeKind::Leaf {
                    start,
                    count: items.len() as u32,
                },
            });
            return index;
        }
        let centroid_bounds = Aabb::from_points(items.iter().map(|it| it.centroid));
        let axis = centroid_bounds.extent().max_axis();
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |a, b| {
            a.centroid[axis]
                .total_cmp(&b.centroid[axis])
                .then(a.id.cmp(&b.id))
        });
        // Placeholder, patched once both children exist.
        self.nodes.push(BvhNode {
            bounds,
            kind: NodeKind::Inner { left: 0, right: 0 },
        });
        let (lo, hi) = items.split_at_mut(mid);
        let left = self.build_node(lo);
        let right = self.build_node(hi);
        self.nodes[index as usize].kind = NodeKind::Inner { left, right };
        index
    }

    pub fn nodes(&self) -> &[BvhNode] {
        &self.nodes
    }

    pub fn root(&self) -> &BvhNode {
        &self.nodes[0]
    }

    pub fn triangle_order(&self) -> &[u32] {
        &self.order
    }

    fn leaf_triangles(&self, start: u32, count: u32) -> &[u32] {
        &self.order[start as usize..(start + count) as usize]
    }

    /// Nearest hit with `t >= 0`. Equal-`t` hits resolve to the lower
    /// triangle id so results do not depend on tree shape.
    pub fn intersect_ray(&self, mesh: &TriangleMesh, ray: &Ray) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
        if let Some((t0, _)) = self.nodes[0].bounds.ray_interval(ray) {
            stack.push((0, t0));
        }
        while let Some((ni, t_enter)) = stack.pop() {
            if best.is_some_and(|b| t_enter > b.t) {
                continue;
            }
            match self.nodes[ni as usize].kind {
                NodeKind::Leaf { start, count } => {
                    for &tri in self.leaf_triangles(start, count) {
                        let tri = tri as usize;
                        if let Some(t) = ray_triangle(ray, &mesh.triangle(tri)) {
                            let better = match best {
                                None => true,
                                Some(b) => t < b.t || (t == b.t && tri < b.triangle),
                            };
                            if better {
                                best = Some(RayHit { t, triangle: tri });
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let l = self.nodes[left as usize].bounds.ray_interval(ray);
                    let r = self.nodes[right as usize].bounds.ray_interval(ray);
                    // Push the farther child first so the nearer one pops next.
                    match (l, r) {
                        (Some((tl, _)), Some((tr, _))) => {
                            if tl <= tr {
                                stack.push((right, tr));
                                stack.push((left, tl));
                            } else {
                                stack.push((left, tl));
                                stack.push((right, tr));
                            }
                        }
                        (Some((tl, _)), None) => stack.push((left, tl)),
                        (None, Some((tr, _))) => stack.push((right, tr)),
                        (None, None) => {}
                    }
                }
            }
        }
        best
    }

    /// Calls `visit` with every triangle whose bounds overlap `query`.
    pub fn for_each_overlapping<F: FnMut(usize)>(&self, mesh: &TriangleMesh, query: &Aabb, mut visit: F) {
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if !node.bounds.overlaps(query) {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &tri in self.leaf_triangles(start, count) {
                        if mesh.triangle_aabb(tri as usize).overlaps(query) {
                            visit(tri as usize);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
    }

    /// Triangles whose bounds overlap `query`, in ascending id order.
    pub fn overlapping(&self, mesh: &TriangleMesh, query: &Aabb) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_overlapping(mesh, query, |t| out.push(t));
        out.sort_unstable();
        out
    }

    /// Closest surface point to `p` (branch and bound on box distance).
    pub fn closest_point(&self, mesh: &TriangleMesh, p: Point3) -> ClosestPoint {
        let mut best = ClosestPoint {
            point: p,
            triangle: usize::MAX,
            distance: f64::INFINITY,
        };
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![(0u32, self.nodes[0].bounds.distance_squared(p))];
        while let Some((ni, d2)) = stack.pop() {
            if d2 > best_d2 {
                continue;
            }
            match self.nodes[ni as usize].kind {
                NodeKind::Leaf { start, count } => {
                    for &tri in self.leaf_triangles(start, count) {
                        let tri = tri as usize;
                        let q = closest_point_on_triangle(p, &mesh.triangle(tri));
                        let qd2 = (q - p).length_squared();
                        if qd2 < best_d2 || (qd2 == best_d2 && tri < best.triangle) {
                            best_d2 = qd2;
                            best = ClosestPoint {
                                point: q,
                                triangle: tri,
                                distance: qd2.sqrt(),
                            };
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = self.nodes[left as usize].bounds.distance_squared(p);
                    let dr = self.nodes[right as usize].bounds.distance_squared(p);
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
        best
    }

    /// Checks the structural invariants: every triangle in exactly one
    /// non-empty leaf, and children contained in their parent.
    pub fn validate(&self, mesh: &TriangleMesh) -> Result<(), String> {
        let mut seen = vec![0u32; mesh.triangle_count()];
        let mut stack = vec![0u32];
        let mut visited = 0usize;
        while let Some(ni) = stack.pop() {
            visited += 1;
            let node = &self.nodes[ni as usize];
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    if count == 0 {
                        return Err(format!("leaf {ni} is empty"));
                    }
                    for &tri in self.leaf_triangles(start, count) {
                        seen[tri as usize] += 1;
                        if !node.bounds.contains_box(&mesh.triangle_aabb(tri as usize), 1e-9) {
                            return Err(format!("triangle {tri} escapes leaf {ni}"));
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    for child in [left, right] {
                        if !node.bounds.contains_box(&self.nodes[child as usize].bounds, 1e-9) {
                            return Err(format!("child {child} escapes parent {ni}"));
                        }
                        stack.push(child);
                    }
                }
            }
        }
        if visited != self.nodes.len() {
            return Err(format!("{} unreachable nodes", self.nodes.len() - visited));
        }
        if let Some(tri) = seen.iter().position(|&c| c != 1) {
            return Err(format!("triangle {tri} appears {} times", seen[tri]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn tri_at(offset: Vec3) -> [Point3; 3] {
        [offset, offset + Vec3::X, offset + Vec3::Y]
    }

    #[test]
    fn single_triangle_is_single_leaf() {
        let mesh = TriangleMesh::from_triangles(&[tri_at(Vec3::ZERO)]).unwrap();
        let bvh = Bvh::build(&mesh).unwrap();
        assert_eq!(bvh.nodes().len(), 1);
        assert_eq!(bvh.root().bounds, mesh.triangle_aabb(0));
        assert!(matches!(bvh.root().kind, NodeKind::Leaf { count: 1, .. }));
    }

    #[test]
    fn disjoint_pair_root_is_union() {
        // Leaf size 4 would keep two triangles in one leaf; use enough
        // triangles per side to force a split.
        let tris: Vec<_> = (0..4)
            .map(|i| tri_at(Vec3::new(i as f64 * 0.01, 0.0, 0.0)))
            .chain((0..4).map(|i| tri_at(Vec3::new(10.0 + i as f64 * 0.01, 0.0, 0.0))))
            .collect();
        let mesh = TriangleMesh::from_triangles(&tris).unwrap();
        let bvh = Bvh::build(&mesh).unwrap();
        let NodeKind::Inner { left, right } = bvh.root().kind else {
            panic!("expected a split root");
        };
        let (l, r) = (bvh.nodes()[left as usize], bvh.nodes()[right as usize]);
        assert!(matches!(l.kind, NodeKind::Leaf { .. }));
        assert!(matches!(r.kind, NodeKind::Leaf { .. }));
        assert_eq!(bvh.root().bounds, l.bounds.union(&r.bounds));
        assert!(!l.bounds.overlaps(&r.bounds));
        bvh.validate(&mesh).unwrap();
    }

    #[test]
    fn two_disjoint_triangles() {
        let mesh =
            TriangleMesh::from_triangles(&[tri_at(Vec3::ZERO), tri_at(Vec3::new(5.0, 0.0, 0.0))])
                .unwrap();
        let bvh = Bvh::build(&mesh).unwrap();
        let union = mesh.triangle_aabb(0).union(&mesh.triangle_aabb(1));
        assert_eq!(bvh.root().bounds, union);
        bvh.validate(&mesh).unwrap();
    }

    #[test]
    fn ray_and_box_queries() {
        let tris: Vec<_> = (0..20)
            .map(|i| tri_at(Vec3::new(0.0, 0.0, i as f64)))
            .collect();
        let mesh = TriangleMesh::from_triangles(&tris).unwrap();
        let bvh = Bvh::build(&mesh).unwrap();
        let ray = Ray::new(Vec3::new(0.2, 0.2, 7.5), -Vec3::Z).unwrap();
        let hit = bvh.intersect_ray(&mesh, &ray).unwrap();
        assert_eq!(hit.triangle, 7);
        assert!((hit.t - 0.5).abs() < 1e-12);
        let q = Aabb::new(Vec3::new(0.0, 0.0, 2.5), Vec3::new(1.0, 1.0, 4.5)).unwrap();
        assert_eq!(bvh.overlapping(&mesh, &q), vec![3, 4]);
        let cp = bvh.closest_point(&mesh, Vec3::new(0.1, 0.1, 12.2));
        assert_eq!(cp.triangle, 12);
        assert!((cp.distance - 0.2).abs() < 1e-12);
    }
}
