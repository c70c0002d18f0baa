use std::fmt::Write as _;

use super::{Aabb, GeometryError, Point3, Ray, Vec3};

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3>,
    triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        if triangles.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i as usize >= n) {
                return Err(GeometryError::IndexOutOfRange {
                    triangle: t,
                    index: bad as usize,
                    vertex_count: n,
                });
            }
        }
        Ok(Self { vertices, triangles })
    }

    /// Mesh where every triangle owns its three vertices.
    pub fn from_triangles(tris: &[[Point3; 3]]) -> Result<Self, GeometryError> {
        let vertices = tris.iter().flat_map(|t| t.iter().copied()).collect();
        let triangles = (0..tris.len() as u32)
            .map(|t| [3 * t, 3 * t + 1, 3 * t + 2])
            .collect();
        Self::new(vertices, triangles)
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle(&self, id: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[id];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_aabb(&self, id: usize) -> Aabb {
        Aabb::from_points(self.triangle(id))
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(
            self.triangles
                .iter()
                .flat_map(|t| t.iter().map(|&i| self.vertices[i as usize])),
        )
    }

    /// Concatenates meshes, offsetting indices.
    pub fn merge(parts: &[TriangleMesh]) -> Result<Self, GeometryError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for part in parts {
            let base = vertices.len() as u32;
            vertices.extend_from_slice(&part.vertices);
            triangles.extend(part.triangles.iter().map(|t| t.map(|i| i + base)));
        }
        Self::new(vertices, triangles)
    }

    /// Parses the `v`/`f` subset of Wavefront OBJ. Polygonal faces are fan
    /// triangulated; texture/normal references (`1/2/3`) and negative indices
    /// are accepted; every other record is ignored.
    pub fn parse_obj(text: &str) -> Result<Self, GeometryError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let mut fields = line.split_whitespace();
            let err = |msg: &str| GeometryError::Obj {
                line: lineno + 1,
                message: msg.to_string(),
            };
            match fields.next() {
                Some("v") => {
                    let mut c = [0.0; 3];
                    for slot in &mut c {
                        *slot = fields
                            .next()
                            .ok_or_else(|| err("vertex needs 3 coordinates"))?
                            .parse()
                            .map_err(|_| err("bad vertex coordinate"))?;
                    }
                    vertices.push(Vec3::from_array(c));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for f in fields {
                        let head = f.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| err("bad face index"))?;
                        let resolved = match i {
                            0 => return Err(err("face index 0")),
                            i if i > 0 => i - 1,
                            i => vertices.len() as i64 + i,
                        };
                        if resolved < 0 || resolved as usize >= vertices.len() {
                            return Err(err("face index out of range"));
                        }
                        idx.push(resolved as u32);
                    }
                    if idx.len() < 3 {
                        return Err(err("face needs at least 3 vertices"));
                    }
                    for w in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[w], idx[w + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }
}

/// Möller–Trumbore ray/triangle test. Returns the ray parameter `t >= 0`.
/// Zero-area triangles never report a hit.
pub fn ray_triangle(ray: &Ray, tri: &[Point3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = ray.direction.cross(e2);
    let det = e1.dot(p);
    let scale = e1.length() * e2.length();
    if det.abs() <= 1e-14 * scale || scale == 0.0 {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri[0];
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.direction.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    (t >= 0.0).then_some(t)
}

/// Closest point on a triangle to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: Point3, tri: &[Point3; 3]) -> Point3 {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let denom = d1 - d3;
        let v = if denom != 0.0 { d1 / denom } else { 0.0 };
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let denom = d2 - d6;
        let w = if denom != 0.0 { d2 / denom } else { 0.0 };
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        let w = if denom != 0.0 { (d4 - d3) / denom } else { 0.0 };
        return b + (c - b) * w;
    }
    let sum = va + vb + vc;
    if sum == 0.0 {
        // Degenerate triangle: fall back to the best edge.
        return [(a, b), (b, c), (c, a)]
            .into_iter()
            .map(|(s, e)| closest_point_on_segment(p, s, e))
            .min_by(|x, y| x.distance(p).total_cmp(&y.distance(p)))
            .unwrap_or(a);
    }
    let denom = 1.0 / sum;
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

fn closest_point_on_segment(p: Point3, a: Point3, b: Point3) -> Point3 {
    let ab = b - a;
    let len2 = ab.length_squared();
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}
