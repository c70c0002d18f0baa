use super::{Aabb, Point3, Vec3};

/// Separating-axis triangle/box test over the 13 candidate axes: the three
/// box normals, the triangle normal, and the nine edge-cross-axis products.
/// Touching counts as overlap. Zero-area triangles degrade to the
/// segment/point case automatically: their normal and any zero cross axis
/// project everything onto 0 and never separate.
pub fn triangle_aabb_overlap(tri: &[Point3; 3], aabb: &Aabb) -> bool {
    let c = aabb.center();
    let h = aabb.half_extents();
    let v0 = tri[0] - c;
    let v1 = tri[1] - c;
    let v2 = tri[2] - c;

    // Box face normals.
    for axis in 0..3 {
        let lo = v0[axis].min(v1[axis]).min(v2[axis]);
        let hi = v0[axis].max(v1[axis]).max(v2[axis]);
        if lo > h[axis] || hi < -h[axis] {
            return false;
        }
    }

    let e0 = v1 - v0;
    let e1 = v2 - v1;
    let e2 = v0 - v2;

    // Edge x box-axis cross products.
    let basis = [Vec3::X, Vec3::Y, Vec3::Z];
    for edge in [e0, e1, e2] {
        for b in basis {
            let axis = b.cross(edge);
            if separated_on(axis, v0, v1, v2, h) {
                return false;
            }
        }
    }

    // Triangle plane.
    let n = e0.cross(e1);
    let d = n.dot(v0);
    let r = h.dot(n.abs());
    d.abs() <= r
}

fn separated_on(axis: Vec3, v0: Vec3, v1: Vec3, v2: Vec3, h: Vec3) -> bool {
    let p0 = axis.dot(v0);
    let p1 = axis.dot(v1);
    let p2 = axis.dot(v2);
    let r = h.dot(axis.abs());
    let lo = p0.min(p1).min(p2);
    let hi = p0.max(p1).max(p2);
    lo > r || hi < -r
}
