use serde::{Deserialize, Serialize};

use super::{GeometryError, Point3, Vec3};

/// Axis-aligned bounding box, `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Result<Self, GeometryError> {
        if !min.is_finite() || !max.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(GeometryError::InvertedBox);
        }
        Ok(Self { min, max })
    }

    /// Box spanning the given points. Panics on an empty iterator.
    pub fn from_points<I: IntoIterator<Item = Point3>>(points: I) -> Self {
        let mut iter = points.into_iter();
        let first = iter.next().expect("Aabb::from_points needs at least one point");
        iter.fold(Self { min: first, max: first }, |b, p| Self {
            min: b.min.min(p),
            max: b.max.max(p),
        })
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.min(o.min),
            max: self.max.max(o.max),
        }
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn half_extents(&self) -> Vec3 {
        self.extent() * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().length()
    }

    /// Closed-interval overlap test.
    pub fn overlaps(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x
            && self.max.x >= o.min.x
            && self.min.y <= o.max.y
            && self.max.y >= o.min.y
            && self.min.z <= o.max.z
            && self.max.z >= o.min.z
    }

    pub fn contains_point(&self, p: Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn contains_box(&self, o: &Aabb, slack: f64) -> bool {
        o.min.x >= self.min.x - slack
            && o.min.y >= self.min.y - slack
            && o.min.z >= self.min.z - slack
            && o.max.x <= self.max.x + slack
            && o.max.y <= self.max.y + slack
            && o.max.z <= self.max.z + slack
    }

    pub fn expanded(&self, margin: Vec3) -> Aabb {
        Aabb {
            min: self.min - margin,
            max: self.max + margin,
        }
    }

    /// Squared distance from `p` to the closest point of the box (0 inside).
    pub fn distance_squared(&self, p: Point3) -> f64 {
        let d = (self.min - p).max(Vec3::ZERO).max(p - self.max);
        d.length_squared()
    }

    /// Slab test: the parameter interval `[t_enter, t_exit]` of the ray inside
    /// the box, clipped to `t >= 0`.
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let o = ray.origin[axis];
            let d = ray.direction[axis];
            let lo = self.min[axis];
            let hi = self.max[axis];
            if d == 0.0 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((lo - o) * inv, (hi - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Half-line with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Point3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Point3, direction: Vec3) -> Result<Self, GeometryError> {
        if !origin.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let direction = direction.try_normalize().ok_or(GeometryError::ZeroDirection)?;
        Ok(Self { origin, direction })
    }

    /// Ray towards `target`. Fails when the two points coincide.
    pub fn towards(origin: Point3, target: Point3) -> Result<Self, GeometryError> {
        Self::new(origin, target - origin)
    }

    /// Wraps an already-unit direction without renormalizing, so that rays
    /// read back from a trace are bit-identical to the recorded ones.
    pub fn from_unit(origin: Point3, direction: Vec3) -> Result<Self, GeometryError> {
        if !origin.is_finite() || !direction.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if (direction.length() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotUnit);
        }
        Ok(Self { origin, direction })
    }

    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.direction * t
    }

    /// Ray parameter of the point on the ray's line closest to `p`.
    pub fn closest_parameter(&self, p: Point3) -> f64 {
        (p - self.origin).dot(self.direction)
    }
}
