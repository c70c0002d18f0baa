//! Seeded study shapes: a fractal heightfield and a sphere-glyph scatterplot.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Point3, TriangleMesh, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    /// Value-noise fBm heightfield over the unit square, z up.
    Terrain {
        #[serde(default = "default_terrain_samples")]
        samples: usize,
        /// Height range in meters.
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_octaves")]
        octaves: u32,
        /// Lattice cells per side of the coarsest octave.
        #[serde(default = "default_base_cells")]
        base_cells: usize,
        #[serde(default = "default_persistence")]
        persistence: f64,
        /// Overrides the master seed's environment stream.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Icosphere glyphs at uniform positions inside the unit cube.
    Scatterplot {
        #[serde(default = "default_point_count")]
        point_count: usize,
        #[serde(default = "default_glyph_radius")]
        glyph_radius: f64,
        #[serde(default = "default_subdivisions")]
        subdivisions: u32,
        #[serde(default)]
        seed: Option<u64>,
    },
}

fn default_terrain_samples() -> usize {
    65
}
fn default_amplitude() -> f64 {
    0.25
}
fn default_octaves() -> u32 {
    4
}
fn default_base_cells() -> usize {
    3
}
fn default_persistence() -> f64 {
    0.5
}
fn default_point_count() -> usize {
    100
}
fn default_glyph_radius() -> f64 {
    0.03
}
fn default_subdivisions() -> u32 {
    1
}

impl EnvironmentSpec {
    pub fn terrain() -> Self {
        EnvironmentSpec::Terrain {
            samples: default_terrain_samples(),
            amplitude: default_amplitude(),
            octaves: default_octaves(),
            base_cells: default_base_cells(),
            persistence: default_persistence(),
            seed: None,
        }
    }

    pub fn scatterplot() -> Self {
        EnvironmentSpec::Scatterplot {
            point_count: default_point_count(),
            glyph_radius: default_glyph_radius(),
            subdivisions: default_subdivisions(),
            seed: None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvironmentSpec::Terrain { .. } => "terrain",
            EnvironmentSpec::Scatterplot { .. } => "scatterplot",
        }
    }

    pub fn seed_override(&self) -> Option<u64> {
        match self {
            EnvironmentSpec::Terrain { seed, .. } | EnvironmentSpec::Scatterplot { seed, .. } => *seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            EnvironmentSpec::Terrain {
                samples,
                amplitude,
                octaves,
                base_cells,
                persistence,
                ..
            } => {
                if samples < 2 {
                    return Err("terrain samples must be >= 2".into());
                }
                if !(amplitude >= 0.0 && amplitude.is_finite()) {
                    return Err("terrain amplitude must be >= 0".into());
                }
                if octaves == 0 || octaves > 16 || base_cells == 0 {
                    return Err("terrain needs 1..=16 octaves and base_cells >= 1".into());
                }
                if !(persistence > 0.0 && persistence.is_finite()) {
                    return Err("terrain persistence must be positive".into());
                }
            }
            EnvironmentSpec::Scatterplot {
                point_count,
                glyph_radius,
                subdivisions,
                ..
            } => {
                if point_count == 0 {
                    return Err("scatterplot needs at least one point".into());
                }
                if !(glyph_radius > 0.0 && glyph_radius < 0.5) {
                    return Err("glyph_radius must be in (0, 0.5)".into());
                }
                if subdivisions > 4 {
                    return Err("at most 4 icosphere subdivisions".into());
                }
            }
        }
        Ok(())
    }
}

pub fn generate_environment(spec: &EnvironmentSpec, rng: &mut ChaCha8Rng) -> Result<TriangleMesh, GeometryError> {
    match *spec {
        EnvironmentSpec::Terrain {
            samples,
            amplitude,
            octaves,
            base_cells,
            persistence,
            ..
        } => {
            let heights = fbm_heights(samples, octaves, base_cells, persistence, rng);
            heightfield_mesh(&heights, samples, amplitude)
        }
        EnvironmentSpec::Scatterplot {
            point_count,
            glyph_radius,
            subdivisions,
            ..
        } => {
            let unit = icosphere(subdivisions);
            let glyphs: Vec<TriangleMesh> = (0..point_count)
                .map(|_| {
                    let c = Vec3::new(
                        rng.random_range(glyph_radius..1.0 - glyph_radius),
                        rng.random_range(glyph_radius..1.0 - glyph_radius),
                        rng.random_range(glyph_radius..1.0 - glyph_radius),
                    );
                    let verts = unit.vertices().iter().map(|&v| c + v * glyph_radius).collect();
                    TriangleMesh::new(verts, unit.triangles().to_vec())
                })
                .collect::<Result<_, _>>()?;
            TriangleMesh::merge(&glyphs)
        }
    }
}

/// Heights normalized to [0, 1], row-major with x fastest.
fn fbm_heights(n: usize, octaves: u32, base_cells: usize, persistence: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut acc = vec![0.0; n * n];
    let mut weight = 1.0;
    for o in 0..octaves {
        let cells = base_cells << o;
        let side = cells + 1;
        let lattice: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
        for y in 0..n {
            for x in 0..n {
                let fx = x as f64 / (n - 1) as f64 * cells as f64;
                let fy = y as f64 / (n - 1) as f64 * cells as f64;
                let (x0, y0) = ((fx.floor() as usize).min(cells - 1), (fy.floor() as usize).min(cells - 1));
                let (tx, ty) = (smoothstep(fx - x0 as f64), smoothstep(fy - y0 as f64));
                let at = |i: usize, j: usize| lattice[j * side + i];
                let a = at(x0, y0) + (at(x0 + 1, y0) - at(x0, y0)) * tx;
                let b = at(x0, y0 + 1) + (at(x0 + 1, y0 + 1) - at(x0, y0 + 1)) * tx;
                acc[y * n + x] += weight * (a + (b - a) * ty);
            }
        }
        weight *= persistence;
    }
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    acc.iter()
        .map(|&h| if span > 0.0 { (h - lo) / span } else { 0.0 })
        .collect()
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Triangulates an `n`×`n` grid of unit heights over the unit square,
/// two triangles per cell.
pub fn heightfield_mesh(heights: &[f64], n: usize, amplitude: f64) -> Result<TriangleMesh, GeometryError> {
    let step = 1.0 / (n - 1) as f64;
    let vertices = (0..n * n)
        .map(|idx| {
            let (x, y) = (idx % n, idx / n);
            Point3::new(x as f64 * step, y as f64 * step, heights[idx] * amplitude)
        })
        .collect();
    let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for y in 0..n - 1 {
        for x in 0..n - 1 {
            let a = (y * n + x) as u32;
            let b = a + 1;
            let c = a + n as u32;
            let d = c + 1;
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    TriangleMesh::new(vertices, triangles)
}

/// Unit icosphere; 20·4^s triangles.
pub fn icosphere(subdivisions: u32) -> TriangleMesh {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, p, 0.0),
        (1.0, p, 0.0),
        (-1.0, -p, 0.0),
        (1.0, -p, 0.0),
        (0.0, -1.0, p),
        (0.0, 1.0, p),
        (0.0, -1.0, -p),
        (0.0, 1.0, -p),
        (p, 0.0, -1.0),
        (p, 0.0, 1.0),
        (-p, 0.0, -1.0),
        (-p, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).try_normalize().expect("nonzero"))
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
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
    for _ in 0..subdivisions {
        let mut mid: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let m = ((verts[a as usize] + verts[b as usize]) * 0.5).try_normalize().expect("nonzero");
                verts.push(m);
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriangleMesh::new(verts, faces).expect("icosphere indices valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flat_heightfield_is_planar() {
        let spec = EnvironmentSpec::Terrain {
            samples: 9,
            amplitude: 0.0,
            octaves: 3,
            base_cells: 2,
            persistence: 0.5,
            seed: None,
        };
        let mesh = generate_environment(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(mesh.triangle_count(), 2 * 8 * 8);
        assert!(mesh.vertices().iter().all(|v| v.z == 0.0));
    }

    #[test]
    fn terrain_heights_span_amplitude() {
        let mesh = generate_environment(&EnvironmentSpec::terrain(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = mesh.aabb();
        assert_eq!(b.min.z, 0.0);
        assert!((b.max.z - 0.25).abs() < 1e-15);
        assert_eq!(mesh.triangle_count(), 2 * 64 * 64);
    }

    #[test]
    fn scatterplot_is_deterministic() {
        let spec = EnvironmentSpec::scatterplot();
        let a = generate_environment(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = generate_environment(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.vertices(), b.vertices());
        assert_eq!(a.triangle_count(), 100 * 80);
        let bounds = a.aabb();
        assert!(bounds.min.to_array().iter().all(|&x| x >= 0.0) && bounds.max.max_component() <= 1.0);
    }

    #[test]
    fn icosphere_counts_and_radius() {
        for s in 0..3 {
            let m = icosphere(s);
            assert_eq!(m.triangle_count(), 20 * 4usize.pow(s));
            assert!(m.vertices().iter().all(|v| (v.length() - 1.0).abs() < 1e-12));
        }
        assert_eq!(icosphere(1).vertices().len(), 42);
    }
}
