mod common;

use common::*;
use heed_core::geometry::{closest_point_on_triangle, ray_triangle, triangle_aabb_overlap, Aabb, Bvh, Point3, Vec3};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn bvh_nearest_hit_matches_linear_scan() {
    let mut r = rng(101);
    for m in 0..20 {
        let n = r.random_range(1..300);
        let mesh = random_mesh(&mut r, n);
        let bvh = Bvh::build(&mesh).unwrap();
        bvh.validate(&mesh).unwrap();
        for _ in 0..200 {
            let ray = random_ray(&mut r);
            let mut want: Option<(f64, usize)> = None;
            for id in 0..mesh.triangle_count() {
                if let Some(t) = ray_triangle(&ray, &mesh.triangle(id)) {
                    if want.is_none_or(|(bt, _)| t < bt) {
                        want = Some((t, id));
                    }
                }
            }
            let got = bvh.intersect_ray(&mesh, &ray).map(|h| (h.t, h.triangle));
            match (got, want) {
                (None, None) => {}
                (Some((t, id)), Some((wt, wid))) => {
                    assert_eq!(id, wid, "mesh {m}");
                    assert!((t - wt).abs() <= 1e-6 * wt.abs().max(1e-12), "mesh {m}: {t} vs {wt}");
                }
                other => panic!("mesh {m}: {other:?}"),
            }
        }
    }
}

#[test]
fn closest_point_matches_linear_scan() {
    let mut r = rng(102);
    for _ in 0..20 {
        let n = r.random_range(1..200);
        let mesh = random_mesh(&mut r, n);
        let bvh = Bvh::build(&mesh).unwrap();
        for _ in 0..100 {
            let p = point_in(&mut r, -0.5, 1.5);
            let best = (0..mesh.triangle_count())
                .map(|id| closest_point_on_triangle(p, &mesh.triangle(id)).distance(p))
                .fold(f64::INFINITY, f64::min);
            let got = bvh.closest_point(&mesh, p);
            assert!((got.distance - best).abs() < 1e-12, "{} vs {best}", got.distance);
            assert!((got.point.distance(p) - got.distance).abs() < 1e-12);
        }
    }
}

#[test]
fn box_query_matches_linear_scan() {
    let mut r = rng(103);
    for _ in 0..20 {
        let n = r.random_range(1..200);
        let mesh = random_mesh(&mut r, n);
        let bvh = Bvh::build(&mesh).unwrap();
        for _ in 0..50 {
            let a = point_in(&mut r, -0.2, 1.2);
            let q = Aabb::from_points([a, a + point_in(&mut r, 0.0, 0.4)]);
            let got = bvh.overlapping(&mesh, &q);
            let want: Vec<usize> = (0..mesh.triangle_count())
                .filter(|&id| mesh.triangle_aabb(id).overlaps(&q))
                .collect();
            assert_eq!(got, want);
        }
    }
}

fn tri_samples(tri: &[Point3; 3], n: usize) -> impl Iterator<Item = Point3> + '_ {
    (0..=n).flat_map(move |i| {
        (0..=n - i).map(move |j| {
            let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
            tri[0] + (tri[1] - tri[0]) * u + (tri[2] - tri[0]) * v
        })
    })
}

fn arb_point() -> impl Strategy<Value = Point3> {
    (-1.0..2.0f64, -1.0..2.0f64, -1.0..2.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    /// A sampled triangle point inside the box forces overlap; overlap means
    /// the sampled surface comes within sampling resolution of the box.
    #[test]
    fn sat_agrees_with_sampling(a in arb_point(), b in arb_point(), c in arb_point(),
                                lo in arb_point(), ext in (0.05..1.0f64, 0.05..1.0f64, 0.05..1.0f64)) {
        let tri = [a, b, c];
        let aabb = Aabb::new(lo, lo + Vec3::new(ext.0, ext.1, ext.2)).unwrap();
        let n = 64;
        let sat = triangle_aabb_overlap(&tri, &aabb);
        let min_d2 = tri_samples(&tri, n).map(|p| aabb.distance_squared(p)).fold(f64::INFINITY, f64::min);
        if min_d2 == 0.0 {
            prop_assert!(sat);
        }
        if sat {
            let longest = (b - a).length().max((c - a).length()).max((c - b).length());
            prop_assert!(min_d2.sqrt() <= longest / n as f64 + 1e-12);
        }
    }
}
