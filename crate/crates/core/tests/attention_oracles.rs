mod common;

use common::*;
use heed_core::attention::{capture_deltas, AttentionMap, CaptureConfig, CaptureMode, GazeSample};
use heed_core::geometry::{Ray, Vec3};
use heed_core::voxel::{VoxelGrid, VoxelIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn sparse_grid(r: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> VoxelGrid {
    let all = VoxelGrid::new(unit_box(), dims).unwrap();
    let active: Vec<VoxelIndex> = all.iter_indices().filter(|_| r.random_bool(p)).collect();
    VoxelGrid::with_active(unit_box(), dims, active).unwrap()
}

#[test]
fn half_life_is_exact() {
    for hl in [0.5, 1.0, 7.25, 60.0, 3600.0] {
        let cfg = CaptureConfig {
            half_life: hl,
            ..CaptureConfig::default()
        };
        let grid = VoxelGrid::new(unit_box(), [2, 2, 2]).unwrap();
        let mut m = AttentionMap::new(0, &grid, &cfg);
        m.add_linear(3, 1.0, 10.0).unwrap();
        assert!((m.effective_linear(3, 10.0 + hl).unwrap() - 0.5).abs() < 1e-12);
        assert!((m.effective_linear(3, 10.0 + 2.0 * hl).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(m.effective_linear(3, 10.0).unwrap(), 1.0);
    }
}

#[test]
fn lazy_decay_matches_eager_reference() {
    let mut r = rng(301);
    for trial in 0..10 {
        let dims = [8, 8, 8];
        let grid = sparse_grid(&mut r, dims, 0.3);
        let cfg = CaptureConfig {
            half_life: r.random_range(0.5..60.0),
            influence_radius: if trial % 2 == 0 { 0.0 } else { 0.2 },
            mode: if trial % 3 == 0 { CaptureMode::DataAgnostic } else { CaptureMode::DataAware },
            ..CaptureConfig::default()
        };
        let mut lazy = AttentionMap::new(0, &grid, &cfg);
        let mut eager = EagerField::new(grid.len(), cfg.half_life);
        let mut t = 0.0;
        for n in 0..2000 {
            // Repeated timestamps are allowed.
            if r.random_bool(0.9) {
                t += r.random_range(0.0..0.5);
            }
            let sample = GazeSample {
                user: 0,
                time: t,
                ray: random_ray(&mut r),
            };
            let deltas = lazy.capture(&grid, &sample, &cfg).unwrap();
            eager.advance(t);
            for (v, d) in deltas {
                eager.add(grid.linear(v), d);
            }
            if n % 250 == 0 {
                let probe = t + r.random_range(0.0..5.0);
                eager.advance(probe);
                for li in 0..grid.len() {
                    let a = lazy.decayed_linear(li, probe).unwrap();
                    let b = eager.values[li];
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
                }
                t = probe;
            }
        }
    }
}

#[test]
fn snapshot_applies_epsilon_floor() {
    let grid = VoxelGrid::new(unit_box(), [2, 1, 1]).unwrap();
    let cfg = CaptureConfig {
        half_life: 1.0,
        ..CaptureConfig::default()
    };
    let mut m = AttentionMap::new(0, &grid, &cfg);
    m.add_linear(0, 1.0, 0.0).unwrap();
    m.add_linear(1, 1.0, 25.0).unwrap();
    let s = m.snapshot(25.0).unwrap();
    // 2^-25 is below the default floor of 1e-6.
    assert_eq!(s.values(), &[0.0, 1.0]);
    assert!(m.decayed_linear(0, 25.0).unwrap() > 0.0);
    assert!(m.snapshot(24.0).is_err());
}

#[test]
fn default_capture_is_one_delta() {
    let mut r = rng(302);
    let cfg = CaptureConfig::default();
    for _ in 0..500 {
        let grid = sparse_grid(&mut r, [10, 10, 10], 0.05);
        let ray = random_ray(&mut r);
        let d = capture_deltas(&grid, &ray, &cfg);
        match grid.nearest_active_hit(&ray) {
            Some(v) => assert_eq!(d, vec![(v, cfg.center_increment)]),
            None => assert!(d.is_empty()),
        }
    }
}

#[test]
fn region_of_influence_matches_sphere_oracle() {
    let mut r = rng(303);
    for n in 0..500 {
        let grid = sparse_grid(&mut r, [12, 12, 12], 0.4);
        let cfg = CaptureConfig {
            influence_radius: r.random_range(0.01..0.4),
            falloff_exponent: [0.5, 1.0, 2.0, 3.0][n % 4],
            center_increment: r.random_range(0.1..3.0),
            ..CaptureConfig::default()
        };
        let ray = random_ray(&mut r);
        let deltas = capture_deltas(&grid, &ray, &cfg);
        let Some(center) = grid.traverse_ray(&ray).into_iter().find(|&v| grid.is_active(v)) else {
            assert!(deltas.is_empty());
            continue;
        };
        let c = grid.voxel_center(center);
        let want: Vec<VoxelIndex> = grid
            .iter_indices()
            .filter(|&v| grid.is_active(v) && (v == center || grid.voxel_center(v).distance(c) < cfg.influence_radius))
            .collect();
        let mut got: Vec<VoxelIndex> = deltas.iter().map(|d| d.0).collect();
        got.sort();
        assert_eq!(got, want);
        let center_delta = deltas.iter().find(|d| d.0 == center).unwrap().1;
        assert_eq!(center_delta, cfg.center_increment);
        for &(v, d) in &deltas {
            if v != center {
                assert!(d < center_delta, "{v}: {d} >= {center_delta}");
                let dist = grid.voxel_center(v).distance(c);
                let w = (1.0 - dist / cfg.influence_radius).powf(cfg.falloff_exponent);
                assert!((d - cfg.center_increment * w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn data_agnostic_capture_covers_the_walk() {
    let mut r = rng(304);
    let cfg = CaptureConfig {
        mode: CaptureMode::DataAgnostic,
        ..CaptureConfig::default()
    };
    for _ in 0..200 {
        let grid = sparse_grid(&mut r, [7, 9, 5], 0.1);
        let ray = random_ray(&mut r);
        let mut walk = grid.traverse_ray(&ray);
        walk.sort();
        let got: Vec<_> = capture_deltas(&grid, &ray, &cfg).into_iter().map(|d| d.0).collect();
        assert_eq!(got, walk);
    }
}

#[test]
fn capture_rejects_time_going_backwards() {
    let grid = VoxelGrid::new(unit_box(), [2, 2, 2]).unwrap();
    let cfg = CaptureConfig::default();
    let mut m = AttentionMap::new(0, &grid, &cfg);
    let ray = Ray::new(Vec3::new(0.25, 0.25, 3.0), -Vec3::Z).unwrap();
    m.capture(&grid, &GazeSample { user: 0, time: 2.0, ray }, &cfg).unwrap();
    let before = m.clone();
    assert!(m.capture(&grid, &GazeSample { user: 0, time: 1.0, ray }, &cfg).is_err());
    assert_eq!(m, before);
}
