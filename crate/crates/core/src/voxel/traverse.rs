use super::{VoxelGrid, VoxelIndex};
use crate::geometry::Ray;

/// 3D DDA walk (Amanatides & Woo) over the voxels a ray passes through,
/// starting where the ray enters the grid bounds.
///
/// On exact edge/corner crossings only one axis advances per step, chosen
/// in x, y, z order, so the sequence stays face-connected and deterministic.
pub struct RayTraversal<'g> {
    grid: &'g VoxelGrid,
    cell: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    t_exit: f64,
    done: bool,
}

impl<'g> RayTraversal<'g> {
    pub fn new(grid: &'g VoxelGrid, ray: &Ray) -> Self {
        let mut it = RayTraversal {
            grid,
            cell: [0; 3],
            step: [0; 3],
            t_max: [f64::INFINITY; 3],
            t_delta: [f64::INFINITY; 3],
            t_exit: 0.0,
            done: true,
        };
        let Some((t_enter, t_exit)) = grid.bounds.ray_interval(ray) else {
            return it;
        };
        let entry = ray.at(t_enter);
        let min = grid.bounds.min;
        let size = grid.voxel_size;
        for a in 0..3 {
            let n = grid.dims[a] as i64;
            let c = ((entry[a] - min[a]) / size[a]).floor() as i64;
            let c = c.clamp(0, n - 1);
            it.cell[a] = c;
            let d = ray.direction[a];
            if d > 0.0 {
                it.step[a] = 1;
                let boundary = min[a] + (c + 1) as f64 * size[a];
                it.t_max[a] = (boundary - ray.origin[a]) / d;
                it.t_delta[a] = size[a] / d;
            } else if d < 0.0 {
                it.step[a] = -1;
                let boundary = min[a] + c as f64 * size[a];
                it.t_max[a] = (boundary - ray.origin[a]) / d;
                it.t_delta[a] = -size[a] / d;
            }
        }
        it.t_exit = t_exit;
        it.done = false;
        it
    }
}

impl Iterator for RayTraversal<'_> {
    type Item = VoxelIndex;

    fn next(&mut self) -> Option<VoxelIndex> {
        if self.done {
            return None;
        }
        let out = VoxelIndex::new(self.cell[0] as u16, self.cell[1] as u16, self.cell[2] as u16);
        let mut axis = 0;
        for a in 1..3 {
            if self.t_max[a] < self.t_max[axis] {
                axis = a;
            }
        }
        if self.t_max[axis] > self.t_exit {
            self.done = true;
        } else {
            self.cell[axis] += self.step[axis];
            self.t_max[axis] += self.t_delta[axis];
            let n = self.grid.dims[axis] as i64;
            if self.cell[axis] < 0 || self.cell[axis] >= n {
                self.done = true;
            }
        }
        Some(out)
    }
}
