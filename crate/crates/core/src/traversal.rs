//! Incremental voxel traversal along a ray (Amanatides & Woo).

use nalgebra::Vector3;

use crate::model::GridGeometry;

/// One traversed voxel and the ray parameter interval spent inside it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelStep {
    pub voxel: [usize; 3],
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Ray-box slab test against the grid bounds, clipped to `t ≥ 0`.
pub fn clip_to_grid(geometry: &GridGeometry, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let ext = geometry.extents();
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i] == 0.0 {
            if origin[i] < ext.min[i] || origin[i] >= ext.max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut a, mut b) = ((ext.min[i] - origin[i]) * inv, (ext.max[i] - origin[i]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Iterator over the voxels pierced by a ray, in order of increasing `t`.
pub struct GridRay {
    voxel: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    t: f64,
    t_end: f64,
    dims: [i64; 3],
    done: bool,
}

impl GridRay {
    pub fn new(geometry: &GridGeometry, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Self> {
        let (t0, t1) = clip_to_grid(geometry, origin, dir)?;
        let h = geometry.voxel_size;
        let start = origin + dir * t0;
        let dims = geometry.dims.map(|d| d as i64);
        let mut voxel = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            let v = ((start[i] - geometry.origin[i]) / h).floor() as i64;
            voxel[i] = v.clamp(0, dims[i] - 1);
            if dir[i] > 0.0 {
                step[i] = 1;
                let boundary = geometry.origin[i] + (voxel[i] + 1) as f64 * h;
                t_max[i] = (boundary - origin[i]) / dir[i];
                t_delta[i] = h / dir[i];
            } else if dir[i] < 0.0 {
                step[i] = -1;
                let boundary = geometry.origin[i] + voxel[i] as f64 * h;
                t_max[i] = (boundary - origin[i]) / dir[i];
                t_delta[i] = -h / dir[i];
            }
        }
        Some(Self {
            voxel,
            step,
            t_max,
            t_delta,
            t: t0,
            t_end: t1,
            dims,
            done: false,
        })
    }
}

impl Iterator for GridRay {
    type Item = VoxelStep;

    fn next(&mut self) -> Option<VoxelStep> {
        if self.done {
            return None;
        }
        let axis = if self.t_max[0] <= self.t_max[1] && self.t_max[0] <= self.t_max[2] {
            0
        } else if self.t_max[1] <= self.t_max[2] {
            1
        } else {
            2
        };
        let t_exit = self.t_max[axis].min(self.t_end);
        let out = VoxelStep {
            voxel: self.voxel.map(|v| v as usize),
            t_enter: self.t,
            t_exit,
        };
        self.t = self.t_max[axis];
        self.voxel[axis] += self.step[axis];
        self.t_max[axis] += self.t_delta[axis];
        if self.t >= self.t_end || self.voxel[axis] < 0 || self.voxel[axis] >= self.dims[axis] {
            self.done = true;
        }
        Some(out)
    }
}
