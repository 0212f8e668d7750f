//! Deterministic synthetic scenes: boxes on a ground slab, a surround camera
//! rig, analytic depth maps and ground-truth occupancy.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{AttributeProvider, Attributes};
use crate::model::{Aabb, CameraModel, DepthMap, GridGeometry, OccupancyGrid, Quat, NO_RETURN};
use crate::sampler::splitmix64;

/// Uncertainty floor for generated depth maps.
pub const MIN_UNCERTAINTY: f64 = 1e-3;

/// Marker for pixels whose ray hits nothing.
pub const NO_CLASS: u8 = u8::MAX;

/// Ground slab occupying `(z − thickness, z]` over the scene's x/y extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub z: f64,
    pub thickness: f64,
    pub class: u8,
}

/// Box rotated by `yaw` about the vertical axis through its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub yaw: f64,
    pub class: u8,
}

impl SceneBox {
    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn to_world_dir(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
    }

    /// Inclusive point-in-box test.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= self.half_extents[i])
    }

    /// Entry distance of the ray `o + t·d`, `t > 0`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let lo = self.to_local(o);
        let (s, c) = self.yaw.sin_cos();
        let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
        slab_entry(&lo, &ld, &(-self.half_extents), &self.half_extents)
    }

    /// Closest point on the box surface.
    pub fn closest_surface_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let l = self.to_local(p);
        let h = self.half_extents;
        let mut q = Vector3::new(l.x.clamp(-h.x, h.x), l.y.clamp(-h.y, h.y), l.z.clamp(-h.z, h.z));
        if q == l {
            let mut best = (f64::INFINITY, 0);
            for i in 0..3 {
                let margin = h[i] - l[i].abs();
                if margin < best.0 {
                    best = (margin, i);
                }
            }
            let i = best.1;
            q[i] = if l[i] >= 0.0 { h[i] } else { -h[i] };
        }
        self.center + self.to_world_dir(&q)
    }
}

fn slab_entry(o: &Vector3<f64>, d: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i] < min[i] || o[i] > max[i] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub extents: Aabb,
    pub ground: Option<GroundPlane>,
    pub boxes: Vec<SceneBox>,
}

impl SceneSpec {
    fn ground_box(&self) -> Option<(Aabb, u8)> {
        self.ground.map(|g| {
            let min = Vector3::new(self.extents.min.x, self.extents.min.y, g.z - g.thickness);
            let max = Vector3::new(self.extents.max.x, self.extents.max.y, g.z);
            (Aabb::new(min, max), g.class)
        })
    }

    /// Class of the solid containing `p`; later boxes win, boxes beat ground.
    pub fn class_at(&self, p: &Vector3<f64>) -> Option<u8> {
        if let Some(b) = self.boxes.iter().rev().find(|b| b.contains(p)) {
            return Some(b.class);
        }
        let g = self.ground?;
        let (x, y) = (p.x, p.y);
        let e = &self.extents;
        let inside = x >= e.min.x && x <= e.max.x && y >= e.min.y && y <= e.max.y && p.z > g.z - g.thickness && p.z <= g.z;
        inside.then_some(g.class)
    }

    /// Nearest ray hit `(distance, class)`.
    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, u8)> {
        let mut best: Option<(f64, u8)> = None;
        if let Some((aabb, class)) = self.ground_box() {
            if let Some(t) = slab_entry(o, d, &aabb.min, &aabb.max) {
                best = Some((t, class));
            }
        }
        for b in &self.boxes {
            if let Some(t) = b.intersect(o, d) {
                if best.is_none_or(|(bt, _)| t <= bt) {
                    best = Some((t, b.class));
                }
            }
        }
        best
    }

    /// Closest point on any solid surface; `None` for an empty scene.
    pub fn nearest_surface_point(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let mut candidates: Vec<Vector3<f64>> = self.boxes.iter().map(|b| b.closest_surface_point(p)).collect();
        if let Some((aabb, _)) = self.ground_box() {
            let b = SceneBox {
                center: (aabb.min + aabb.max) / 2.0,
                half_extents: (aabb.max - aabb.min) / 2.0,
                yaw: 0.0,
                class: 0,
            };
            candidates.push(b.closest_surface_point(p));
        }
        candidates
            .into_iter()
            .min_by(|a, b| (a - p).norm_squared().total_cmp(&(b - p).norm_squared()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub num_boxes: usize,
    pub extents: Aabb,
    pub ground_z: f64,
    pub ground_thickness: f64,
    pub ground_class: u8,
    /// Horizontal half-extent range, meters.
    pub half_xy: [f64; 2],
    /// Vertical half-extent range, meters.
    pub half_z: [f64; 2],
    pub max_yaw: f64,
    /// Lattice pitch that centers and half-extents are rounded to; 0 disables.
    pub snap: f64,
    /// Boxes keep this horizontal clearance from the origin.
    pub keep_out: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_boxes: 12,
            extents: Aabb::new(Vector3::new(-16.0, -16.0, -5.0), Vector3::new(16.0, 16.0, 3.0)),
            ground_z: -1.5,
            ground_thickness: 0.5,
            ground_class: 0,
            half_xy: [0.5, 2.0],
            half_z: [0.5, 1.5],
            max_yaw: 0.0,
            snap: 0.5,
            keep_out: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extents;
        if !(0..3).all(|i| e.max[i] > e.min[i]) {
            return Err(Error::Config("scene extents have zero volume".into()));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::Config(format!("num_classes must be in 1..=254, got {}", self.num_classes)));
        }
        if self.ground_class as usize >= self.num_classes {
            return Err(Error::Config("ground class out of range".into()));
        }
        let ranges_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ranges_ok(self.half_xy) || !ranges_ok(self.half_z) {
            return Err(Error::Config("box half-extent ranges must satisfy 0 < min <= max".into()));
        }
        if self.ground_thickness <= 0.0 || self.snap < 0.0 || self.keep_out < 0.0 || self.max_yaw < 0.0 {
            return Err(Error::Config("ground thickness must be positive; snap, keep-out and yaw nonnegative".into()));
        }
        Ok(())
    }
}

fn snap_to(x: f64, pitch: f64) -> f64 {
    if pitch > 0.0 {
        (x / pitch).round() * pitch
    } else {
        x
    }
}

/// Seeded placement of `num_boxes` boxes resting on the ground slab.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = config.extents;
    let mut boxes = Vec::with_capacity(config.num_boxes);
    for _ in 0..config.num_boxes {
        let mut placed = None;
        for _ in 0..1000 {
            let mut h = Vector3::new(
                rng.random_range(config.half_xy[0]..=config.half_xy[1]),
                rng.random_range(config.half_xy[0]..=config.half_xy[1]),
                rng.random_range(config.half_z[0]..=config.half_z[1]),
            );
            for i in 0..3 {
                h[i] = snap_to(h[i], config.snap).max(if config.snap > 0.0 { config.snap } else { h[i] });
            }
            let reach = h.x.hypot(h.y);
            let (lo_x, hi_x) = (e.min.x + reach, e.max.x - reach);
            let (lo_y, hi_y) = (e.min.y + reach, e.max.y - reach);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            let cx = snap_to(rng.random_range(lo_x..=hi_x), config.snap).clamp(lo_x, hi_x);
            let cy = snap_to(rng.random_range(lo_y..=hi_y), config.snap).clamp(lo_y, hi_y);
            let yaw = if config.max_yaw > 0.0 {
                rng.random_range(-config.max_yaw..=config.max_yaw)
            } else {
                0.0
            };
            let class = if config.num_classes > 1 {
                rng.random_range(0..config.num_classes - 1) as u8 + 1
            } else {
                0
            };
            let b = SceneBox {
                center: Vector3::new(cx, cy, config.ground_z + h.z),
                half_extents: h,
                yaw,
                class,
            };
            if cx.hypot(cy) - reach >= config.keep_out {
                placed = Some(b);
                break;
            }
        }
        boxes.push(placed.ok_or_else(|| Error::Config("cannot place box inside extents outside keep-out".into()))?);
    }
    Ok(SceneSpec {
        seed,
        num_classes: config.num_classes,
        extents: e,
        ground: Some(GroundPlane {
            z: config.ground_z,
            thickness: config.ground_thickness,
            class: config.ground_class,
        }),
        boxes,
    })
}

/// Labels each voxel with the class of the solid containing its center.
pub fn rasterize_gt_grid(scene: &SceneSpec, geometry: &GridGeometry) -> Result<OccupancyGrid> {
    let empty = scene.num_classes as u8;
    let labels: Vec<u8> = (0..geometry.num_voxels())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = geometry.coords(i);
            scene.class_at(&geometry.voxel_center(x, y, z)).unwrap_or(empty)
        })
        .collect();
    OccupancyGrid::new(*geometry, scene.num_classes, labels)
}

/// Ring of `count` outward-facing cameras at height `z`, yaw-spaced evenly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Horizontal field of view, degrees.
    pub hfov_deg: f64,
    pub radius: f64,
    pub z: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            count: 6,
            height: 180,
            width: 320,
            hfov_deg: 70.0,
            radius: 1.0,
            z: 0.0,
        }
    }
}

/// Camera at `position` looking along yaw `theta` with a level horizon.
pub fn level_camera(theta: f64, position: Vector3<f64>, height: usize, width: usize, hfov_deg: f64) -> Result<CameraModel> {
    let (s, c) = theta.sin_cos();
    let right = Vector3::new(s, -c, 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let forward = Vector3::new(c, s, 0.0);
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
    CameraModel::new(f, f, width as f64 / 2.0, height as f64 / 2.0, height, width, rotation, position)
}

pub fn rig(config: &RigConfig) -> Result<Vec<CameraModel>> {
    if config.count == 0 || config.height == 0 || config.width == 0 || !(config.hfov_deg > 0.0 && config.hfov_deg < 180.0) {
        return Err(Error::Config("rig needs cameras, a nonzero image and 0 < hfov < 180".into()));
    }
    (0..config.count)
        .map(|k| {
            let theta = k as f64 * std::f64::consts::TAU / config.count as f64;
            let pos = Vector3::new(config.radius * theta.cos(), config.radius * theta.sin(), config.z);
            level_camera(theta, pos, config.height, config.width, config.hfov_deg)
        })
        .collect()
}

/// The six-camera surround preset.
pub fn surround6() -> Vec<CameraModel> {
    rig(&RigConfig::default()).expect("default rig is valid")
}

/// Looks up a rig preset by name.
pub fn rig_preset(name: &str) -> Result<RigConfig> {
    match name {
        "surround6" => Ok(RigConfig::default()),
        other => Err(Error::Config(format!("unknown rig preset {other:?}"))),
    }
}

/// Depth maps plus the class hit by each pixel ray.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRender {
    pub cameras: Vec<CameraModel>,
    pub depths: Vec<DepthMap>,
    /// Per view, row-major; `NO_CLASS` for misses.
    pub classes: Vec<Vec<u8>>,
}

fn pixel_noise(seed: u64, view: usize, row: usize, col: usize) -> f64 {
    let counter = ((view as u64) << 42) ^ ((row as u64) << 21) ^ col as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(counter)));
    rng.sample(StandardNormal)
}

/// Analytic along-ray depth at `1/downsample` resolution with optional
/// Gaussian noise of std-dev `noise` meters.
pub fn render_depth_maps(
    scene: &SceneSpec,
    cams: &[CameraModel],
    downsample: usize,
    noise: f64,
    seed: u64,
) -> Result<DepthRender> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
    }
    let cameras: Vec<CameraModel> = cams.iter().map(|c| c.downsampled(downsample)).collect::<Result<_>>()?;
    let sigma = noise.max(MIN_UNCERTAINTY);
    let mut depths = Vec::with_capacity(cameras.len());
    let mut classes = Vec::with_capacity(cameras.len());
    for (view, cam) in cameras.iter().enumerate() {
        let o = cam.origin();
        let hits: Vec<(f64, u8)> = (0..cam.height * cam.width)
            .into_par_iter()
            .map(|i| {
                let (row, col) = (i / cam.width, i % cam.width);
                let d = cam.ray_through(row as f64 + 0.5, col as f64 + 0.5);
                match scene.raycast(&o, &d) {
                    Some((t, c)) => {
                        let t = if noise > 0.0 {
                            (t + noise * pixel_noise(seed, view, row, col)).max(0.0)
                        } else {
                            t
                        };
                        (t, c)
                    }
                    None => (NO_RETURN, NO_CLASS),
                }
            })
            .collect();
        let (depth, cls): (Vec<f64>, Vec<u8>) = hits.into_iter().unzip();
        depths.push(DepthMap::new(cam.height, cam.width, depth, vec![sigma; cam.height * cam.width])?);
        classes.push(cls);
    }
    Ok(DepthRender {
        cameras,
        depths,
        classes,
    })
}

/// Attributes from the ground-truth class of each pixel's ray hit.
#[derive(Debug, Clone)]
pub struct SceneClassAttributes {
    pub classes: Vec<Vec<u8>>,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub scale: f64,
    pub opacity: f64,
    pub logit: f64,
}

impl SceneClassAttributes {
    pub fn new(render: &DepthRender, num_classes: usize) -> Self {
        Self {
            classes: render.classes.clone(),
            widths: render.cameras.iter().map(|c| c.width).collect(),
            num_classes,
            scale: 0.3,
            opacity: 0.9,
            logit: 8.0,
        }
    }
}

impl AttributeProvider for SceneClassAttributes {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn attributes(&self, view: usize, row: usize, col: usize) -> Attributes {
        let class = self.classes[view][row * self.widths[view] + col];
        let mut semantics = vec![0.0; self.num_classes];
        if let Some(s) = semantics.get_mut(class as usize) {
            *s = self.logit;
        }
        Attributes {
            scale: Vector3::repeat(self.scale),
            rotation: Quat::IDENTITY,
            opacity: self.opacity,
            semantics,
        }
    }
}

/// Rotation about +z, exposed for tests and presets.
pub fn yaw_rotation(theta: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), theta).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_scene(z: f64) -> SceneSpec {
        SceneSpec {
            seed: 0,
            num_classes: 2,
            extents: Aabb::new(Vector3::new(-50.0, -50.0, z - 1.0), Vector3::new(50.0, 50.0, z + 1.0)),
            ground: Some(GroundPlane {
                z,
                thickness: 0.5,
                class: 0,
            }),
            boxes: vec![],
        }
    }

    #[test]
    fn downward_camera_hits_plane() {
        // Camera above the slab top looking down -z.
        let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let cam = CameraModel::new(100.0, 100.0, 2.0, 2.0, 4, 4, rot, Vector3::new(0.0, 0.0, 10.0)).unwrap();
        let r = render_depth_maps(&plane_scene(5.0), &[cam], 1, 0.0, 0).unwrap();
        let d = &r.depths[0];
        let v = r.cameras[0].ray_direction(2, 2).unwrap();
        assert!((d.at(2, 2) - 5.0 / -v.z).abs() < 1e-12);
        let hit = r.cameras[0].origin() + v * d.at(2, 2);
        assert!((hit.z - 5.0).abs() < 1e-12);
    }

    #[test]
    fn sky_pixel_is_sentinel() {
        let cam = level_camera(0.0, Vector3::zeros(), 8, 8, 60.0).unwrap();
        let r = render_depth_maps(&plane_scene(-1.5), &[cam], 1, 0.0, 0).unwrap();
        assert!(r.depths[0].at(0, 4).is_infinite());
        assert_eq!(r.classes[0][4], NO_CLASS);
        assert!(r.depths[0].at(7, 4).is_finite());
    }

    #[test]
    fn deterministic_generation() {
        let c = SceneConfig::default();
        let a = serde_json::to_string(&generate_scene(9, &c).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_scene(9, &c).unwrap()).unwrap();
        assert_eq!(a, b);
        let none = generate_scene(9, &SceneConfig { num_boxes: 0, ..c }).unwrap();
        assert!(none.boxes.is_empty() && none.ground.is_some());
    }

    #[test]
    fn zero_volume_extents_rejected() {
        let c = SceneConfig {
            extents: Aabb::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 1.0)),
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, &c), Err(Error::Config(_))));
    }

    #[test]
    fn aligned_box_volume() {
        let scene = SceneSpec {
            seed: 0,
            num_classes: 3,
            extents: Aabb::new(Vector3::repeat(-4.0), Vector3::repeat(4.0)),
            ground: None,
            boxes: vec![SceneBox {
                center: Vector3::new(1.0, 1.0, 1.0),
                half_extents: Vector3::repeat(1.0),
                yaw: 0.0,
                class: 2,
            }],
        };
        let geo = GridGeometry::new([16, 16, 16], Vector3::repeat(-4.0), 0.5).unwrap();
        let g = rasterize_gt_grid(&scene, &geo).unwrap();
        assert_eq!(g.occupied_count(), 64);
        let empty = rasterize_gt_grid(&SceneSpec { boxes: vec![], ..scene }, &geo).unwrap();
        assert_eq!(empty.occupied_count(), 0);
    }

    #[test]
    fn surface_point_inside_box() {
        let b = SceneBox {
            center: Vector3::zeros(),
            half_extents: Vector3::new(1.0, 2.0, 3.0),
            yaw: 0.3,
            class: 0,
        };
        let p = b.center + b.to_world_dir(&Vector3::new(0.1, 0.0, 0.0));
        let q = b.closest_surface_point(&p);
        assert!(((q - p).norm() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn noise_is_counter_based() {
        assert_eq!(pixel_noise(3, 1, 2, 3), pixel_noise(3, 1, 2, 3));
        assert_ne!(pixel_noise(3, 1, 2, 3), pixel_noise(3, 1, 3, 2));
    }
}
