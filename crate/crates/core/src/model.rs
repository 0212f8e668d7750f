//! Shared domain types: Gaussian primitives, cameras, grids and depth maps.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every per-axis scale (meters).
pub const SCALE_MIN: f64 = 1e-3;

/// Allowed deviation from unit norm for rotations.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Rotation quaternion stored in (w, x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }
}

/// Covariance matrix together with the scale-floor diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance {
    pub matrix: Matrix3<f64>,
    /// Set when any scale component was raised to [`SCALE_MIN`].
    pub scale_clamped: bool,
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(scale)`.
pub fn covariance_of(scale: &Vector3<f64>, rotation: &Quat) -> Result<Covariance> {
    if !rotation.is_unit() {
        return Err(Error::InvalidRotation {
            norm: rotation.norm(),
        });
    }
    let (scale, scale_clamped) = clamp_scale(scale);
    let r = rotation.to_rotation_matrix();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let m = r * s2 * r.transpose();
    // exact symmetry
    let matrix = (m + m.transpose()) * 0.5;
    Ok(Covariance {
        matrix,
        scale_clamped,
    })
}

pub(crate) fn clamp_scale(scale: &Vector3<f64>) -> (Vector3<f64>, bool) {
    let mut clamped = false;
    let s = scale.map(|v| {
        if v < SCALE_MIN || v.is_nan() {
            clamped = true;
            SCALE_MIN
        } else {
            v
        }
    });
    (s, clamped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    /// Per-axis standard deviation in meters.
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    /// Raw semantic logits, one per class.
    pub semantics: Vec<f64>,
}

impl GaussianPrimitive {
    /// Builds a primitive, clamping scales to [`SCALE_MIN`].
    pub fn new(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Quat,
        opacity: f64,
        semantics: Vec<f64>,
    ) -> Result<Self> {
        let (scale, _) = clamp_scale(&scale);
        let g = Self {
            mean,
            scale,
            rotation,
            opacity,
            semantics,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.is_unit() {
            return Err(Error::InvalidRotation {
                norm: self.rotation.norm(),
            });
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Domain(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        if self.scale.iter().any(|&s| !(s >= SCALE_MIN) || !s.is_finite()) {
            return Err(Error::Domain(format!(
                "scale {:?} below floor {SCALE_MIN}",
                self.scale.as_slice()
            )));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite mean".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Covariance> {
        covariance_of(&self.scale, &self.rotation)
    }
}

/// Source pixel of a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub view: u32,
    pub row: u32,
    pub col: u32,
}

impl Provenance {
    pub fn new(view: u32, row: u32, col: u32) -> Self {
        Self { view, row, col }
    }
}

/// Ordered Gaussian primitives with per-primitive provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianSetRepr", into = "GaussianSetRepr")]
pub struct GaussianSet {
    num_classes: usize,
    primitives: Vec<GaussianPrimitive>,
    provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct GaussianSetRepr {
    num_classes: usize,
    primitives: Vec<GaussianPrimitive>,
    provenance: Vec<Provenance>,
}

impl TryFrom<GaussianSetRepr> for GaussianSet {
    type Error = Error;
    fn try_from(r: GaussianSetRepr) -> Result<Self> {
        GaussianSet::new(r.num_classes, r.primitives, r.provenance)
    }
}

impl From<GaussianSet> for GaussianSetRepr {
    fn from(s: GaussianSet) -> Self {
        Self {
            num_classes: s.num_classes,
            primitives: s.primitives,
            provenance: s.provenance,
        }
    }
}

impl GaussianSet {
    pub fn new(
        num_classes: usize,
        primitives: Vec<GaussianPrimitive>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if primitives.len() != provenance.len() {
            return Err(Error::Shape(format!(
                "{} primitives but {} provenance entries",
                primitives.len(),
                provenance.len()
            )));
        }
        if let Some(g) = primitives.iter().find(|g| g.semantics.len() != num_classes) {
            return Err(Error::Shape(format!(
                "primitive has {} logits, expected {num_classes}",
                g.semantics.len()
            )));
        }
        Ok(Self {
            num_classes,
            primitives,
            provenance,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            num_classes,
            primitives: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GaussianPrimitive, &Provenance)> {
        self.primitives.iter().zip(self.provenance.iter())
    }

    pub fn into_parts(self) -> (usize, Vec<GaussianPrimitive>, Vec<Provenance>) {
        (self.num_classes, self.primitives, self.provenance)
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            num_classes: self.num_classes,
            primitives: indices.iter().map(|&i| self.primitives[i].clone()).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    pub fn means(&self) -> Vec<Vector3<f64>> {
        self.primitives.iter().map(|g| g.mean).collect()
    }
}

/// Pinhole camera with a camera-to-world pose.
///
/// Camera frame: +x right, +y down, +z forward. Pixel `(row, col)` has its
/// center at image coordinates `(u, v) = (col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
    /// Camera origin in world coordinates.
    pub translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        height: usize,
        width: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            height,
            width,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        let ortho = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if ortho.amax() > UNIT_TOLERANCE || (self.rotation.determinant() - 1.0).abs() > 1e-5 {
            return Err(Error::Config("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.translation
    }

    /// Unit world-space direction through the center of pixel `(row, col)`.
    pub fn ray_direction(&self, row: usize, col: usize) -> Result<Vector3<f64>> {
        if row >= self.height || col >= self.width {
            return Err(Error::PixelOutOfBounds {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok(self.ray_through(row as f64 + 0.5, col as f64 + 0.5))
    }

    /// Unit world-space direction through continuous image coordinates.
    pub fn ray_through(&self, v: f64, u: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation * d_cam).normalize()
    }

    /// Projects a world point to continuous `(v, u)` = (row, col) image
    /// coordinates; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let pc = self.rotation.transpose() * (p - self.translation);
        if pc.z <= 0.0 {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Some((v, u))
    }

    /// Camera for an image downsampled by integer ratio `r`.
    pub fn downsampled(&self, r: usize) -> Result<Self> {
        if r == 0 || self.height / r == 0 || self.width / r == 0 {
            return Err(Error::Config(format!("invalid downsample ratio {r}")));
        }
        let rf = r as f64;
        Ok(Self {
            fx: self.fx / rf,
            fy: self.fy / rf,
            cx: self.cx / rf,
            cy: self.cy / rf,
            height: self.height / r,
            width: self.width / r,
            rotation: self.rotation,
            translation: self.translation,
        })
    }
}

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i] < self.max[i] && self.min[i].is_finite() && self.max[i].is_finite())
    }

    /// Half-open containment `[min, max)`.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] < self.max[i])
    }
}

/// Dense voxel lattice: dims, min corner and cubic voxel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], origin: Vector3<f64>, voxel_size: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("grid dims must be positive: {dims:?}")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Config(format!("voxel size must be positive: {voxel_size}")));
        }
        Ok(Self {
            dims,
            origin,
            voxel_size,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index, x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        let h = self.voxel_size;
        self.origin + Vector3::new((x as f64 + 0.5) * h, (y as f64 + 0.5) * h, (z as f64 + 0.5) * h)
    }

    /// Voxel containing `p` (half-open cells), if inside the grid.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for i in 0..3 {
            let f = ((p[i] - self.origin[i]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[i] as f64) {
                return None;
            }
            out[i] = f as usize;
        }
        Some(out)
    }

    pub fn extents(&self) -> Aabb {
        let size = Vector3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.voxel_size;
        Aabb::new(self.origin, self.origin + size)
    }
}

/// Dense labeled voxel volume. Labels `0..C` are classes, `C` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(geometry: GridGeometry, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if num_classes > 254 {
            return Err(Error::Config(format!("too many classes: {num_classes}")));
        }
        if labels.len() != geometry.num_voxels() {
            return Err(Error::Shape(format!(
                "{} labels for {} voxels",
                labels.len(),
                geometry.num_voxels()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > num_classes) {
            return Err(Error::Domain(format!(
                "label {l} exceeds empty id {num_classes}"
            )));
        }
        Ok(Self {
            geometry,
            num_classes,
            labels,
        })
    }

    pub fn empty(geometry: GridGeometry, num_classes: usize) -> Self {
        Self {
            geometry,
            num_classes,
            labels: vec![num_classes as u8; geometry.num_voxels()],
        }
    }

    pub fn empty_id(&self) -> u8 {
        self.num_classes as u8
    }

    pub fn label_at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geometry.index(x, y, z)]
    }

    pub fn occupied_count(&self) -> usize {
        let e = self.empty_id();
        self.labels.iter().filter(|&&l| l != e).count()
    }
}

/// Bounded sampling lattice used to voxelize and key Gaussian means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    extents: Aabb,
    grid_size: f64,
    lo: [i64; 3],
    dims: [u64; 3],
}

impl VoxelGridSpec {
    pub fn new(extents: Aabb, grid_size: f64) -> Result<Self> {
        if !(grid_size > 0.0 && grid_size.is_finite()) {
            return Err(Error::Config(format!("grid size must be positive: {grid_size}")));
        }
        if !extents.is_valid() {
            return Err(Error::Config("extents must satisfy min < max on all axes".into()));
        }
        let mut lo = [0i64; 3];
        let mut dims = [0u64; 3];
        for i in 0..3 {
            let l = (extents.min[i] / grid_size).floor() as i64;
            let h = (extents.max[i] / grid_size).ceil() as i64 - 1;
            lo[i] = l;
            dims[i] = (h - l + 1).max(1) as u64;
        }
        if dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::Config("sampling grid too large for 64-bit keys".into()));
        }
        Ok(Self {
            extents,
            grid_size,
            lo,
            dims,
        })
    }

    pub fn extents(&self) -> &Aabb {
        &self.extents
    }

    pub fn grid_size(&self) -> f64 {
        self.grid_size
    }

    /// Smallest integer coordinate per axis.
    pub fn lo(&self) -> [i64; 3] {
        self.lo
    }

    pub fn dims(&self) -> [u64; 3] {
        self.dims
    }

    pub fn num_cells(&self) -> u64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Sentinel depth for pixels without a return.
pub const NO_RETURN: f64 = f64::INFINITY;

/// Per-pixel along-ray depth and its uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub uncertainty: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, uncertainty: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if depth.len() != n || uncertainty.len() != n {
            return Err(Error::Shape(format!(
                "depth map {height}x{width} needs {n} values, got {} depths and {} uncertainties",
                depth.len(),
                uncertainty.len()
            )));
        }
        if let Some(d) = depth.iter().find(|&&d| !(d >= 0.0)) {
            return Err(Error::Domain(format!("invalid depth {d}")));
        }
        if let Some(u) = uncertainty.iter().find(|&&u| !(u > 0.0 && u.is_finite())) {
            return Err(Error::Domain(format!("uncertainty must be positive, got {u}")));
        }
        Ok(Self {
            height,
            width,
            depth,
            uncertainty,
        })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.depth[self.index(row, col)]
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.depth[idx].is_finite()
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}
