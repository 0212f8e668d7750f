//! Pixel-aligned Gaussian initialization from per-view depth maps.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CameraModel, DepthMap, GaussianPrimitive, GaussianSet, Provenance, Quat};

/// Non-positional attributes of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Attributes {
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    pub semantics: Vec<f64>,
}

/// Supplies per-pixel Gaussian attributes in place of a learned head.
pub trait AttributeProvider: Sync {
    fn num_classes(&self) -> usize;
    fn attributes(&self, view: usize, row: usize, col: usize) -> Attributes;
}

/// Same attributes for every pixel.
#[derive(Debug, Clone)]
pub struct ConstantAttributes(pub Attributes);

impl AttributeProvider for ConstantAttributes {
    fn num_classes(&self) -> usize {
        self.0.semantics.len()
    }

    fn attributes(&self, _view: usize, _row: usize, _col: usize) -> Attributes {
        self.0.clone()
    }
}

/// `μ = o + d·v` for the center of pixel `(row, col)`, with `d` the along-ray depth.
pub fn unproject_pixel(cam: &CameraModel, row: usize, col: usize, depth: f64) -> Result<Vector3<f64>> {
    if !(depth >= 0.0 && depth.is_finite()) {
        return Err(Error::Domain(format!("depth must be finite and >= 0, got {depth}")));
    }
    let v = cam.ray_direction(row, col)?;
    Ok(cam.origin() + v * depth)
}

/// One Gaussian per valid depth pixel, in (view, row, col) raster order.
pub fn init_gaussians(
    cams: &[CameraModel],
    depths: &[DepthMap],
    attrs: &dyn AttributeProvider,
) -> Result<GaussianSet> {
    if cams.len() != depths.len() {
        return Err(Error::Shape(format!(
            "{} cameras but {} depth maps",
            cams.len(),
            depths.len()
        )));
    }
    for (i, (c, d)) in cams.iter().zip(depths).enumerate() {
        if c.height != d.height || c.width != d.width {
            return Err(Error::Shape(format!(
                "view {i}: camera is {}x{} but depth map is {}x{}",
                c.height, c.width, d.height, d.width
            )));
        }
    }

    let mut slots = Vec::new();
    for (view, d) in depths.iter().enumerate() {
        for idx in 0..d.depth.len() {
            if d.is_valid(idx) {
                slots.push((view, idx / d.width, idx % d.width));
            }
        }
    }

    let num_classes = attrs.num_classes();
    let built: Vec<GaussianPrimitive> = slots
        .par_iter()
        .map(|&(view, row, col)| {
            let mean = unproject_pixel(&cams[view], row, col, depths[view].at(row, col))?;
            let a = attrs.attributes(view, row, col);
            if a.semantics.len() != num_classes {
                return Err(Error::Shape(format!(
                    "provider returned {} logits, expected {num_classes}",
                    a.semantics.len()
                )));
            }
            GaussianPrimitive::new(mean, a.scale, a.rotation, a.opacity, a.semantics)
        })
        .collect::<Result<_>>()?;

    let provenance = slots
        .iter()
        .map(|&(v, r, c)| Provenance::new(v as u32, r as u32, c as u32))
        .collect();
    GaussianSet::new(num_classes, built, provenance)
}
