//! Evaluation metrics: IoU / mIoU, RayIoU and initialization quality.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edt::NearestOccupied;
use crate::error::{Error, Result};
use crate::model::{CameraModel, GaussianSet, OccupancyGrid};
use crate::traversal::GridRay;

pub const DEFAULT_RAY_STRIDE: usize = 4;
pub const DEFAULT_RAY_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub iou: f64,
    pub miou: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Binary occupied-vs-empty IoU plus per-class IoU over semantic classes.
///
/// Voxels labeled `unknown` in either grid are excluded. mIoU averages the
/// classes present in `gt`.
pub fn iou_miou(
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
    empty_id: u8,
    unknown_id: Option<u8>,
) -> Result<IouReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "pred has {} voxels, gt has {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fnn = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if unknown_id.is_some_and(|u| p == u || g == u) {
            continue;
        }
        let (po, go) = (p != empty_id, g != empty_id);
        inter += (po && go) as u64;
        union += (po || go) as u64;
        let (p, g) = (p as usize, g as usize);
        if p == g {
            if p < num_classes {
                tp[p] += 1;
            }
        } else {
            if p < num_classes {
                fp[p] += 1;
            }
            if g < num_classes {
                fnn[g] += 1;
            }
        }
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let present = tp[c] + fnn[c] > 0;
            present.then(|| tp[c] as f64 / (tp[c] + fp[c] + fnn[c]) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        if fp.iter().all(|&f| f == 0) {
            1.0
        } else {
            0.0
        }
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouReport {
        iou,
        miou,
        per_class,
    })
}

pub fn iou_miou_grids(pred: &OccupancyGrid, gt: &OccupancyGrid, unknown_id: Option<u8>) -> Result<IouReport> {
    if pred.geometry != gt.geometry || pred.num_classes != gt.num_classes {
        return Err(Error::Shape("pred and gt grids differ in geometry or classes".into()));
    }
    iou_miou(&pred.labels, &gt.labels, gt.num_classes, gt.empty_id(), unknown_id)
}

/// First non-empty voxel along a ray: `(distance to voxel entry, label)`.
pub fn first_hit(
    grid: &OccupancyGrid,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    unknown_id: Option<u8>,
) -> Option<(f64, u8)> {
    let empty = grid.empty_id();
    GridRay::new(&grid.geometry, origin, dir)?.find_map(|s| {
        let l = grid.label_at(s.voxel[0], s.voxel[1], s.voxel[2]);
        (l != empty && Some(l) != unknown_id).then_some((s.t_enter, l))
    })
}

/// Camera rays through every `stride`-th pixel center, row and column.
pub fn strided_rays(cams: &[CameraModel], stride: usize) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let stride = stride.max(1);
    let mut rays = Vec::new();
    for cam in cams {
        for r in (0..cam.height).step_by(stride) {
            for c in (0..cam.width).step_by(stride) {
                rays.push((cam.origin(), cam.ray_through(r as f64 + 0.5, c as f64 + 0.5)));
            }
        }
    }
    rays
}

/// Per-ray first hits in `pred` and `gt`.
pub type RayHits = (Option<(f64, u8)>, Option<(f64, u8)>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayIouReport {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub mean: f64,
}

/// Class-averaged ray-level IoU of first-hit class and distance, per threshold.
///
/// A ray is a true positive for class `c` at threshold `τ` when both grids
/// hit class `c` within `τ` meters of each other. Otherwise the predicted
/// hit (if any) counts as a false positive for its class and the gt hit (if
/// any) as a false negative for its class. Classes with at least one gt hit
/// are averaged.
pub fn ray_iou_from_hits(hits: &[RayHits], num_classes: usize, thresholds: &[f64]) -> Result<RayIouReport> {
    let mut gt_classes = vec![false; num_classes];
    for (_, g) in hits {
        if let Some((_, c)) = g {
            gt_classes[*c as usize] = true;
        }
    }
    if !gt_classes.iter().any(|&b| b) {
        return Err(Error::UndefinedMetric("no ray hits ground-truth occupancy".into()));
    }
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let mut tp = vec![0u64; num_classes];
        let mut fp = vec![0u64; num_classes];
        let mut fnn = vec![0u64; num_classes];
        for (p, g) in hits {
            match (p, g) {
                (Some((dp, cp)), Some((dg, cg))) if cp == cg && (dp - dg).abs() <= tau => {
                    tp[*cg as usize] += 1;
                }
                _ => {
                    if let Some((_, cp)) = p {
                        fp[*cp as usize] += 1;
                    }
                    if let Some((_, cg)) = g {
                        fnn[*cg as usize] += 1;
                    }
                }
            }
        }
        let ious: Vec<f64> = (0..num_classes)
            .filter(|&c| gt_classes[c])
            .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fnn[c]) as f64)
            .collect();
        per_threshold.push(ious.iter().sum::<f64>() / ious.len() as f64);
    }
    let mean = per_threshold.iter().sum::<f64>() / per_threshold.len().max(1) as f64;
    Ok(RayIouReport {
        thresholds: thresholds.to_vec(),
        per_threshold,
        mean,
    })
}

pub fn ray_iou(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    cams: &[CameraModel],
    stride: usize,
    thresholds: &[f64],
    unknown_id: Option<u8>,
) -> Result<RayIouReport> {
    if pred.geometry != gt.geometry || pred.num_classes != gt.num_classes {
        return Err(Error::Shape("pred and gt grids differ in geometry or classes".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("at least one RayIoU threshold is required".into()));
    }
    let rays = strided_rays(cams, stride);
    let hits: Vec<Option<RayHits>> = rays
        .par_iter()
        .map(|(o, d)| {
            crate::traversal::clip_to_grid(&gt.geometry, o, d)?;
            Some((first_hit(pred, o, d, unknown_id), first_hit(gt, o, d, unknown_id)))
        })
        .collect();
    let hits: Vec<RayHits> = hits.into_iter().flatten().collect();
    if hits.is_empty() {
        return Err(Error::UndefinedMetric("no camera ray intersects the grid".into()));
    }
    ray_iou_from_hits(&hits, gt.num_classes, thresholds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitQuality {
    /// Percentage of Gaussians inside occupied gt voxels.
    pub perc: f64,
    /// Mean distance (m) to the nearest occupied voxel center.
    pub dist: f64,
}

pub fn init_quality(gs: &GaussianSet, gt: &OccupancyGrid, unknown_id: Option<u8>) -> Result<InitQuality> {
    if gs.is_empty() {
        return Err(Error::UndefinedMetric("no Gaussians to score".into()));
    }
    let field = NearestOccupied::new(gt, unknown_id);
    if field.occupied_count() == 0 {
        return Err(Error::UndefinedMetric("ground truth has no occupied voxels".into()));
    }
    let empty = gt.empty_id();
    let per: Vec<(bool, f64)> = gs
        .primitives()
        .par_iter()
        .map(|g| {
            let inside = gt.geometry.voxel_of(&g.mean).is_some_and(|[x, y, z]| {
                let l = gt.label_at(x, y, z);
                l != empty && Some(l) != unknown_id
            });
            (inside, field.distance(&g.mean))
        })
        .collect();
    let hits = per.iter().filter(|p| p.0).count();
    let dist_sum: f64 = per.iter().map(|p| p.1).sum();
    Ok(InitQuality {
        perc: 100.0 * hits as f64 / gs.len() as f64,
        dist: dist_sum / gs.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub rayiou: f64,
    pub rayiou_per_threshold: BTreeMap<String, f64>,
    pub perc: f64,
    pub dist: f64,
}

impl MetricReport {
    pub fn new(iou: IouReport, ray: RayIouReport, quality: InitQuality) -> Self {
        let rayiou_per_threshold = ray
            .thresholds
            .iter()
            .zip(&ray.per_threshold)
            .map(|(t, v)| (format!("{t}"), *v))
            .collect();
        Self {
            iou: iou.iou,
            miou: iou.miou,
            per_class_iou: iou.per_class,
            rayiou: ray.mean,
            rayiou_per_threshold,
            perc: quality.perc,
            dist: quality.dist,
        }
    }
}
