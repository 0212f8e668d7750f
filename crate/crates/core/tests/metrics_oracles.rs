mod common;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use splatocc::metrics::{init_quality, iou_miou, ray_iou, strided_rays};
use splatocc::model::{CameraModel, GaussianPrimitive, GaussianSet, GridGeometry, OccupancyGrid, Provenance, Quat};
use splatocc::Error;

const C: usize = 3;

fn boxes_grid(boxes: &[([usize; 3], [usize; 3], u8)]) -> OccupancyGrid {
    let geo = GridGeometry::new([8, 8, 8], Vector3::zeros(), 1.0).unwrap();
    let mut g = OccupancyGrid::empty(geo, C);
    for &(lo, hi, class) in boxes {
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    g.labels[geo.index(x, y, z)] = class;
                }
            }
        }
    }
    g
}

fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> CameraModel {
    let fwd = (target - eye).normalize();
    let right = fwd.cross(&Vector3::z()).normalize();
    let down = fwd.cross(&right);
    let r = Matrix3::from_columns(&[right, down, fwd]);
    CameraModel::new(9.0, 9.0, 8.0, 6.0, 12, 16, r, eye).unwrap()
}

/// First occupied voxel by testing the ray against every voxel's slabs.
fn enumerate_hit(grid: &OccupancyGrid, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, u8)> {
    let geo = &grid.geometry;
    let mut best: Option<(f64, u8)> = None;
    for i in 0..geo.num_voxels() {
        let label = grid.labels[i];
        if label == grid.empty_id() {
            continue;
        }
        let [x, y, z] = geo.coords(i);
        let lo = Vector3::new(x as f64, y as f64, z as f64);
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            let (a, b) = ((lo[k] - o[k]) / d[k], (lo[k] + 1.0 - o[k]) / d[k]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t0 < t1 && best.is_none_or(|(bt, _)| t0 < bt) {
            best = Some((t0, label));
        }
    }
    best
}

fn enumerate_ray_iou(pred: &OccupancyGrid, gt: &OccupancyGrid, cam: &CameraModel, stride: usize, taus: &[f64]) -> Vec<f64> {
    let hits: Vec<_> = strided_rays(std::slice::from_ref(cam), stride)
        .iter()
        .map(|(o, d)| (enumerate_hit(pred, o, d), enumerate_hit(gt, o, d)))
        .collect();
    taus.iter()
        .map(|&tau| {
            let mut ious = Vec::new();
            for c in 0..C as u8 {
                if !hits.iter().any(|(_, g)| g.is_some_and(|(_, k)| k == c)) {
                    continue;
                }
                let (mut tp, mut fp, mut fnn) = (0, 0, 0);
                for (p, g) in &hits {
                    let is_tp = matches!((p, g), (Some((dp, kp)), Some((dg, kg))) if *kp == c && *kg == c && (dp - dg).abs() <= tau);
                    if is_tp {
                        tp += 1;
                        continue;
                    }
                    fp += p.is_some_and(|(_, k)| k == c) as usize;
                    fnn += g.is_some_and(|(_, k)| k == c) as usize;
                }
                ious.push(tp as f64 / (tp + fp + fnn) as f64);
            }
            ious.iter().sum::<f64>() / ious.len() as f64
        })
        .collect()
}

#[test]
fn ray_iou_matches_enumerated_oracle() {
    let gt = boxes_grid(&[
        ([1, 1, 0], [3, 3, 2], 0),
        ([5, 2, 0], [7, 4, 3], 1),
        ([2, 5, 1], [4, 7, 4], 2),
        ([4, 4, 4], [6, 6, 6], 1),
    ]);
    let pred = boxes_grid(&[
        ([1, 1, 0], [3, 3, 2], 0),
        ([6, 2, 0], [8, 4, 3], 1),
        ([2, 5, 1], [4, 7, 4], 0),
        ([4, 3, 4], [6, 5, 6], 1),
    ]);
    let cam = look_at(Vector3::new(-3.13, -2.71, 9.37), Vector3::new(4.07, 3.93, 2.11));
    let taus = [0.5, 1.0, 2.0, 4.0];
    let r = ray_iou(&pred, &gt, std::slice::from_ref(&cam), 1, &taus, None).unwrap();
    let oracle = enumerate_ray_iou(&pred, &gt, &cam, 1, &taus);
    assert_eq!(r.per_threshold, oracle);
    assert!(r.per_threshold.windows(2).all(|w| w[0] <= w[1]));
    assert!(r.per_threshold[0] < 1.0);

    let same = ray_iou(&gt, &gt, std::slice::from_ref(&cam), 1, &taus, None).unwrap();
    assert!(same.per_threshold.iter().all(|&v| v == 1.0));
    let empty = OccupancyGrid::empty(gt.geometry, C);
    let none = ray_iou(&empty, &gt, std::slice::from_ref(&cam), 1, &taus, None).unwrap();
    assert!(none.per_threshold.iter().all(|&v| v == 0.0));
}

#[test]
fn ray_iou_without_intersections_is_undefined() {
    let gt = boxes_grid(&[([1, 1, 1], [2, 2, 2], 0)]);
    let away = look_at(Vector3::new(-5.0, -5.0, 3.0), Vector3::new(-10.0, -10.0, 3.0));
    assert!(matches!(
        ray_iou(&gt, &gt, &[away], 1, &[1.0], None),
        Err(Error::UndefinedMetric(_))
    ));
}

#[test]
fn binary_iou_symmetric_under_swap() {
    let mut rng = common::rng(6);
    let a: Vec<u8> = (0..512).map(|_| rng.random_range(0..=C as u8)).collect();
    let b: Vec<u8> = (0..512).map(|_| rng.random_range(0..=C as u8)).collect();
    let ab = iou_miou(&a, &b, C, C as u8, None).unwrap();
    let ba = iou_miou(&b, &a, C, C as u8, None).unwrap();
    assert_eq!(ab.iou, ba.iou);
}

fn point_set(points: &[Vector3<f64>]) -> GaussianSet {
    let prims = points
        .iter()
        .map(|&m| GaussianPrimitive::new(m, Vector3::repeat(0.1), Quat::IDENTITY, 0.5, vec![0.0; C]).unwrap())
        .collect();
    let prov = (0..points.len() as u32).map(|i| Provenance::new(0, 0, i)).collect();
    GaussianSet::new(C, prims, prov).unwrap()
}

#[test]
fn init_quality_matches_all_pairs_search() {
    let mut rng = common::rng(19);
    let geo = GridGeometry::new([32, 32, 32], Vector3::new(-8.0, -8.0, -8.0), 0.5).unwrap();
    let labels: Vec<u8> = (0..geo.num_voxels())
        .map(|_| if rng.random_bool(0.02) { rng.random_range(0..C as u8) } else { C as u8 })
        .collect();
    let gt = OccupancyGrid::new(geo, C, labels).unwrap();
    let centers: Vec<Vector3<f64>> = (0..geo.num_voxels())
        .filter(|&i| gt.labels[i] != gt.empty_id())
        .map(|i| {
            let [x, y, z] = geo.coords(i);
            geo.voxel_center(x, y, z)
        })
        .collect();
    let points: Vec<Vector3<f64>> = (0..1000)
        .map(|_| Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)))
        .collect();
    let q = init_quality(&point_set(&points), &gt, None).unwrap();

    let mut inside = 0;
    let mut dist = 0.0;
    for p in &points {
        let u = (p - geo.origin) / geo.voxel_size;
        let idx = u.map(f64::floor);
        if (0..3).all(|k| idx[k] >= 0.0 && idx[k] < 32.0) {
            let i = geo.index(idx.x as usize, idx.y as usize, idx.z as usize);
            inside += (gt.labels[i] != gt.empty_id()) as usize;
        }
        dist += centers.iter().map(|c| (c - p).norm()).fold(f64::INFINITY, f64::min);
    }
    assert_eq!(q.perc, 100.0 * inside as f64 / 1000.0);
    assert!((q.dist - dist / 1000.0).abs() <= 1e-6);
}

#[test]
fn init_quality_simple_placements() {
    let geo = GridGeometry::new([4, 4, 4], Vector3::zeros(), 0.5).unwrap();
    let mut gt = OccupancyGrid::empty(geo, C);
    gt.labels[geo.index(1, 2, 3)] = 1;
    gt.labels[geo.index(0, 0, 0)] = 2;
    let at_centers = point_set(&[geo.voxel_center(1, 2, 3), geo.voxel_center(0, 0, 0)]);
    let q = init_quality(&at_centers, &gt, None).unwrap();
    assert_eq!((q.perc, q.dist), (100.0, 0.0));

    let mut single = OccupancyGrid::empty(geo, C);
    single.labels[geo.index(1, 1, 1)] = 0;
    let shifted = point_set(&[geo.voxel_center(1, 1, 1) + Vector3::new(0.0, 0.5, 0.0)]);
    let q = init_quality(&shifted, &single, None).unwrap();
    assert!((q.dist - 0.5).abs() < 1e-12);
    assert_eq!(q.perc, 0.0);
}
