//! Probabilistic superposition of Gaussians into a semantic occupancy grid.
//!
//! For a point `x`:
//! - `α(x) = 1 − Π (1 − a_i φ_i(x))`, accumulated as `Σ log1p(−a_i φ_i)`;
//! - `e(x) = Σ p(x|G_i) a_i softmax(c_i) / Σ p(x|G_j) a_j`;
//! - `ô(x) = [1 − α; α·e]`.
//!
//! `φ` is the unnormalized Gaussian kernel, `p` the normalized density. Both
//! are zero beyond a Mahalanobis distance of [`MAHALANOBIS_CUTOFF`].

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{GaussianPrimitive, GaussianSet, GridGeometry, OccupancyGrid};

pub const MAHALANOBIS_CUTOFF: f64 = 3.0;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Per-Gaussian quantities precomputed once per render.
#[derive(Debug, Clone)]
pub struct PreparedGaussian {
    mean: Vector3<f64>,
    /// `diag(1/s) Rᵀ`, so that `|whiten·d|² = dᵀ Σ⁻¹ d`.
    whiten: Matrix3<f64>,
    opacity: f64,
    /// `(2π)^{3/2} |Σ|^{1/2}`
    density_norm: f64,
    class_probs: Vec<f64>,
    /// Half-extent of the cutoff ellipsoid's bounding box.
    reach: Vector3<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl PreparedGaussian {
    pub fn new(g: &GaussianPrimitive) -> Result<Self> {
        let cov = g.covariance()?;
        let s = g.scale;
        if s.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("singular covariance".into()));
        }
        let r = g.rotation.to_rotation_matrix();
        let whiten = Matrix3::from_diagonal(&s.map(|v| 1.0 / v)) * r.transpose();
        let reach = Vector3::new(
            cov.matrix[(0, 0)].sqrt(),
            cov.matrix[(1, 1)].sqrt(),
            cov.matrix[(2, 2)].sqrt(),
        ) * MAHALANOBIS_CUTOFF;
        Ok(Self {
            mean: g.mean,
            whiten,
            opacity: g.opacity,
            density_norm: (2.0 * PI).powf(1.5) * s.x * s.y * s.z,
            class_probs: softmax(&g.semantics),
            reach,
        })
    }

    #[inline]
    pub fn mahalanobis_sq(&self, x: &Vector3<f64>) -> f64 {
        (self.whiten * (x - self.mean)).norm_squared()
    }

    /// Kernel value, zero beyond the cutoff.
    #[inline]
    pub fn phi(&self, x: &Vector3<f64>) -> f64 {
        let m2 = self.mahalanobis_sq(x);
        if m2 > MAHALANOBIS_CUTOFF * MAHALANOBIS_CUTOFF {
            0.0
        } else {
            (-0.5 * m2).exp()
        }
    }
}

/// `exp(−½ dᵀΣ⁻¹d)`, or 0 beyond a Mahalanobis distance of 3.
pub fn kernel_phi(x: &Vector3<f64>, g: &GaussianPrimitive) -> Result<f64> {
    Ok(PreparedGaussian::new(g)?.phi(x))
}

fn prepare_all(gs: &GaussianSet) -> Result<Vec<PreparedGaussian>> {
    gs.primitives().par_iter().map(PreparedGaussian::new).collect()
}

/// Occupancy and semantics at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub alpha: f64,
    /// `exp(Σ log1p(−aφ))`, i.e. `1 − α` without cancellation.
    pub empty: f64,
    pub semantics: Vec<f64>,
    /// Set when no Gaussian had positive posterior weight; `semantics` is uniform.
    pub uniform_fallback: bool,
}

fn evaluate_point<'a>(
    x: &Vector3<f64>,
    candidates: impl Iterator<Item = &'a PreparedGaussian>,
    num_classes: usize,
) -> PointEstimate {
    let mut log_empty = CompensatedSum::default();
    let mut denom = CompensatedSum::default();
    let mut numer = vec![CompensatedSum::default(); num_classes];
    for g in candidates {
        let phi = g.phi(x);
        if phi == 0.0 {
            continue;
        }
        log_empty.add((-g.opacity * phi).ln_1p());
        let w = phi / g.density_norm * g.opacity;
        if w > 0.0 {
            denom.add(w);
            for (n, p) in numer.iter_mut().zip(&g.class_probs) {
                n.add(w * p);
            }
        }
    }
    let l = log_empty.value();
    let empty = l.exp();
    let alpha = -l.exp_m1();
    let d = denom.value();
    let (semantics, uniform_fallback) = if d > 0.0 && num_classes > 0 {
        (numer.iter().map(|n| n.value() / d).collect(), false)
    } else {
        (vec![1.0 / num_classes.max(1) as f64; num_classes], true)
    };
    PointEstimate {
        alpha,
        empty,
        semantics,
        uniform_fallback,
    }
}

pub fn occupancy_alpha(x: &Vector3<f64>, gs: &GaussianSet) -> Result<f64> {
    let prepared = prepare_all(gs)?;
    Ok(evaluate_point(x, prepared.iter(), gs.num_classes()).alpha)
}

/// Expected semantic distribution and whether the uniform fallback was used.
pub fn expected_semantics(x: &Vector3<f64>, gs: &GaussianSet) -> Result<(Vec<f64>, bool)> {
    let prepared = prepare_all(gs)?;
    let est = evaluate_point(x, prepared.iter(), gs.num_classes());
    Ok((est.semantics, est.uniform_fallback))
}

/// Per-voxel `(C+1)`-vectors `[empty; α·e]` and argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOccupancyField {
    pub geometry: GridGeometry,
    pub num_classes: usize,
    /// Flat, `num_classes + 1` channels per voxel; channel 0 is empty.
    pub probs: Vec<f64>,
    /// Occupancy labels, `num_classes` meaning empty.
    pub labels: Vec<u8>,
    /// Voxels where `e` fell back to uniform (always with `α = 0`).
    pub fallback_voxels: usize,
}

impl SemanticOccupancyField {
    pub fn channels(&self) -> usize {
        self.num_classes + 1
    }

    pub fn voxel_probs(&self, idx: usize) -> &[f64] {
        let c = self.channels();
        &self.probs[idx * c..(idx + 1) * c]
    }

    pub fn alpha(&self, idx: usize) -> f64 {
        1.0 - self.probs[idx * self.channels()]
    }

    pub fn to_grid(&self) -> OccupancyGrid {
        OccupancyGrid {
            geometry: self.geometry,
            num_classes: self.num_classes,
            labels: self.labels.clone(),
        }
    }
}

/// Channel 0 (empty) maps to the empty id; channel `k` to class `k − 1`.
pub fn channel_to_label(channel: usize, num_classes: usize) -> u8 {
    if channel == 0 {
        num_classes as u8
    } else {
        (channel - 1) as u8
    }
}

pub fn label_to_channel(label: u8, num_classes: usize) -> usize {
    if label as usize >= num_classes {
        0
    } else {
        label as usize + 1
    }
}

fn fill_voxel(est: &PointEstimate, out: &mut [f64]) -> u8 {
    out[0] = est.empty;
    for (o, e) in out[1..].iter_mut().zip(&est.semantics) {
        *o = est.alpha * e;
    }
    let mut best = 0;
    for (i, v) in out.iter().enumerate() {
        if *v > out[best] {
            best = i;
        }
    }
    best as u8
}

fn assemble(
    geometry: &GridGeometry,
    num_classes: usize,
    eval: impl Fn(usize, &Vector3<f64>) -> PointEstimate + Sync,
) -> SemanticOccupancyField {
    let channels = num_classes + 1;
    let mut probs = vec![0.0; geometry.num_voxels() * channels];
    let results: Vec<(u8, bool)> = probs
        .par_chunks_mut(channels)
        .enumerate()
        .map(|(idx, out)| {
            let [x, y, z] = geometry.coords(idx);
            let c = geometry.voxel_center(x, y, z);
            let est = eval(idx, &c);
            let ch = fill_voxel(&est, out);
            (channel_to_label(ch as usize, num_classes), est.uniform_fallback)
        })
        .collect();
    SemanticOccupancyField {
        geometry: *geometry,
        num_classes,
        probs,
        labels: results.iter().map(|r| r.0).collect(),
        fallback_voxels: results.iter().filter(|r| r.1).count(),
    }
}

/// Voxel → candidate Gaussian lists (CSR), each list in input order.
struct VoxelBins {
    offsets: Vec<usize>,
    items: Vec<u32>,
}

impl VoxelBins {
    fn build(prepared: &[PreparedGaussian], geometry: &GridGeometry) -> Self {
        let ranges: Vec<Option<[(usize, usize); 3]>> = prepared
            .par_iter()
            .map(|g| covered_range(g, geometry))
            .collect();
        let n = geometry.num_voxels();
        let mut counts = vec![0usize; n + 1];
        for r in ranges.iter().flatten() {
            for_each_voxel(r, geometry, |idx| counts[idx + 1] += 1);
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut items = vec![0u32; offsets[n]];
        for (gi, r) in ranges.iter().enumerate() {
            if let Some(r) = r {
                for_each_voxel(r, geometry, |idx| {
                    items[cursor[idx]] = gi as u32;
                    cursor[idx] += 1;
                });
            }
        }
        Self { offsets, items }
    }

    fn candidates(&self, idx: usize) -> &[u32] {
        &self.items[self.offsets[idx]..self.offsets[idx + 1]]
    }
}

fn for_each_voxel(r: &[(usize, usize); 3], geometry: &GridGeometry, mut f: impl FnMut(usize)) {
    for z in r[2].0..=r[2].1 {
        for y in r[1].0..=r[1].1 {
            for x in r[0].0..=r[0].1 {
                f(geometry.index(x, y, z));
            }
        }
    }
}

/// Inclusive voxel index ranges whose centers may fall inside the cutoff
/// box, padded by one voxel; `None` if the box misses the grid.
fn covered_range(g: &PreparedGaussian, geometry: &GridGeometry) -> Option<[(usize, usize); 3]> {
    let h = geometry.voxel_size;
    let mut out = [(0usize, 0usize); 3];
    for i in 0..3 {
        let lo = ((g.mean[i] - g.reach[i] - geometry.origin[i]) / h - 0.5).ceil() - 1.0;
        let hi = ((g.mean[i] + g.reach[i] - geometry.origin[i]) / h - 0.5).floor() + 1.0;
        let max = (geometry.dims[i] - 1) as f64;
        let lo = lo.max(0.0);
        let hi = hi.min(max);
        if !(lo <= hi) {
            return None;
        }
        out[i] = (lo as usize, hi as usize);
    }
    Some(out)
}

/// Renders with per-voxel candidate lists from the cutoff bounding boxes.
pub fn render_grid(gs: &GaussianSet, geometry: &GridGeometry) -> Result<SemanticOccupancyField> {
    let prepared = prepare_all(gs)?;
    let bins = VoxelBins::build(&prepared, geometry);
    let c = gs.num_classes();
    Ok(assemble(geometry, c, |idx, x| {
        evaluate_point(
            x,
            bins.candidates(idx).iter().map(|&i| &prepared[i as usize]),
            c,
        )
    }))
}

/// Evaluates every Gaussian at every voxel center.
pub fn render_grid_brute_force(gs: &GaussianSet, geometry: &GridGeometry) -> Result<SemanticOccupancyField> {
    let prepared = prepare_all(gs)?;
    let c = gs.num_classes();
    Ok(assemble(geometry, c, |_, x| evaluate_point(x, prepared.iter(), c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Provenance, Quat};

    fn prim(mean: Vector3<f64>, scale: Vector3<f64>, q: Quat, a: f64, logits: Vec<f64>) -> GaussianPrimitive {
        GaussianPrimitive::new(mean, scale, q, a, logits).unwrap()
    }

    fn set(prims: Vec<GaussianPrimitive>) -> GaussianSet {
        let c = prims.first().map_or(2, |p| p.semantics.len());
        let n = prims.len() as u32;
        GaussianSet::new(c, prims, (0..n).map(|i| Provenance::new(0, i, 0)).collect()).unwrap()
    }

    #[test]
    fn kernel_at_mean_is_one() {
        let g = prim(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.3, 0.2, 0.9), Quat::IDENTITY, 0.5, vec![0.0]);
        assert_eq!(kernel_phi(&g.mean, &g).unwrap(), 1.0);
    }

    #[test]
    fn kernel_unit_offset() {
        let g = prim(Vector3::zeros(), Vector3::repeat(1.0), Quat::IDENTITY, 0.5, vec![0.0]);
        let v = kernel_phi(&Vector3::new(1.0, 0.0, 0.0), &g).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.60653).abs() < 1e-5);
        assert_eq!(kernel_phi(&Vector3::new(3.01, 0.0, 0.0), &g).unwrap(), 0.0);
    }

    #[test]
    fn kernel_matches_explicit_inverse() {
        let q = Quat::new(0.8, 0.1, -0.4, 0.3).normalized();
        let g = prim(Vector3::new(0.5, -0.2, 1.0), Vector3::new(0.2, 0.5, 1.1), q, 0.5, vec![0.0]);
        let inv = g.covariance().unwrap().matrix.try_inverse().unwrap();
        for x in [
            Vector3::new(0.6, -0.1, 1.2),
            Vector3::new(0.1, 0.3, 0.4),
            Vector3::new(0.5, -0.9, 2.0),
        ] {
            let d = x - g.mean;
            let m2 = (d.transpose() * inv * d)[(0, 0)];
            let expected = if m2 > 9.0 { 0.0 } else { (-0.5 * m2).exp() };
            assert!((kernel_phi(&x, &g).unwrap() - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn alpha_cases() {
        let x = Vector3::new(0.0, 0.0, 0.0);
        assert_eq!(occupancy_alpha(&x, &GaussianSet::empty(2)).unwrap(), 0.0);
        let g1 = prim(x, Vector3::repeat(0.5), Quat::IDENTITY, 0.6, vec![0.0, 0.0]);
        assert!((occupancy_alpha(&x, &set(vec![g1])).unwrap() - 0.6).abs() < 1e-12);
        let g = prim(x, Vector3::repeat(0.5), Quat::IDENTITY, 0.5, vec![0.0, 0.0]);
        assert!((occupancy_alpha(&x, &set(vec![g.clone(), g])).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_gaussian_semantics_are_its_softmax() {
        let logits = vec![0.3, -1.0, 2.0];
        let g = prim(Vector3::zeros(), Vector3::new(0.4, 0.7, 0.2), Quat::IDENTITY, 0.17, logits.clone());
        let (e, fallback) = expected_semantics(&Vector3::new(0.1, 0.2, -0.05), &set(vec![g])).unwrap();
        assert!(!fallback);
        for (a, b) in e.iter().zip(softmax(&logits)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_pair_splits_semantics() {
        let a = prim(Vector3::new(-0.3, 0.0, 0.0), Vector3::repeat(0.5), Quat::IDENTITY, 0.7, vec![50.0, -50.0]);
        let b = prim(Vector3::new(0.3, 0.0, 0.0), Vector3::repeat(0.5), Quat::IDENTITY, 0.7, vec![-50.0, 50.0]);
        let (e, _) = expected_semantics(&Vector3::zeros(), &set(vec![a, b])).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-12 && (e[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_gaussians_match_scalar_loop() {
        let gs = vec![
            prim(Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.3, 0.4, 0.5), Quat::IDENTITY, 0.9, vec![1.0, 0.0, -1.0]),
            prim(Vector3::new(-0.2, 0.3, 0.1), Vector3::new(0.6, 0.2, 0.3), Quat::new(0.9, 0.1, 0.2, 0.3).normalized(), 0.3, vec![0.0, 2.0, 0.5]),
            prim(Vector3::new(0.0, -0.4, 0.3), Vector3::new(0.5, 0.5, 0.2), Quat::new(0.5, -0.5, 0.5, 0.5), 0.6, vec![-1.0, 0.0, 3.0]),
        ];
        let x = Vector3::new(0.05, 0.02, 0.08);
        let (e, _) = expected_semantics(&x, &set(gs.clone())).unwrap();
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for g in &gs {
            let cov = g.covariance().unwrap().matrix;
            let d = x - g.mean;
            let m2 = (d.transpose() * cov.try_inverse().unwrap() * d)[(0, 0)];
            let p = (-0.5 * m2).exp() / ((2.0 * PI).powf(1.5) * cov.determinant().sqrt());
            let ex: Vec<f64> = g.semantics.iter().map(|l| l.exp()).collect();
            let z: f64 = ex.iter().sum();
            for c in 0..3 {
                num[c] += p * g.opacity * ex[c] / z;
            }
            den += p * g.opacity;
        }
        for c in 0..3 {
            assert!((e[c] - num[c] / den).abs() < 1e-7);
        }
    }

    #[test]
    fn fallback_is_uniform() {
        let g = prim(Vector3::new(100.0, 0.0, 0.0), Vector3::repeat(0.1), Quat::IDENTITY, 0.5, vec![0.0; 4]);
        let (e, fallback) = expected_semantics(&Vector3::zeros(), &set(vec![g])).unwrap();
        assert!(fallback);
        assert_eq!(e, vec![0.25; 4]);
    }

    #[test]
    fn empty_set_renders_empty() {
        let geo = GridGeometry::new([4, 4, 2], Vector3::zeros(), 0.5).unwrap();
        let f = render_grid(&GaussianSet::empty(3), &geo).unwrap();
        for idx in 0..geo.num_voxels() {
            assert_eq!(f.voxel_probs(idx), &[1.0, 0.0, 0.0, 0.0]);
            assert_eq!(f.labels[idx], 3);
        }
    }

    #[test]
    fn voxel_vector_arithmetic() {
        let est = PointEstimate {
            alpha: 0.75,
            empty: 0.25,
            semantics: vec![0.5, 0.5, 0.0],
            uniform_fallback: false,
        };
        let mut out = [0.0; 4];
        fill_voxel(&est, &mut out);
        assert_eq!(out, [0.25, 0.375, 0.375, 0.0]);
    }
}
