//! Grid-based sampling: voxelize means, key them, group by sorting the keys
//! and keep one representative per occupied voxel.

use std::collections::HashSet;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::model::{GaussianSet, VoxelGridSpec};

/// Integer voxel coordinate and its linear key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoxelKey {
    pub coord: [i64; 3],
    pub key: u64,
}

/// `v = floor(mean / s_g)`; the key is the linear index of `v - lo` over the
/// spec's dims (x fastest). `None` when the mean lies outside `[min, max)`.
pub fn voxelize_key(mean: &Vector3<f64>, spec: &VoxelGridSpec) -> Option<VoxelKey> {
    if !spec.extents().contains(mean) {
        return None;
    }
    let lo = spec.lo();
    let dims = spec.dims();
    let mut coord = [0i64; 3];
    let mut rel = [0u64; 3];
    for i in 0..3 {
        let v = (mean[i] / spec.grid_size()).floor() as i64;
        let r = v - lo[i];
        if r < 0 || r as u64 >= dims[i] {
            return None;
        }
        coord[i] = v;
        rel[i] = r as u64;
    }
    let key = rel[0] + dims[0] * (rel[1] + dims[1] * rel[2]);
    Some(VoxelKey { coord, key })
}

/// Inverse of the key layout used by [`voxelize_key`].
pub fn key_to_coord(key: u64, spec: &VoxelGridSpec) -> [i64; 3] {
    let dims = spec.dims();
    let lo = spec.lo();
    let x = key % dims[0];
    let rest = key / dims[0];
    let y = rest % dims[1];
    let z = rest / dims[1];
    [x as i64 + lo[0], y as i64 + lo[1], z as i64 + lo[2]]
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable LSD radix sort of `(key, index)` pairs by key, 8 bits per pass.
/// Passes above the highest set bit of `max_key` are skipped.
pub fn radix_sort_pairs(pairs: &mut Vec<(u64, u32)>, max_key: u64) {
    let bits = 64 - max_key.leading_zeros();
    let passes = bits.div_ceil(8);
    if pairs.len() < 2 || passes == 0 {
        return;
    }
    let mut scratch = vec![(0u64, 0u32); pairs.len()];
    for pass in 0..passes {
        let shift = pass * 8;
        let mut counts = [0usize; 256];
        for &(k, _) in pairs.iter() {
            counts[((k >> shift) & 0xff) as usize] += 1;
        }
        let mut offsets = [0usize; 256];
        let mut acc = 0;
        for (o, c) in offsets.iter_mut().zip(counts.iter()) {
            *o = acc;
            acc += c;
        }
        for &p in pairs.iter() {
            let d = ((p.0 >> shift) & 0xff) as usize;
            scratch[offsets[d]] = p;
            offsets[d] += 1;
        }
        std::mem::swap(pairs, &mut scratch);
    }
}

/// Indices of the representatives, in key order.
///
/// Group members are ordered by input index; the chosen member is
/// `splitmix64(seed ^ key) % group_len`.
pub fn sample_indices(means: &[Vector3<f64>], spec: &VoxelGridSpec, seed: u64) -> Vec<usize> {
    assert!(means.len() <= u32::MAX as usize, "too many Gaussians for u32 indices");
    let keys: Vec<Option<u64>> = means
        .par_iter()
        .map(|m| voxelize_key(m, spec).map(|k| k.key))
        .collect();
    let mut pairs: Vec<(u64, u32)> = keys
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (k, i as u32)))
        .collect();
    radix_sort_pairs(&mut pairs, spec.num_cells().saturating_sub(1));

    let mut out = Vec::new();
    let mut start = 0;
    while start < pairs.len() {
        let key = pairs[start].0;
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].0 == key {
            end += 1;
        }
        let pick = (splitmix64(seed ^ key) % (end - start) as u64) as usize;
        out.push(pairs[start + pick].1 as usize);
        start = end;
    }
    out
}

/// One input Gaussian per occupied in-bounds voxel, sorted by key.
pub fn sample_representatives(g: &GaussianSet, spec: &VoxelGridSpec, seed: u64) -> GaussianSet {
    let means = g.means();
    let idx = sample_indices(&means, spec, seed);
    g.select(&idx)
}

/// Distinct occupied in-bounds voxels counted with a hash set of integer
/// coordinates. Shares no code with the sort-based path.
pub fn count_occupied_voxels(means: &[Vector3<f64>], spec: &VoxelGridSpec) -> usize {
    let ext = spec.extents();
    let s = spec.grid_size();
    let mut seen: HashSet<(i64, i64, i64)> = HashSet::new();
    for m in means {
        let inside = (0..3).all(|i| m[i] >= ext.min[i] && m[i] < ext.max[i]);
        if inside {
            seen.insert((
                (m.x / s).floor() as i64,
                (m.y / s).floor() as i64,
                (m.z / s).floor() as i64,
            ));
        }
    }
    seen.len()
}
