#![allow(dead_code)]

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatocc::model::{GaussianPrimitive, GaussianSet, Provenance, Quat};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() > 0.1 {
            return q.normalized();
        }
    }
}

/// Rotation matrix written out from the quaternion product `q v q*`.
pub fn quat_matrix_oracle(q: &Quat) -> Matrix3<f64> {
    let rotate = |v: [f64; 3]| -> [f64; 3] {
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        // t = q * (0, v)
        let tw = -x * v[0] - y * v[1] - z * v[2];
        let tx = w * v[0] + y * v[2] - z * v[1];
        let ty = w * v[1] + z * v[0] - x * v[2];
        let tz = w * v[2] + x * v[1] - y * v[0];
        // t * conj(q)
        [
            -tw * x + tx * w - ty * z + tz * y,
            -tw * y + ty * w - tz * x + tx * z,
            -tw * z + tz * w - tx * y + ty * x,
        ]
    };
    let c: Vec<[f64; 3]> = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].into_iter().map(rotate).collect();
    Matrix3::new(c[0][0], c[1][0], c[2][0], c[0][1], c[1][1], c[2][1], c[0][2], c[1][2], c[2][2])
}

/// Random Gaussians with means in `[lo, hi)³`.
pub fn random_set(rng: &mut ChaCha8Rng, n: usize, classes: usize, lo: f64, hi: f64, scale: (f64, f64)) -> GaussianSet {
    let prims = (0..n)
        .map(|_| {
            let mean = Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi));
            let s = Vector3::new(
                rng.random_range(scale.0..scale.1),
                rng.random_range(scale.0..scale.1),
                rng.random_range(scale.0..scale.1),
            );
            let logits = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            GaussianPrimitive::new(mean, s, random_quat(rng), rng.random_range(0.0..=1.0), logits).unwrap()
        })
        .collect();
    let prov = (0..n as u32).map(|i| Provenance::new(0, i / 64, i % 64)).collect();
    GaussianSet::new(classes, prims, prov).unwrap()
}

pub fn run_with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

/// Lovász extension from explicit Jaccard losses of the sorted prefix sets.
pub fn prefix_jaccard_oracle(probs: &[f64], channels: usize, gt: &[usize]) -> f64 {
    let n = gt.len();
    let mut per_class = Vec::new();
    for c in 0..channels {
        let fg: BTreeSet<usize> = (0..n).filter(|&v| gt[v] == c).collect();
        if fg.is_empty() {
            continue;
        }
        let err: Vec<f64> = (0..n).map(|v| ((gt[v] == c) as u8 as f64 - probs[v * channels + c]).abs()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| err[b].partial_cmp(&err[a]).unwrap());
        let jaccard_loss = |wrong: &BTreeSet<usize>| -> f64 {
            let kept = fg.difference(wrong).count() as f64;
            let union = fg.union(wrong).count() as f64;
            1.0 - kept / union
        };
        let mut prefix = BTreeSet::new();
        let mut prev = 0.0;
        let mut total = 0.0;
        for &v in &order {
            prefix.insert(v);
            let j = jaccard_loss(&prefix);
            total += err[v] * (j - prev);
            prev = j;
        }
        per_class.push(total);
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    while (b - a).abs() > 1e-10 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    (a + b) / 2.0
}
