//! Exact Euclidean distance to the nearest occupied voxel center.
//!
//! The lattice transform uses three sequential 1-D lower-envelope passes
//! (Felzenszwalb & Huttenlocher). Queries at arbitrary points start from the
//! lattice value of the nearest voxel center, which bounds the search to a
//! small column window that is then scanned exactly.

use nalgebra::Vector3;

use crate::model::{GridGeometry, OccupancyGrid};

/// In-place 1-D squared distance transform of `f` (sampled at integer positions).
fn envelope_pass(f: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    out.clear();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    for &q in &finite {
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for q in 0..n {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let d = qf - p as f64;
        out.push(d * d + f[p]);
    }
    f.copy_from_slice(out);
}

/// Squared distance (in voxel units) from every voxel center to the nearest
/// center where `mask` is true; `+∞` everywhere if the mask is empty.
pub fn squared_edt(mask: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    assert_eq!(mask.len(), nx * ny * nz);
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut zb, mut out) = (Vec::new(), Vec::new(), Vec::new());

    let mut line = vec![0.0; nx];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                line[x] = d[idx(x, y, z)];
            }
            if line.iter().any(|f| f.is_finite()) {
                envelope_pass(&mut line, &mut v, &mut zb, &mut out);
            }
            for x in 0..nx {
                d[idx(x, y, z)] = line[x];
            }
        }
    }
    let mut line = vec![0.0; ny];
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = d[idx(x, y, z)];
            }
            if line.iter().any(|f| f.is_finite()) {
                envelope_pass(&mut line, &mut v, &mut zb, &mut out);
            }
            for y in 0..ny {
                d[idx(x, y, z)] = line[y];
            }
        }
    }
    let mut line = vec![0.0; nz];
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = d[idx(x, y, z)];
            }
            if line.iter().any(|f| f.is_finite()) {
                envelope_pass(&mut line, &mut v, &mut zb, &mut out);
            }
            for z in 0..nz {
                d[idx(x, y, z)] = line[z];
            }
        }
    }
    d
}

/// Distance queries against the occupied voxel centers of a grid.
#[derive(Debug, Clone)]
pub struct NearestOccupied {
    geometry: GridGeometry,
    sq_edt: Vec<f64>,
    /// Sorted occupied z indices per `(x, y)` column.
    columns: Vec<Vec<u32>>,
    occupied: usize,
}

impl NearestOccupied {
    pub fn new(grid: &OccupancyGrid, unknown: Option<u8>) -> Self {
        let empty = grid.empty_id();
        let mask: Vec<bool> = grid
            .labels
            .iter()
            .map(|&l| l != empty && Some(l) != unknown)
            .collect();
        Self::from_mask(&grid.geometry, &mask)
    }

    pub fn from_mask(geometry: &GridGeometry, mask: &[bool]) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut columns = vec![Vec::new(); nx * ny];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if mask[geometry.index(x, y, z)] {
                        columns[x + nx * y].push(z as u32);
                    }
                }
            }
        }
        Self {
            geometry: *geometry,
            sq_edt: squared_edt(mask, geometry.dims),
            columns,
            occupied: mask.iter().filter(|&&m| m).count(),
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied
    }

    /// Lattice distance (meters) at a voxel center.
    pub fn lattice_distance(&self, x: usize, y: usize, z: usize) -> f64 {
        self.sq_edt[self.geometry.index(x, y, z)].sqrt() * self.geometry.voxel_size
    }

    /// Euclidean distance in meters from `p` to the nearest occupied voxel
    /// center; `+∞` when nothing is occupied.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        if self.occupied == 0 {
            return f64::INFINITY;
        }
        let g = &self.geometry;
        let u = (p - g.origin) / g.voxel_size - Vector3::repeat(0.5);
        let mut base = [0usize; 3];
        for i in 0..3 {
            base[i] = u[i].round().clamp(0.0, (g.dims[i] - 1) as f64) as usize;
        }
        let offset = Vector3::new(
            u.x - base[0] as f64,
            u.y - base[1] as f64,
            u.z - base[2] as f64,
        )
        .norm();
        let radius = self.sq_edt[g.index(base[0], base[1], base[2])].sqrt() + offset + 1e-9;

        let lo = |c: f64| (c - radius).ceil().max(0.0) as usize;
        let hi = |c: f64, n: usize| ((c + radius).floor()).min((n - 1) as f64);
        let (x_hi, y_hi) = (hi(u.x, g.dims[0]), hi(u.y, g.dims[1]));
        let mut best = f64::INFINITY;
        if x_hi < 0.0 || y_hi < 0.0 {
            return f64::INFINITY;
        }
        for x in lo(u.x)..=x_hi as usize {
            let dx2 = (u.x - x as f64).powi(2);
            if dx2 >= best {
                continue;
            }
            for y in lo(u.y)..=y_hi as usize {
                let dxy = dx2 + (u.y - y as f64).powi(2);
                if dxy >= best {
                    continue;
                }
                let col = &self.columns[x + g.dims[0] * y];
                if col.is_empty() {
                    continue;
                }
                let k = col.partition_point(|&z| (z as f64) < u.z);
                let mut dz = f64::INFINITY;
                if k < col.len() {
                    dz = dz.min(col[k] as f64 - u.z);
                }
                if k > 0 {
                    dz = dz.min(u.z - col[k - 1] as f64);
                }
                best = best.min(dxy + dz * dz);
            }
        }
        best.sqrt() * g.voxel_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lattice_matches_brute_force() {
        let dims = [9, 7, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask: Vec<bool> = (0..9 * 7 * 5).map(|_| rng.random_bool(0.04)).collect();
        let d = squared_edt(&mask, dims);
        let pts: Vec<[usize; 3]> = (0..mask.len())
            .filter(|&i| mask[i])
            .map(|i| [i % 9, (i / 9) % 7, i / 63])
            .collect();
        for i in 0..mask.len() {
            let (x, y, z) = (i % 9, (i / 9) % 7, i / 63);
            let brute = pts
                .iter()
                .map(|p| {
                    let dx = x as f64 - p[0] as f64;
                    let dy = y as f64 - p[1] as f64;
                    let dz = z as f64 - p[2] as f64;
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[i], brute);
        }
    }

    #[test]
    fn empty_mask_is_infinite() {
        let d = squared_edt(&[false; 8], [2, 2, 2]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn single_site_axis_distance() {
        let geo = GridGeometry::new([5, 5, 5], Vector3::zeros(), 0.5).unwrap();
        let mut mask = vec![false; 125];
        mask[geo.index(2, 2, 2)] = true;
        let n = NearestOccupied::from_mask(&geo, &mask);
        let c = geo.voxel_center(2, 2, 2);
        assert_eq!(n.distance(&c), 0.0);
        assert!((n.distance(&(c + Vector3::new(0.5, 0.0, 0.0))) - 0.5).abs() < 1e-12);
        let far = Vector3::new(-20.0, 3.0, 40.0);
        assert!((n.distance(&far) - (far - c).norm()).abs() < 1e-9);
    }
}
