//! Positional refinement: `Δμ = Bᵀ σ(w)`, `μ' = μ + Δμ`.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GaussianSet;

/// Offset basis; every row must have its negation somewhere in the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct OffsetBasis {
    rows: Vec<Vector3<f64>>,
}

impl TryFrom<Vec<[f64; 3]>> for OffsetBasis {
    type Error = Error;
    fn try_from(rows: Vec<[f64; 3]>) -> Result<Self> {
        OffsetBasis::new(rows.into_iter().map(Vector3::from).collect())
    }
}

impl From<OffsetBasis> for Vec<[f64; 3]> {
    fn from(b: OffsetBasis) -> Self {
        b.rows.iter().map(|r| [r.x, r.y, r.z]).collect()
    }
}

impl OffsetBasis {
    pub fn new(rows: Vec<Vector3<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("offset basis needs at least one row".into()));
        }
        if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("non-finite basis row".into()));
        }
        let mut used = vec![false; rows.len()];
        for i in 0..rows.len() {
            if used[i] {
                continue;
            }
            let partner = (0..rows.len()).find(|&j| j != i && !used[j] && rows[j] == -rows[i]);
            match partner {
                Some(j) => {
                    used[i] = true;
                    used[j] = true;
                }
                None => {
                    return Err(Error::Domain(format!(
                        "basis row {i} has no negated partner"
                    )))
                }
            }
        }
        Ok(Self { rows })
    }

    /// `{±δ e_x, ±δ e_y, ±δ e_z}`.
    pub fn axis_pairs(delta_max: f64) -> Self {
        let d = delta_max;
        Self {
            rows: vec![
                Vector3::new(d, 0.0, 0.0),
                Vector3::new(-d, 0.0, 0.0),
                Vector3::new(0.0, d, 0.0),
                Vector3::new(0.0, -d, 0.0),
                Vector3::new(0.0, 0.0, d),
                Vector3::new(0.0, 0.0, -d),
            ],
        }
    }

    /// Axis pairs with `δ_max = s_g / 2`.
    pub fn for_grid_size(grid_size: f64) -> Self {
        Self::axis_pairs(grid_size / 2.0)
    }

    pub fn rows(&self) -> &[Vector3<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn delta_max(&self) -> f64 {
        self.rows.iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// Indices of the `(+δ e_axis, −δ e_axis)` pair with the largest δ.
    fn axis_pair(&self, axis: usize) -> Option<(usize, usize)> {
        let aligned = |r: &Vector3<f64>| (0..3).all(|i| i == axis || r[i] == 0.0);
        let plus = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| aligned(r) && r[axis] > 0.0)
            .max_by(|a, b| a.1[axis].total_cmp(&b.1[axis]))?
            .0;
        let minus = self.rows.iter().position(|r| *r == -self.rows[plus])?;
        Some((plus, minus))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ_k σ(w_k) B_k`.
pub fn offset(basis: &OffsetBasis, w: &[f64]) -> Vector3<f64> {
    let mut d = Vector3::zeros();
    for (row, &wk) in basis.rows.iter().zip(w) {
        let s = sigmoid(wk);
        d.x += s * row.x;
        d.y += s * row.y;
        d.z += s * row.z;
    }
    d
}

/// Moves each mean by its basis offset; all other attributes are untouched.
pub fn refine_positions(g: &GaussianSet, basis: &OffsetBasis, weights: &[Vec<f64>]) -> Result<GaussianSet> {
    if weights.len() != g.len() {
        return Err(Error::Shape(format!(
            "{} weight vectors for {} Gaussians",
            weights.len(),
            g.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| w.len() != basis.len()) {
        return Err(Error::Shape(format!(
            "weight vector of length {} for a basis of {} rows",
            w.len(),
            basis.len()
        )));
    }
    let prims = g
        .primitives()
        .par_iter()
        .zip(weights.par_iter())
        .map(|(p, w)| {
            let mut out = p.clone();
            out.mean = p.mean + offset(basis, w);
            out
        })
        .collect();
    GaussianSet::new(g.num_classes(), prims, g.provenance().to_vec())
}

/// Produces per-Gaussian weight vectors in place of a learned network.
pub trait WeightProvider {
    fn weights(&self, g: &GaussianSet, basis: &OffsetBasis) -> Result<Vec<Vec<f64>>>;
}

/// All-zero weights: the identity refinement on a paired basis.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroWeights;

impl WeightProvider for ZeroWeights {
    fn weights(&self, g: &GaussianSet, basis: &OffsetBasis) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![0.0; basis.len()]; g.len()])
    }
}

/// Weights that move each mean toward the closest point returned by
/// `nearest`, per axis, as far as the basis allows.
pub struct SurfaceSnapWeights<F> {
    pub nearest: F,
}

impl<F> WeightProvider for SurfaceSnapWeights<F>
where
    F: Fn(&Vector3<f64>) -> Vector3<f64> + Sync,
{
    fn weights(&self, g: &GaussianSet, basis: &OffsetBasis) -> Result<Vec<Vec<f64>>> {
        let pairs: Vec<(usize, usize)> = (0..3)
            .map(|a| {
                basis
                    .axis_pair(a)
                    .ok_or_else(|| Error::Shape(format!("basis has no ± pair along axis {a}")))
            })
            .collect::<Result<_>>()?;
        Ok(g
            .primitives()
            .par_iter()
            .map(|p| {
                let target = (self.nearest)(&p.mean) - p.mean;
                let mut w = vec![0.0; basis.len()];
                for (axis, &(plus, minus)) in pairs.iter().enumerate() {
                    let delta = basis.rows[plus][axis];
                    // δ·(σ(w) − σ(−w)) = δ·tanh(w/2)
                    let ratio = (target[axis] / delta).clamp(-0.999_999, 0.999_999);
                    let wk = 2.0 * ratio.atanh();
                    w[plus] = wk;
                    w[minus] = -wk;
                }
                w
            })
            .collect())
    }
}
