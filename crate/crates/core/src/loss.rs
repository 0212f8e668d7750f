//! Forward evaluation of the occupancy and depth objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DepthMap;

/// Probabilities below this are clamped before taking the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_occ: f64,
    pub lambda_depth: f64,
    pub alpha_unc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_occ: 1.0,
            lambda_depth: 0.05,
            alpha_unc: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub occ_ce: f64,
    pub occ_lovasz: f64,
    pub depth_term: f64,
    pub gradient_term: f64,
    pub uncertainty_term: f64,
    pub lambda_occ: f64,
    pub lambda_depth: f64,
    pub alpha_unc: f64,
}

impl LossReport {
    pub fn new(occ_ce: f64, occ_lovasz: f64, depth: DepthLossTerms, weights: LossWeights) -> Self {
        let total = weights.lambda_occ * (occ_ce + occ_lovasz)
            + weights.lambda_depth * (depth.depth_term + depth.gradient_term + depth.uncertainty_term);
        Self {
            total,
            occ_ce,
            occ_lovasz,
            depth_term: depth.depth_term,
            gradient_term: depth.gradient_term,
            uncertainty_term: depth.uncertainty_term,
            lambda_occ: weights.lambda_occ,
            lambda_depth: weights.lambda_depth,
            alpha_unc: weights.alpha_unc,
        }
    }
}

fn check_probs(probs: &[f64], channels: usize, gt: &[usize]) -> Result<()> {
    if channels == 0 || probs.len() != gt.len() * channels {
        return Err(Error::Shape(format!(
            "{} probabilities for {} voxels with {channels} channels",
            probs.len(),
            gt.len()
        )));
    }
    if let Some(&g) = gt.iter().find(|&&g| g >= channels) {
        return Err(Error::Shape(format!("label {g} outside {channels} channels")));
    }
    Ok(())
}

/// Mean over non-ignored voxels of `−log p[gt]`, with `p` clamped to `[1e-7, 1]`.
pub fn cross_entropy_loss(probs: &[f64], channels: usize, gt: &[usize], ignore: Option<usize>) -> Result<f64> {
    check_probs(probs, channels, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, &g) in gt.iter().enumerate() {
        if Some(g) == ignore {
            continue;
        }
        let row = &probs[v * channels..(v + 1) * channels];
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!("voxel {v} probabilities sum to {s}")));
        }
        sum -= row[g].clamp(PROB_CLAMP, 1.0).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMean("all voxels ignored".into()));
    }
    Ok(sum / n as f64)
}

/// Gradient of the Lovász extension of the Jaccard loss for a foreground
/// indicator sorted by decreasing error.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut grad = Vec::with_capacity(fg_sorted.len());
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász-Softmax averaged over the classes present in `gt`.
pub fn lovasz_softmax_loss(probs: &[f64], channels: usize, gt: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::UndefinedMean("empty grid".into()));
    }
    check_probs(probs, channels, gt)?;
    let mut total = 0.0;
    let mut present = 0usize;
    let mut order: Vec<usize> = (0..gt.len()).collect();
    for c in 0..channels {
        if !gt.contains(&c) {
            continue;
        }
        present += 1;
        let errors: Vec<f64> = gt
            .iter()
            .enumerate()
            .map(|(v, &g)| ((g == c) as u8 as f64 - probs[v * channels + c]).abs())
            .collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let fg: Vec<bool> = order.iter().map(|&v| gt[v] == c).collect();
        let grad = lovasz_grad(&fg);
        total += order.iter().zip(&grad).map(|(&v, g)| errors[v] * g).sum::<f64>();
    }
    Ok(total / present as f64)
}

/// Per-view-summed depth loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthLossTerms {
    pub depth_term: f64,
    pub gradient_term: f64,
    /// `−α · mean(log Σ)` summed over views.
    pub uncertainty_term: f64,
}

impl DepthLossTerms {
    pub fn total(&self) -> f64 {
        self.depth_term + self.gradient_term + self.uncertainty_term
    }
}

fn rms(sum_sq: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (sum_sq / n as f64).sqrt()
    }
}

/// One view: `‖Σ⊙(D̂−D)‖ + ‖Σ⊙(∇D̂−∇D)‖ − α log Σ`, where each norm is the
/// root-mean-square over valid pixels and the log term is a per-pixel mean.
/// Pixels that are sentinel in either map are excluded everywhere.
pub fn depth_uncertainty_loss_view(pred: &DepthMap, gt: &DepthMap, alpha_unc: f64) -> Result<DepthLossTerms> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Shape(format!(
            "pred {}x{} vs gt {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if let Some(u) = pred.uncertainty.iter().find(|&&u| !(u > 0.0)) {
        return Err(Error::Domain(format!("nonpositive uncertainty {u}")));
    }
    let (h, w) = (pred.height, pred.width);
    let valid = |i: usize| pred.is_valid(i) && gt.is_valid(i);

    let mut data_sq = 0.0;
    let mut n_data = 0;
    let mut grad_sq = 0.0;
    let mut n_grad = 0;
    let mut log_sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !valid(i) {
                continue;
            }
            let s = pred.uncertainty[i];
            let res = s * (pred.depth[i] - gt.depth[i]);
            data_sq += res * res;
            n_data += 1;
            log_sum += s.ln();
            for j in [(c + 1 < w).then(|| i + 1), (r + 1 < h).then(|| i + w)].into_iter().flatten() {
                if valid(j) {
                    let g = (pred.depth[j] - pred.depth[i]) - (gt.depth[j] - gt.depth[i]);
                    grad_sq += (s * g) * (s * g);
                    n_grad += 1;
                }
            }
        }
    }
    let uncertainty_term = if n_data == 0 {
        0.0
    } else {
        -alpha_unc * log_sum / n_data as f64
    };
    Ok(DepthLossTerms {
        depth_term: rms(data_sq, n_data),
        gradient_term: rms(grad_sq, n_grad),
        uncertainty_term,
    })
}

/// Sum of [`depth_uncertainty_loss_view`] over views.
pub fn depth_uncertainty_loss(pred: &[DepthMap], gt: &[DepthMap], alpha_unc: f64) -> Result<DepthLossTerms> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted vs {} gt views", pred.len(), gt.len())));
    }
    let mut acc = DepthLossTerms::default();
    for (p, g) in pred.iter().zip(gt) {
        let t = depth_uncertainty_loss_view(p, g, alpha_unc)?;
        acc.depth_term += t.depth_term;
        acc.gradient_term += t.gradient_term;
        acc.uncertainty_term += t.uncertainty_term;
    }
    Ok(acc)
}
