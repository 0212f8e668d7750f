//! Alternating in-frame / cross-frame attention at toy scale.
//!
//! One block, one head, no residuals or normalization. In-frame attention
//! runs independently per view; cross-frame attention runs over the
//! concatenation of all refined view tokens. Register tokens are ordinary
//! rows of each view matrix and are carried through to the output.
//!
//! All reductions over keys use [`ordered_sum`], so the result of a row does
//! not depend on the order in which key rows are presented. That makes the
//! cross-frame stage exactly permutation-equivariant over views.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · rhs`; each output entry is a plain left-to-right dot product.
    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * rhs.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape("vstack column mismatch".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let data = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Mat::from_vec(rows, cols, data)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// Sum whose value depends only on the multiset of terms.
pub fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Row-softmax of `Q Kᵀ / √d_k`.
pub fn attention_weights(q: &Mat, k: &Mat) -> Result<Mat> {
    if q.cols != k.cols {
        return Err(Error::Shape(format!(
            "query dim {} != key dim {}",
            q.cols, k.cols
        )));
    }
    if q.cols == 0 {
        return Err(Error::Shape("d_k must be positive".into()));
    }
    if k.rows == 0 {
        return Err(Error::Shape("attention needs at least one key".into()));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut w = Mat::zeros(q.rows, k.rows);
    let mut scores = vec![0.0; k.rows];
    for m in 0..q.rows {
        let qm = q.row(m);
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = k.row(j);
            let mut acc = 0.0;
            for (a, b) in qm.iter().zip(kj) {
                acc += a * b;
            }
            *s = acc * scale;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom = ordered_sum(&mut exps.clone());
        for (j, e) in exps.iter().enumerate() {
            w.set(m, j, e / denom);
        }
    }
    Ok(w)
}

/// `softmax(Q Kᵀ / √d_k) V`.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    if k.rows != v.rows {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows, v.rows
        )));
    }
    if [q, k, v].iter().any(|m| m.data.iter().any(|x| x.is_nan())) {
        return Err(Error::Domain("NaN in attention input".into()));
    }
    let w = attention_weights(q, k)?;
    let mut out = Mat::zeros(q.rows, v.cols);
    let mut terms = vec![0.0; k.rows];
    for m in 0..q.rows {
        for c in 0..v.cols {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = w.get(m, j) * v.get(j, c);
            }
            out.set(m, c, ordered_sum(&mut terms));
        }
    }
    Ok(out)
}

/// Per-view token matrices; the last `registers` rows of each are register tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    views: Vec<Mat>,
    registers: usize,
}

impl TokenSet {
    pub fn new(views: Vec<Mat>, registers: usize) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::Shape("token set needs at least one view".into()))?;
        let (rows, cols) = (first.rows, first.cols);
        if views.iter().any(|v| v.rows != rows || v.cols != cols) {
            return Err(Error::Shape("views have inconsistent token shapes".into()));
        }
        if registers > rows {
            return Err(Error::Shape(format!(
                "{registers} registers exceed {rows} tokens per view"
            )));
        }
        Ok(Self { views, registers })
    }

    /// Random tokens: `tokens` visual tokens plus `registers` register rows per view.
    pub fn random(num_views: usize, tokens: usize, registers: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = tokens + registers;
        let views = (0..num_views)
            .map(|_| {
                let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                Mat::from_vec(n, dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(views, registers)
    }

    pub fn views(&self) -> &[Mat] {
        &self.views
    }

    pub fn registers(&self) -> usize {
        self.registers
    }

    pub fn tokens_per_view(&self) -> usize {
        self.views[0].rows
    }

    pub fn dim(&self) -> usize {
        self.views[0].cols
    }
}

/// Query/key/value projections of one attention stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub query: Mat,
    pub key: Mat,
    pub value: Mat,
}

impl StageWeights {
    fn validate(&self, token_dim: usize, label: &str) -> Result<()> {
        let dk = self.query.cols;
        if self.query.rows != token_dim || self.key.rows != token_dim || self.value.rows != token_dim {
            return Err(Error::Shape(format!(
                "{label}: projections must have {token_dim} input rows"
            )));
        }
        if self.key.cols != dk || dk == 0 {
            return Err(Error::Shape(format!(
                "{label}: query/key inner dims differ ({} vs {})",
                dk, self.key.cols
            )));
        }
        if self.value.cols != token_dim {
            return Err(Error::Shape(format!(
                "{label}: value projection must map back to {token_dim} columns"
            )));
        }
        Ok(())
    }

    fn apply(&self, tokens: &Mat) -> Result<Mat> {
        let q = tokens.matmul(&self.query)?;
        let k = tokens.matmul(&self.key)?;
        let v = tokens.matmul(&self.value)?;
        scaled_dot_attention(&q, &k, &v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub in_frame: StageWeights,
    pub cross_frame: StageWeights,
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureEntry {
    label: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureSidecar {
    dtype: String,
    entries: Vec<FixtureEntry>,
}

const STAGE_LABELS: [&str; 6] = [
    "in_frame.query",
    "in_frame.key",
    "in_frame.value",
    "cross_frame.query",
    "cross_frame.key",
    "cross_frame.value",
];

impl AttentionWeights {
    /// Deterministic weights uniform in `±1/√token_dim`.
    pub fn seeded(token_dim: usize, dk: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (token_dim as f64).sqrt();
        let mut gen = |cols: usize| {
            let data = (0..token_dim * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Mat {
                rows: token_dim,
                cols,
                data,
            }
        };
        let in_frame = StageWeights {
            query: gen(dk),
            key: gen(dk),
            value: gen(token_dim),
        };
        let cross_frame = StageWeights {
            query: gen(dk),
            key: gen(dk),
            value: gen(token_dim),
        };
        Self {
            in_frame,
            cross_frame,
        }
    }

    fn matrices(&self) -> [&Mat; 6] {
        [
            &self.in_frame.query,
            &self.in_frame.key,
            &self.in_frame.value,
            &self.cross_frame.query,
            &self.cross_frame.key,
            &self.cross_frame.value,
        ]
    }

    /// Writes `<stem>.f32` (flat little-endian floats) and `<stem>.json` (shapes).
    pub fn save_fixture(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (label, m) in STAGE_LABELS.iter().zip(self.matrices()) {
            entries.push(FixtureEntry {
                label: (*label).to_string(),
                rows: m.rows,
                cols: m.cols,
                offset,
            });
            offset += m.data.len();
            for &v in &m.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        std::fs::write(stem.with_extension("f32"), bytes)?;
        let sidecar = FixtureSidecar {
            dtype: "f32le".into(),
            entries,
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load_fixture(stem: &Path) -> Result<Self> {
        let sidecar: FixtureSidecar =
            serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
        if sidecar.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported dtype {}", sidecar.dtype)));
        }
        let raw = std::fs::read(stem.with_extension("f32"))?;
        if raw.len() % 4 != 0 {
            return Err(Error::Format("weight file length not a multiple of 4".into()));
        }
        let floats: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut mats = Vec::with_capacity(6);
        for label in STAGE_LABELS {
            let e = sidecar
                .entries
                .iter()
                .find(|e| e.label == label)
                .ok_or_else(|| Error::Format(format!("fixture missing {label}")))?;
            let end = e.offset + e.rows * e.cols;
            if end > floats.len() {
                return Err(Error::Format(format!("{label} extends past end of data")));
            }
            mats.push(Mat::from_vec(e.rows, e.cols, floats[e.offset..end].to_vec())?);
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("six matrices");
        Ok(Self {
            in_frame: StageWeights {
                query: next(),
                key: next(),
                value: next(),
            },
            cross_frame: StageWeights {
                query: next(),
                key: next(),
                value: next(),
            },
        })
    }
}

/// In-frame stage: attention within each view independently.
pub fn in_frame_stage(tokens: &TokenSet, weights: &AttentionWeights) -> Result<Vec<Mat>> {
    weights.in_frame.validate(tokens.dim(), "in_frame")?;
    tokens
        .views
        .par_iter()
        .map(|t| weights.in_frame.apply(t))
        .collect()
}

/// Cross-frame stage over the concatenation of all per-view tokens.
pub fn cross_frame_stage(views: &[Mat], weights: &AttentionWeights) -> Result<Vec<Mat>> {
    let dim = views.first().map_or(0, Mat::cols);
    weights.cross_frame.validate(dim, "cross_frame")?;
    let all = Mat::vstack(views)?;
    let fused = weights.cross_frame.apply(&all)?;
    let mut out = Vec::with_capacity(views.len());
    let mut start = 0;
    for v in views {
        out.push(fused.slice_rows(start, start + v.rows));
        start += v.rows;
    }
    Ok(out)
}

/// One in-frame pass per view followed by one cross-frame pass.
pub fn alternating_block(tokens: &TokenSet, weights: &AttentionWeights) -> Result<TokenSet> {
    let refined = in_frame_stage(tokens, weights)?;
    let fused = cross_frame_stage(&refined, weights)?;
    TokenSet::new(fused, tokens.registers)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar-loop oracle: plain left-to-right sums.
    fn oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dk = q[0].len() as f64;
        q.iter()
            .map(|qm| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qm.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| (0..k.len()).map(|j| e[j] / z * v[j][c]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn singleton_key_returns_value_row() {
        let q = Mat::from_rows(&[vec![3.0, -1.0], vec![0.5, 9.0]]).unwrap();
        let k = Mat::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v = Mat::from_rows(&[vec![4.0, -7.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for m in 0..2 {
            assert_eq!(out.row(m), &[4.0, -7.0]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Mat::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.1]]).unwrap();
        let k = Mat::from_rows(&[vec![0.2, 0.4], vec![0.2, 0.4], vec![0.2, 0.4]]).unwrap();
        let v = Mat::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, -3.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for m in 0..2 {
            assert!((out.get(m, 0) - 3.0).abs() < 1e-12);
            assert!(out.get(m, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_case_matches_scalar_oracle() {
        let qr = vec![vec![1.0, 0.0], vec![2.0, -1.0]];
        let kr = vec![vec![1.0, 1.0], vec![0.0, 2.0], vec![-1.0, 3.0]];
        let vr = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 4.0]];
        let out = scaled_dot_attention(
            &Mat::from_rows(&qr).unwrap(),
            &Mat::from_rows(&kr).unwrap(),
            &Mat::from_rows(&vr).unwrap(),
        )
        .unwrap();
        let expected = oracle(&qr, &kr, &vr);
        for m in 0..2 {
            for c in 0..2 {
                assert!((out.get(m, c) - expected[m][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = Mat::zeros(2, 3);
        let k = Mat::zeros(4, 2);
        let v = Mat::zeros(4, 2);
        assert!(matches!(scaled_dot_attention(&q, &k, &v), Err(Error::Shape(_))));
        let k = Mat::zeros(4, 3);
        let v = Mat::zeros(5, 2);
        assert!(matches!(scaled_dot_attention(&q, &k, &v), Err(Error::Shape(_))));
        let views = vec![Mat::zeros(3, 4), Mat::zeros(2, 4)];
        assert!(TokenSet::new(views, 0).is_err());
    }

    #[test]
    fn single_view_in_frame_matches_direct_call() {
        let tokens = TokenSet::random(1, 5, 2, 4, 11).unwrap();
        let w = AttentionWeights::seeded(4, 3, 5);
        let staged = in_frame_stage(&tokens, &w).unwrap();
        let t = &tokens.views()[0];
        let direct = scaled_dot_attention(
            &t.matmul(&w.in_frame.query).unwrap(),
            &t.matmul(&w.in_frame.key).unwrap(),
            &t.matmul(&w.in_frame.value).unwrap(),
        )
        .unwrap();
        assert_eq!(staged[0], direct);
    }

    #[test]
    fn block_preserves_shape() {
        let tokens = TokenSet::random(3, 6, 2, 5, 1).unwrap();
        let w = AttentionWeights::seeded(5, 4, 2);
        let out = alternating_block(&tokens, &w).unwrap();
        assert_eq!(out.views().len(), 3);
        assert_eq!(out.tokens_per_view(), 8);
        assert_eq!(out.dim(), 5);
        assert_eq!(out.registers(), 2);
    }

    #[test]
    fn fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("weights");
        let w = AttentionWeights::seeded(4, 3, 9);
        w.save_fixture(&stem).unwrap();
        let back = AttentionWeights::load_fixture(&stem).unwrap();
        for (a, b) in w.matrices().iter().zip(back.matrices()) {
            assert_eq!((a.rows, a.cols), (b.rows, b.cols));
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
