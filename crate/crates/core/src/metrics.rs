//! Distribution metrics over pluggable features, the clip sampling
//! protocol, BEV-derived features, and rubric scores.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{bev_classes, GridError, SemanticGrid};
use crate::text::fnv1a;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("eigendecomposition did not converge")]
    DegenerateCovariance,
    #[error("need more than {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("row {row} sums to {sum}, not 1")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("feature widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("clip length {clip_len} exceeds source length {frames}")]
    ClipTooShort { clip_len: usize, frames: usize },
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("malformed judge reply: {0}")]
    MalformedJudgeReply(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = core::result::Result<T, MetricError>;

/// `N × d` feature matrix tagged with the extractor that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.len();
            for r in &rows {
                if r.len() != d {
                    return Err(MetricError::WidthMismatch(d, r.len()));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(MetricError::NonFinite);
                }
            }
        }
        Ok(Self { rows, extractor_id: extractor_id.into() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

fn same_width(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.width() != b.width() {
        return Err(MetricError::WidthMismatch(a.width(), b.width()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    /// Sample covariance with the `N − 1` denominator.
    pub cov: DMatrix<f64>,
}

pub fn gaussian_stats(x: &FeatureSet) -> Result<GaussianStats> {
    let n = x.len();
    if n < 2 {
        return Err(MetricError::TooFewPoints { needed: 1, got: n });
    }
    let d = x.width();
    let mut mean = DVector::zeros(d);
    for r in &x.rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in &x.rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok(GaussianStats { mean, cov })
}

/// Added to covariances before any eigendecomposition.
pub const COV_RIDGE: f64 = 1e-6;

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-14, 100_000).ok_or(MetricError::DegenerateCovariance)
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^{½} Σ₂ Σ₁^{½})^{½})`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(MetricError::WidthMismatch(d, b.mean.len()));
    }
    let ridge = DMatrix::<f64>::identity(d, d) * COV_RIDGE;
    let s1 = &a.cov + &ridge;
    let s2 = &b.cov + &ridge;
    let e1 = eigen(s1.clone())?;
    let root = DVector::from_iterator(d, e1.eigenvalues.iter().map(|&l| libm::sqrt(l.max(0.0))));
    let s1_half = &e1.eigenvectors * DMatrix::from_diagonal(&root) * e1.eigenvectors.transpose();
    let inner = &s1_half * &s2 * &s1_half;
    let tr_cross: f64 = eigen(inner)?.eigenvalues.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    let diff = &a.mean - &b.mean;
    let fd = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_cross;
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KidEstimator {
    Biased,
    Unbiased,
}

/// `(x·y / d + 1)³`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len().max(1) as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let v = dot / d + 1.0;
    v * v * v
}

fn kernel_sum(x: &[Vec<f64>], y: &[Vec<f64>], skip_diagonal: bool) -> f64 {
    let mut s = 0.0;
    for (i, a) in x.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            if !(skip_diagonal && i == j) {
                s += poly_kernel(a, b);
            }
        }
    }
    s
}

/// Squared MMD under the cubic polynomial kernel.
pub fn kid(x: &FeatureSet, y: &FeatureSet, estimator: KidEstimator) -> Result<f64> {
    same_width(x, y)?;
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(MetricError::TooFewPoints { needed: 1, got: m.min(n) });
    }
    let (mf, nf) = (m as f64, n as f64);
    let cross = kernel_sum(&x.rows, &y.rows, false) / (mf * nf);
    Ok(match estimator {
        KidEstimator::Biased => {
            kernel_sum(&x.rows, &x.rows, false) / (mf * mf) + kernel_sum(&y.rows, &y.rows, false) / (nf * nf)
                - 2.0 * cross
        }
        KidEstimator::Unbiased => {
            kernel_sum(&x.rows, &x.rows, true) / (mf * (mf - 1.0))
                + kernel_sum(&y.rows, &y.rows, true) / (nf * (nf - 1.0))
                - 2.0 * cross
        }
    })
}

/// Unbiased KID averaged over consecutive blocks of `block` rows; returns
/// `(mean, standard deviation)` across blocks. Sets smaller than one block
/// form a single block.
pub fn kid_blocks(x: &FeatureSet, y: &FeatureSet, block: usize) -> Result<(f64, f64)> {
    same_width(x, y)?;
    let n = x.len().min(y.len());
    let size = block.max(2).min(n);
    let count = (n / size.max(1)).max(1);
    let mut vals = Vec::with_capacity(count);
    for b in 0..count {
        let take = |s: &FeatureSet| FeatureSet {
            rows: s.rows[b * size..(b + 1) * size].to_vec(),
            extractor_id: s.extractor_id.clone(),
        };
        vals.push(kid(&take(x), &take(y), KidEstimator::Unbiased)?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    Ok((mean, libm::sqrt(var)))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(x: &[Vec<f64>], k: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = x.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, b)| dist2(a, b)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Vec<f64>], radii: &[f64], probes: &[Vec<f64>]) -> f64 {
    let inside = probes
        .iter()
        .filter(|p| manifold.iter().zip(radii).any(|(m, &r)| dist2(p, m) <= r))
        .count();
    inside as f64 / probes.len() as f64
}

/// k-NN manifold precision (generated inside real) and recall (real inside
/// generated), with self-excluded radii and inclusive balls.
pub fn precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    same_width(real, gen)?;
    for s in [real, gen] {
        if s.len() <= k || k == 0 {
            return Err(MetricError::TooFewPoints { needed: k, got: s.len() });
        }
    }
    let rr = knn_radii(&real.rows, k);
    let rg = knn_radii(&gen.rows, k);
    Ok((coverage(&real.rows, &rr, &gen.rows), coverage(&gen.rows, &rg, &real.rows)))
}

/// `exp(mean_n KL(p(y|x_n) ‖ p̄(y)))` with `0·log 0 = 0`.
pub fn inception_style_score(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(MetricError::TooFewPoints { needed: 0, got: 0 });
    }
    let kc = probs[0].len();
    let mut marginal = alloc::vec![0.0; kc];
    for (row, p) in probs.iter().enumerate() {
        if p.len() != kc {
            return Err(MetricError::WidthMismatch(kc, p.len()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(MetricError::RowNotNormalized { row, sum });
        }
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = probs.len() as f64;
    marginal.iter_mut().for_each(|m| *m /= n);
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * libm::log(v / m))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(libm::exp(kl))
}

/// Clip and frame sampling counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub clips_n: usize,
    pub clip_len: usize,
    pub frames_per_clip: usize,
}

impl ProtocolConfig {
    pub fn paper() -> Self {
        Self { clips_n: 10_000, clip_len: 16, frames_per_clip: 5 }
    }

    /// Clip length matches the 8-frame desk scenes.
    pub fn desk() -> Self {
        Self { clips_n: 200, clip_len: 8, frames_per_clip: 5 }
    }
}

/// Evenly spaced indices `round_half_up(i·(L−1)/(n−1))` for `i in 0..n`.
pub fn frame_indices(clip_len: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > clip_len {
        return Err(MetricError::InvalidProtocol(format!("{n} frames from a {clip_len}-frame clip")));
    }
    if n == 1 {
        return Ok(alloc::vec![0]);
    }
    let (l, d) = (clip_len - 1, n - 1);
    Ok((0..n).map(|i| (2 * i * l + d) / (2 * d)).collect())
}

/// A clip window: `clip_len` frames of `sources[source]` from `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipWindow {
    pub source: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub windows: Vec<ClipWindow>,
    /// Offsets within each window used for frame-level features.
    pub frame_offsets: Vec<usize>,
}

/// Uniform draws of source and start per clip, seeded.
pub fn clip_protocol(source_frames: &[usize], cfg: &ProtocolConfig, seed: u64) -> Result<ClipSample> {
    if source_frames.is_empty() {
        return Err(MetricError::TooFewPoints { needed: 0, got: 0 });
    }
    for &f in source_frames {
        if cfg.clip_len > f {
            return Err(MetricError::ClipTooShort { clip_len: cfg.clip_len, frames: f });
        }
    }
    let frame_offsets = frame_indices(cfg.clip_len, cfg.frames_per_clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = (0..cfg.clips_n)
        .map(|_| {
            let source = rng.random_range(0..source_frames.len());
            let start = rng.random_range(0..=source_frames[source] - cfg.clip_len);
            ClipWindow { source, start }
        })
        .collect();
    Ok(ClipSample { windows, frame_offsets })
}

/// Frame feature width: `K` histogram bins plus the `(x, y)` centroid.
pub fn frame_feature_width(num_classes: usize) -> usize {
    num_classes + 2
}

/// Video feature width: mean frame feature, mean and std of centroid steps.
pub fn video_feature_width(num_classes: usize) -> usize {
    num_classes + 6
}

/// Normalized BEV class histogram and the mean `(x, y)` of non-Free BEV
/// cells, in voxel units; an all-Free frame has its centroid at the grid
/// center.
pub fn bev_frame_features(grid: &SemanticGrid, frame: usize) -> Result<Vec<f64>> {
    let spec = grid.spec();
    let k = spec.num_classes;
    let free = spec.free_id();
    let classes = bev_classes(grid, frame)?;
    let mut out = alloc::vec![0.0; k + 2];
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &c) in classes.iter().enumerate() {
        out[c as usize] += 1.0;
        if c != free {
            sx += (i / spec.size_y) as f64;
            sy += (i % spec.size_y) as f64;
            n += 1;
        }
    }
    let cells = classes.len() as f64;
    out[..k].iter_mut().for_each(|v| *v /= cells);
    let (cx, cy) = if n == 0 {
        ((spec.size_x as f64 - 1.0) / 2.0, (spec.size_y as f64 - 1.0) / 2.0)
    } else {
        (sx / n as f64, sy / n as f64)
    };
    out[k] = cx;
    out[k + 1] = cy;
    Ok(out)
}

/// Clip feature: mean frame feature, then mean and std of the per-step
/// centroid displacement.
pub fn bev_video_features(grid: &SemanticGrid) -> Result<Vec<f64>> {
    let k = grid.spec().num_classes;
    let frames: Vec<Vec<f64>> = (0..grid.frames()).map(|f| bev_frame_features(grid, f)).collect::<Result<_>>()?;
    let nf = frames.len().max(1) as f64;
    let mut out = alloc::vec![0.0; k + 6];
    for fr in &frames {
        for (o, v) in out.iter_mut().zip(fr) {
            *o += v / nf;
        }
    }
    let steps: Vec<(f64, f64)> = frames.windows(2).map(|w| (w[1][k] - w[0][k], w[1][k + 1] - w[0][k + 1])).collect();
    if !steps.is_empty() {
        let ns = steps.len() as f64;
        let (mx, my) = (steps.iter().map(|s| s.0).sum::<f64>() / ns, steps.iter().map(|s| s.1).sum::<f64>() / ns);
        let vx = steps.iter().map(|s| (s.0 - mx) * (s.0 - mx)).sum::<f64>() / ns;
        let vy = steps.iter().map(|s| (s.1 - my) * (s.1 - my)).sum::<f64>() / ns;
        out[k + 2..].copy_from_slice(&[mx, my, libm::sqrt(vx), libm::sqrt(vy)]);
    }
    Ok(out)
}

/// BEV class histogram as a class-probability row for the score above.
pub fn bev_class_probs(grid: &SemanticGrid, frame: usize) -> Result<Vec<f64>> {
    let k = grid.spec().num_classes;
    let mut f = bev_frame_features(grid, frame)?;
    f.truncate(k);
    Ok(f)
}

/// Three 1–5 judge axes and their locally computed mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub completeness: u8,
    pub structural: u8,
    pub semantic_alignment: u8,
    pub mean: f64,
    pub justification: String,
}

impl RubricScore {
    pub fn new(completeness: u8, structural: u8, semantic_alignment: u8, justification: String) -> Result<Self> {
        for (name, v) in [("completeness", completeness), ("structural", structural), ("semantic_alignment", semantic_alignment)] {
            if !(1..=5).contains(&v) {
                return Err(MetricError::MalformedJudgeReply(format!("{name}={v} outside 1..=5")));
            }
        }
        let mean = (completeness as f64 + structural as f64 + semantic_alignment as f64) / 3.0;
        Ok(Self { completeness, structural, semantic_alignment, mean, justification })
    }
}

#[derive(Deserialize)]
struct WireRubric {
    completeness: Option<serde_json::Value>,
    structural: Option<serde_json::Value>,
    semantic_alignment: Option<serde_json::Value>,
    #[serde(default)]
    justification: Option<String>,
}

fn axis(name: &str, v: Option<serde_json::Value>) -> Result<u8> {
    let v = v.ok_or_else(|| MetricError::MalformedJudgeReply(format!("missing {name}")))?;
    let n = v
        .as_i64()
        .ok_or_else(|| MetricError::MalformedJudgeReply(format!("{name} is not an integer: {v}")))?;
    if !(1..=5).contains(&n) {
        return Err(MetricError::MalformedJudgeReply(format!("{name}={n} outside 1..=5")));
    }
    Ok(n as u8)
}

/// Parses a judge reply object; extra fields are ignored and any supplied
/// mean is recomputed.
pub fn parse_rubric(json: &str) -> Result<RubricScore> {
    let w: WireRubric =
        serde_json::from_str(json).map_err(|e| MetricError::MalformedJudgeReply(format!("{e}")))?;
    RubricScore::new(
        axis("completeness", w.completeness)?,
        axis("structural", w.structural)?,
        axis("semantic_alignment", w.semantic_alignment)?,
        w.justification.unwrap_or_default(),
    )
}

/// Offline judge: axes derived from a hash of the caption.
pub fn stub_judge(caption: &str) -> RubricScore {
    let h = fnv1a(caption.as_bytes(), 0x6a75_6467_65);
    let ax = |i: u32| 1 + ((h >> (8 * i)) % 5) as u8;
    RubricScore::new(ax(0), ax(1), ax(2), String::from("offline stub judge"))
        .unwrap_or_else(|_| unreachable!("stub axes are in range"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfigEcho {
    pub n_real: usize,
    pub n_gen: usize,
    pub seed: u64,
    pub extractor_id: String,
    pub kid_block: usize,
    pub knn_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fd: f64,
    pub kid: f64,
    pub kid_std: f64,
    pub precision: f64,
    pub recall: f64,
    pub is_score: f64,
    pub config: MetricConfigEcho,
}

#[cfg(test)]
mod tests;
