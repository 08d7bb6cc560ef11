//! Occupancy ↔ latent conversion.
//!
//! Latent clips are `[C, F, H, W]` tensors. Token sequences are
//! `[F, S, C·p²]` where token `s = ty·(W/p) + tx` and feature
//! `c·p² + dy·p + dx` holds latent `(c, ty·p + dy, tx·p + dx)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grid::{GridError, GridSpec, SemanticGrid};
use crate::nn::Linear;
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::params::param_tree;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("embedding table is {rows}×{cols}, grid has {classes} classes")]
    TableShapeMismatch {
        rows: usize,
        cols: usize,
        classes: usize,
    },
    #[error("patch size {p} does not divide {h}×{w}")]
    PatchSizeIndivisible { p: usize, h: usize, w: usize },
    #[error("latent has {got} channels, layout needs {expected}")]
    ChannelLayoutMismatch { expected: usize, got: usize },
    #[error("downsample {factor} does not divide {size}")]
    DownsampleIndivisible { factor: usize, size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = core::result::Result<T, CodecError>;

/// `K × e` lookup table from class id to embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    table: Tensor,
}

impl EmbeddingTable {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.rank() != 2 || !table.is_finite() {
            return Err(CodecError::ShapeMismatch(format!(
                "embedding table {:?} must be a finite matrix",
                table.shape()
            )));
        }
        Ok(Self { table })
    }

    pub fn one_hot(k: usize) -> Self {
        Self {
            table: Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 }),
        }
    }

    /// Gaussian rows orthonormalized by Gram-Schmidt. When `k > e` only the
    /// first `e` rows can be mutually orthogonal; the rest are unit-norm.
    pub fn orthonormal<R: Rng + ?Sized>(k: usize, e: usize, rng: &mut R) -> Self {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        for r in 0..k {
            loop {
                let mut v: Vec<f64> = (0..e).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                if r < e {
                    for u in &rows {
                        let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                        for (a, b) in v.iter_mut().zip(u) {
                            *a -= d * b;
                        }
                    }
                }
                let n = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
                if n > 1e-6 {
                    v.iter_mut().for_each(|a| *a /= n);
                    rows.push(v);
                    break;
                }
            }
        }
        let data = rows.into_iter().flatten().map(|v| v as f32).collect();
        Self {
            table: Tensor::new(&[k, e], data).expect("k×e table"),
        }
    }

    pub fn rows(&self) -> usize {
        self.table.dim(0)
    }

    pub fn width(&self) -> usize {
        self.table.dim(1)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Shape of [`embed_fold`] output.
pub fn fold_shape(spec: &GridSpec, frames: usize, e: usize) -> [usize; 4] {
    [spec.size_z * e, frames, spec.size_x, spec.size_y]
}

/// Embeds every voxel and folds depth into channels: channel `iz·e + j`
/// holds `table[id(ix, iy, iz), j]`.
pub fn embed_fold(grid: &SemanticGrid, table: &EmbeddingTable) -> Result<Tensor> {
    let spec = grid.spec();
    if table.rows() != spec.num_classes {
        return Err(CodecError::TableShapeMismatch {
            rows: table.rows(),
            cols: table.width(),
            classes: spec.num_classes,
        });
    }
    let e = table.width();
    let (f, x, y, z) = (grid.frames(), spec.size_x, spec.size_y, spec.size_z);
    let plane = f * x * y;
    let mut out = vec![0.0f32; z * e * plane];
    let t = table.table.data();
    for (site, col) in grid.ids().chunks(z).enumerate() {
        for (iz, &id) in col.iter().enumerate() {
            let row = &t[id as usize * e..(id as usize + 1) * e];
            for (j, &v) in row.iter().enumerate() {
                out[(iz * e + j) * plane + site] = v;
            }
        }
    }
    Ok(Tensor::new(&fold_shape(spec, f, e), out)?)
}

/// `mu + sigma ⊙ noise`.
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() || mu.shape() != noise.shape() {
        return Err(CodecError::ShapeMismatch(format!(
            "mu {:?}, sigma {:?}, noise {:?}",
            mu.shape(),
            sigma.shape(),
            noise.shape()
        )));
    }
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(noise.data())
        .map(|((m, s), n)| m + s * n)
        .collect();
    Ok(Tensor::new(mu.shape(), data)?)
}

fn latent_dims(latent: &[usize]) -> Result<[usize; 4]> {
    match latent {
        &[c, f, h, w] => Ok([c, f, h, w]),
        s => Err(CodecError::ShapeMismatch(format!("latent must be [C, F, H, W], got {s:?}"))),
    }
}

fn check_patch(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(CodecError::PatchSizeIndivisible { p, h, w });
    }
    Ok(())
}

const PATCH_PERM: [usize; 6] = [1, 2, 4, 0, 3, 5];
const UNPATCH_PERM: [usize; 6] = [3, 0, 1, 4, 2, 5];

pub fn patchify(latent: &Tensor, p: usize) -> Result<Tensor> {
    let [c, f, h, w] = latent_dims(latent.shape())?;
    check_patch(h, w, p)?;
    let t = latent
        .clone()
        .reshape(&[c, f, h / p, p, w / p, p])?
        .permute(&PATCH_PERM)?;
    Ok(t.reshape(&[f, (h / p) * (w / p), c * p * p])?)
}

pub fn unpatchify(tokens: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    check_patch(h, w, p)?;
    let s = tokens.shape();
    if s.len() != 3 || s[1] != (h / p) * (w / p) || s[2] != c * p * p {
        return Err(CodecError::ShapeMismatch(format!(
            "tokens {s:?} for C={c}, {h}×{w}, p={p}"
        )));
    }
    let f = s[0];
    let t = tokens
        .clone()
        .reshape(&[f, h / p, w / p, c, p, p])?
        .permute(&UNPATCH_PERM)?;
    Ok(t.reshape(&[c, f, h, w])?)
}

/// [`patchify`] recorded on a graph.
pub fn patchify_var(g: &mut Graph, latent: Var, p: usize) -> Result<Var> {
    let [c, f, h, w] = latent_dims(g.shape(latent))?;
    check_patch(h, w, p)?;
    let t = g.reshape(latent, &[c, f, h / p, p, w / p, p])?;
    let t = g.permute(t, &PATCH_PERM)?;
    Ok(g.reshape(t, &[f, (h / p) * (w / p), c * p * p])?)
}

/// [`unpatchify`] recorded on a graph.
pub fn unpatchify_var(g: &mut Graph, tokens: Var, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    check_patch(h, w, p)?;
    let f = g.shape(tokens)[0];
    let t = g.reshape(tokens, &[f, h / p, w / p, c, p, p])?;
    let t = g.permute(t, &UNPATCH_PERM)?;
    Ok(g.reshape(t, &[c, f, h, w])?)
}

/// Lossless-at-downsample-1 codec: channel `iz·K + k` of a latent site is
/// the fraction of the `r × r` voxel tile at depth `iz` holding class `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceCodec {
    pub downsample: usize,
}

impl ReferenceCodec {
    pub fn new(downsample: usize) -> Self {
        Self { downsample }
    }

    pub fn channels(spec: &GridSpec) -> usize {
        spec.size_z * spec.num_classes
    }

    fn check(&self, spec: &GridSpec) -> Result<()> {
        let r = self.downsample;
        for size in [spec.size_x, spec.size_y] {
            if r == 0 || size % r != 0 {
                return Err(CodecError::DownsampleIndivisible { factor: r, size });
            }
        }
        Ok(())
    }

    pub fn latent_shape(&self, spec: &GridSpec, frames: usize) -> [usize; 4] {
        let r = self.downsample;
        [Self::channels(spec), frames, spec.size_x / r, spec.size_y / r]
    }

    pub fn encode(&self, grid: &SemanticGrid) -> Result<Tensor> {
        let spec = grid.spec();
        self.check(spec)?;
        let r = self.downsample;
        let [c, f, h, w] = self.latent_shape(spec, grid.frames());
        let (z, k) = (spec.size_z, spec.num_classes);
        let mut out = vec![0.0f32; c * f * h * w];
        let inc = 1.0 / (r * r) as f32;
        for fi in 0..f {
            for x in 0..spec.size_x {
                for y in 0..spec.size_y {
                    let site = (fi * h + x / r) * w + y / r;
                    let base = grid.index(fi, x, y, 0);
                    for iz in 0..z {
                        let id = grid.ids()[base + iz] as usize;
                        out[(iz * k + id) * f * h * w + site] += inc;
                    }
                }
            }
        }
        Ok(Tensor::new(&[c, f, h, w], out)?)
    }

    /// Per-tile majority class at each depth (argmax; ties go to the lower
    /// id). `spec` is the full-resolution grid geometry.
    pub fn decode(&self, latent: &Tensor, spec: &GridSpec) -> Result<SemanticGrid> {
        self.check(spec)?;
        let [c, f, h, w] = latent_dims(latent.shape())?;
        let expected = Self::channels(spec);
        if c != expected {
            return Err(CodecError::ChannelLayoutMismatch { expected, got: c });
        }
        let r = self.downsample;
        if h * r != spec.size_x || w * r != spec.size_y {
            return Err(CodecError::ShapeMismatch(format!(
                "latent {h}×{w} at downsample {r} vs grid {}×{}",
                spec.size_x, spec.size_y
            )));
        }
        let (z, k) = (spec.size_z, spec.num_classes);
        let d = latent.data();
        let plane = f * h * w;
        let mut ids = vec![0u8; f * spec.frame_len()];
        for fi in 0..f {
            for lx in 0..h {
                for ly in 0..w {
                    let site = (fi * h + lx) * w + ly;
                    for iz in 0..z {
                        let mut best = 0usize;
                        for class in 1..k {
                            if d[(iz * k + class) * plane + site] > d[(iz * k + best) * plane + site] {
                                best = class;
                            }
                        }
                        for dx in 0..r {
                            for dy in 0..r {
                                let (x, y) = (lx * r + dx, ly * r + dy);
                                ids[((fi * spec.size_x + x) * spec.size_y + y) * z + iz] = best as u8;
                            }
                        }
                    }
                }
            }
        }
        Ok(SemanticGrid::new(spec.clone(), f, ids)?)
    }
}

/// `0.5 (μ² + σ² − 1 − 2 ln σ)`, the KL divergence of `N(μ, σ²)` from `N(0, 1)`.
pub fn gaussian_kl(mu: f32, sigma: f32) -> f32 {
    0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * libm::logf(sigma))
}

/// Mean voxel cross-entropy plus `beta` times mean latent KL.
///
/// `logits` is `[..., K]` with one row per voxel in grid storage order.
pub fn vae_loss(logits: &Tensor, target: &SemanticGrid, mu: &Tensor, sigma: &Tensor, beta: f32) -> Result<f32> {
    let k = target.spec().num_classes;
    if logits.shape().last() != Some(&k) || logits.len() != target.ids().len() * k {
        return Err(CodecError::ShapeMismatch(format!(
            "logits {:?} for {} voxels of {k} classes",
            logits.shape(),
            target.ids().len()
        )));
    }
    if mu.shape() != sigma.shape() {
        return Err(CodecError::ShapeMismatch(format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape())));
    }
    let mut ce = 0.0f64;
    for (row, &id) in logits.data().chunks(k).zip(target.ids()) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max as f64 + libm::log(row.iter().map(|&v| libm::exp((v - max) as f64)).sum::<f64>());
        ce += lse - row[id as usize] as f64;
    }
    ce /= target.ids().len() as f64;
    let kl: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| gaussian_kl(m, s) as f64)
        .sum::<f64>()
        / mu.len().max(1) as f64;
    let loss = (ce + beta as f64 * kl) as f32;
    if !loss.is_finite() {
        return Err(TensorError::NumericalFailure { op: "vae_loss" }.into());
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub downsample: usize,
    pub embed_dim: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub depth_bins: usize,
    pub num_classes: usize,
}

impl VaeConfig {
    /// 224×224×16 input, 8× spatial compression to 16 latent channels.
    pub fn paper() -> Self {
        Self {
            downsample: 8,
            embed_dim: 8,
            latent_channels: 16,
            hidden: 64,
            depth_bins: 16,
            num_classes: 11,
        }
    }

    pub fn desk() -> Self {
        Self {
            downsample: 2,
            embed_dim: 8,
            latent_channels: 4,
            hidden: 64,
            depth_bins: 8,
            num_classes: 11,
        }
    }

    pub fn folded_channels(&self) -> usize {
        self.depth_bins * self.embed_dim
    }

    /// `[C, F, X/r, Y/r]` for an `X × Y` input.
    pub fn latent_shape(&self, frames: usize, x: usize, y: usize) -> [usize; 4] {
        let r = self.downsample;
        [self.latent_channels, frames, x / r, y / r]
    }
}

param_tree! {
    /// Strided patch encoder/decoder: each `r × r` tile is one latent site.
    pub struct VaeParams { enc1: Linear, enc2: Linear, dec1: Linear, dec2: Linear }
}

impl VaeParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> Self {
        let r2 = cfg.downsample * cfg.downsample;
        Self {
            enc1: Linear::init(cfg.folded_channels() * r2, cfg.hidden, rng),
            enc2: Linear::init(cfg.hidden, 2 * cfg.latent_channels, rng),
            dec1: Linear::init(cfg.latent_channels, cfg.hidden, rng),
            dec2: Linear::init(cfg.hidden, r2 * cfg.depth_bins * cfg.num_classes, rng),
        }
    }
}

/// Encoder graph: folded `[D·e, F, X, Y]` to `(mu, logvar)` latents.
pub fn vae_encode_var(g: &mut Graph, cfg: &VaeConfig, p: &VaeParams<Var>, x: Var) -> Result<(Var, Var)> {
    let [_, f, h, w] = latent_dims(g.shape(x))?;
    let r = cfg.downsample;
    let (lh, lw) = (h / r, w / r);
    let t = patchify_var(g, x, r)?;
    let t = p.enc1.forward(g, t)?;
    let t = g.gelu(t)?;
    let t = p.enc2.forward(g, t)?;
    let c = cfg.latent_channels;
    let parts = g.split(t, 2, &[c, c])?;
    let mu = unpatchify_var(g, parts[0], c, lh, lw, 1)?;
    let logvar = unpatchify_var(g, parts[1], c, lh, lw, 1)?;
    debug_assert_eq!(g.shape(mu), &[c, f, lh, lw]);
    Ok((mu, logvar))
}

/// Decoder graph: latent `[C, F, H, W]` to logits `[F, X, Y, D, K]`.
pub fn vae_decode_var(g: &mut Graph, cfg: &VaeConfig, p: &VaeParams<Var>, z: Var) -> Result<Var> {
    let [_, f, h, w] = latent_dims(g.shape(z))?;
    let r = cfg.downsample;
    let (d, k) = (cfg.depth_bins, cfg.num_classes);
    let t = patchify_var(g, z, 1)?;
    let t = p.dec1.forward(g, t)?;
    let t = g.gelu(t)?;
    let t = p.dec2.forward(g, t)?;
    let t = unpatchify_var(g, t, d * k, h * r, w * r, r)?;
    let t = g.reshape(t, &[d, k, f, h * r, w * r])?;
    Ok(g.permute(t, &[2, 3, 4, 0, 1])?)
}

/// Returns `(mu, sigma)` with `sigma = exp(logvar / 2)`.
pub fn vae_encode(cfg: &VaeConfig, params: &VaeParams<Tensor>, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = params.map("", &mut |_, t| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let (mu, logvar) = vae_encode_var(&mut g, cfg, &p, xv)?;
    let sigma = g.value(logvar).map(|v| libm::expf(0.5 * v));
    Ok((g.value(mu).clone(), sigma))
}

pub fn vae_decode(cfg: &VaeConfig, params: &VaeParams<Tensor>, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.map("", &mut |_, t| g.constant(t.clone()));
    let zv = g.constant(z.clone());
    let out = vae_decode_var(&mut g, cfg, &p, zv)?;
    Ok(g.value(out).clone())
}

/// Argmax class per voxel of `[F, X, Y, D, K]` logits.
pub fn logits_to_grid(logits: &Tensor, spec: &GridSpec) -> Result<SemanticGrid> {
    let k = spec.num_classes;
    let ids: Vec<u8> = logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let frames = ids.len() / spec.frame_len().max(1);
    Ok(SemanticGrid::new(spec.clone(), frames, ids)?)
}

/// Records the VAE training objective for `grid` with the given
/// reparameterization noise; returns the scalar loss.
pub fn vae_objective(
    g: &mut Graph,
    cfg: &VaeConfig,
    p: &VaeParams<Var>,
    x: Var,
    grid: &SemanticGrid,
    noise: &Tensor,
    beta: f32,
) -> Result<Var> {
    let (mu, logvar) = vae_encode_var(g, cfg, p, x)?;
    let noise = g.constant(noise.clone());
    let half = g.scale(logvar, 0.5)?;
    let sigma = g.exp(half)?;
    let spread = g.mul(sigma, noise)?;
    let z = g.add(mu, spread)?;
    let logits = vae_decode_var(g, cfg, p, z)?;

    let k = cfg.num_classes;
    let n = grid.ids().len();
    let onehot = Tensor::from_fn(&[n, k], |i| {
        if grid.ids()[i / k] as usize == i % k { 1.0 } else { 0.0 }
    });
    let onehot = g.constant(onehot);
    let flat = g.reshape(logits, &[n, k])?;
    let logp = g.log_softmax(flat)?;
    let picked = g.mul(logp, onehot)?;
    let ce = g.mean_all(picked)?;
    let ce = g.scale(ce, -(k as f32))?;

    // KL = 0.5 · mean(μ² + e^{logvar} − 1 − logvar)
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar)?;
    let s = g.add(mu2, var)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0)?;
    let kl = g.mean_all(s)?;
    let kl = g.scale(kl, 0.5 * beta)?;
    Ok(g.add(ce, kl)?)
}

/// One AdamW step on the VAE objective for a single grid; returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn vae_train_step<R: Rng + ?Sized>(
    cfg: &VaeConfig,
    params: &mut VaeParams<Tensor>,
    state: &mut AdamState,
    opt: &AdamWConfig,
    table: &EmbeddingTable,
    grid: &SemanticGrid,
    beta: f32,
    rng: &mut R,
) -> Result<f32> {
    let x = embed_fold(grid, table)?;
    let s = grid.spec();
    let noise = Tensor::randn(&cfg.latent_shape(grid.frames(), s.size_x, s.size_y), 1.0, rng);
    let mut g = Graph::new().with_finite_checks(true);
    let p = params.map("", &mut |_, t| g.param(t.clone()));
    let xv = g.constant(x);
    let loss = vae_objective(&mut g, cfg, &p, xv, grid, &noise, beta)?;
    g.check()?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let gp = p.map("", &mut |_, v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v))));
    adamw_step(opt, state, params, &gp);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FREE, ROAD, VEHICLE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(x: usize, y: usize, z: usize) -> GridSpec {
        GridSpec {
            size_x: x,
            size_y: y,
            size_z: z,
            x_range: [0.0, 0.4 * x as f32],
            y_range: [0.0, 0.4 * y as f32],
            z_range: [0.0, 0.4 * z as f32],
            ..GridSpec::default()
        }
    }

    fn random_grid(s: GridSpec, f: usize, rng: &mut ChaCha8Rng) -> SemanticGrid {
        let n = f * s.frame_len();
        let k = s.num_classes as u8;
        SemanticGrid::new(s, f, (0..n).map(|_| rng.random_range(0..k)).collect()).unwrap()
    }

    #[test]
    fn paper_fold_has_128_channels() {
        let s = GridSpec {
            size_x: 224,
            size_y: 224,
            voxel_size: 80.0 / 224.0,
            ..GridSpec::default()
        };
        assert_eq!(fold_shape(&s, 8, 8), [128, 8, 224, 224]);
    }

    #[test]
    fn constant_grid_repeats_table_row_per_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = EmbeddingTable::orthonormal(11, 8, &mut rng);
        let s = spec(2, 3, 4);
        let n = s.frame_len();
        let g = SemanticGrid::new(s, 1, vec![ROAD; n]).unwrap();
        let x = embed_fold(&g, &table).unwrap();
        let row = &table.table().data()[ROAD as usize * 8..ROAD as usize * 8 + 8];
        for c in 0..32 {
            for site in 0..6 {
                assert_eq!(x.data()[c * 6 + site], row[c % 8]);
            }
        }
    }

    #[test]
    fn one_hot_fold_marks_voxel_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(spec(2, 2, 2), 1, &mut rng);
        let x = embed_fold(&g, &EmbeddingTable::one_hot(11)).unwrap();
        for c in 0..22 {
            for ix in 0..2 {
                for iy in 0..2 {
                    let v = x.data()[(c * 2 + ix) * 2 + iy];
                    let hit = g.get(0, ix, iy, c / 11) as usize == c % 11;
                    assert_eq!(v, if hit { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn fold_rejects_wrong_table() {
        let g = SemanticGrid::free(spec(1, 1, 1), 1).unwrap();
        assert!(matches!(
            embed_fold(&g, &EmbeddingTable::one_hot(5)),
            Err(CodecError::TableShapeMismatch { rows: 5, .. })
        ));
    }

    #[test]
    fn orthonormal_table_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = EmbeddingTable::orthonormal(6, 8, &mut rng);
        let d = t.table().data();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f32 = (0..8).map(|c| d[i * 8 + c] * d[j * 8 + c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn reparameterize_cases() {
        let t = |v: &[f32]| Tensor::new(&[v.len()], v.to_vec()).unwrap();
        let z = reparameterize(&t(&[1.0, 2.0]), &t(&[0.5, 0.5]), &t(&[2.0, -2.0])).unwrap();
        assert_eq!(z.data(), &[2.0, 1.0]);
        let mu = t(&[0.3, -1.0]);
        assert_eq!(reparameterize(&mu, &t(&[0.0, 0.0]), &t(&[5.0, 7.0])).unwrap(), mu);
        let n = t(&[0.1, 0.9]);
        assert_eq!(reparameterize(&t(&[0.0, 0.0]), &t(&[1.0, 1.0]), &n).unwrap(), n);
        assert!(reparameterize(&mu, &t(&[1.0]), &n).is_err());
    }

    #[test]
    fn reparameterize_gradient_wrt_mu_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = Tensor::uniform(&[5], 1.0, &mut rng).map(f32::abs);
        let noise = Tensor::randn(&[5], 1.0, &mut rng);
        let mu = Tensor::uniform(&[5], 1.0, &mut rng);
        for i in 0..5 {
            let eps = 1e-2;
            let mut plus = mu.clone();
            plus.data_mut()[i] += eps;
            let mut minus = mu.clone();
            minus.data_mut()[i] -= eps;
            let zp = reparameterize(&plus, &sigma, &noise).unwrap();
            let zm = reparameterize(&minus, &sigma, &noise).unwrap();
            for j in 0..5 {
                let d = (zp.data()[j] - zm.data()[j]) / (2.0 * eps);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn paper_patch_grid_has_196_tokens() {
        let x = Tensor::zeros(&[16, 2, 28, 28]);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[2, 196, 64]);
    }

    #[test]
    fn patch_layout_matches_index_formula() {
        let x = Tensor::from_fn(&[3, 2, 4, 6], |i| i as f32);
        let p = 2;
        let t = patchify(&x, p).unwrap();
        for f in 0..2 {
            for ty in 0..2 {
                for tx in 0..3 {
                    for c in 0..3 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let s = ty * 3 + tx;
                                let got = t.data()[(f * 6 + s) * 12 + c * 4 + dy * 2 + dx];
                                let want = x.data()[((c * 2 + f) * 4 + ty * 2 + dy) * 6 + tx * 2 + dx];
                                assert_eq!(got, want);
                            }
                        }
                    }
                }
            }
        }
        assert!(matches!(patchify(&x, 4), Err(CodecError::PatchSizeIndivisible { .. })));
    }

    #[test]
    fn patch_size_one_is_a_reshape() {
        let x = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5);
        let t = patchify(&x, 1).unwrap();
        assert_eq!(t.shape(), &[1, 9, 2]);
        assert_eq!(unpatchify(&t, 2, 3, 3, 1).unwrap(), x);
    }

    #[test]
    fn reference_round_trip_and_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(spec(4, 4, 2), 2, &mut rng);
        let c = ReferenceCodec::new(1);
        assert_eq!(c.decode(&c.encode(&g).unwrap(), g.spec()).unwrap(), g);

        let s = spec(2, 2, 1);
        let tile = SemanticGrid::new(s.clone(), 1, vec![ROAD, ROAD, ROAD, VEHICLE]).unwrap();
        let c2 = ReferenceCodec::new(2);
        let dec = c2.decode(&c2.encode(&tile).unwrap(), &s).unwrap();
        assert_eq!(dec.ids(), &[ROAD; 4]);

        let free = SemanticGrid::free(spec(4, 4, 2), 1).unwrap();
        for r in [1, 2, 4] {
            let c = ReferenceCodec::new(r);
            assert_eq!(c.decode(&c.encode(&free).unwrap(), free.spec()).unwrap(), free);
        }
    }

    #[test]
    fn reference_tie_breaks_to_lower_id() {
        let s = spec(2, 2, 1);
        let tile = SemanticGrid::new(s.clone(), 1, vec![FREE, VEHICLE, FREE, VEHICLE]).unwrap();
        let c = ReferenceCodec::new(2);
        let dec = c.decode(&c.encode(&tile).unwrap(), &s).unwrap();
        assert_eq!(dec.ids(), &[VEHICLE; 4]);
    }

    #[test]
    fn reference_decode_checks_channels() {
        let s = spec(2, 2, 1);
        let c = ReferenceCodec::new(1);
        assert_eq!(
            c.decode(&Tensor::zeros(&[5, 1, 2, 2]), &s),
            Err(CodecError::ChannelLayoutMismatch { expected: 11, got: 5 })
        );
    }

    #[test]
    fn vae_loss_closed_forms() {
        assert!((gaussian_kl(1.0, 1.0) - 0.5).abs() < 1e-7);
        let s = spec(1, 2, 1);
        let g = SemanticGrid::new(s, 1, vec![ROAD, FREE]).unwrap();
        let logits = Tensor::from_fn(&[2, 11], |i| {
            let want = [ROAD, FREE][i / 11] as usize;
            if i % 11 == want { 100.0 } else { 0.0 }
        });
        let mu = Tensor::zeros(&[3]);
        let sigma = Tensor::full(&[3], 1.0);
        assert!(vae_loss(&logits, &g, &mu, &sigma, 1.0).unwrap() < 1e-6);

        let flat = Tensor::zeros(&[2, 11]);
        let ce = vae_loss(&flat, &g, &Tensor::full(&[3], 2.0), &sigma, 0.0).unwrap();
        assert!((ce - libm::logf(11.0)).abs() < 1e-5);
        let with_kl = vae_loss(&flat, &g, &Tensor::full(&[1], 1.0), &Tensor::full(&[1], 1.0), 2.0).unwrap();
        assert!((with_kl - libm::logf(11.0) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tiny_vae_shapes_and_training_reduce_loss() {
        let cfg = VaeConfig {
            depth_bins: 2,
            hidden: 32,
            ..VaeConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = EmbeddingTable::orthonormal(11, cfg.embed_dim, &mut rng);
        let mut params = VaeParams::init(&cfg, &mut rng);
        let mut g = SemanticGrid::free(spec(4, 4, 2), 2).unwrap();
        for f in 0..2 {
            for x in 0..4 {
                for y in 0..4 {
                    g.set(f, x, y, 0, ROAD);
                }
            }
            g.set(f, f, 1, 1, VEHICLE);
        }
        let x = embed_fold(&g, &table).unwrap();
        let (mu, sigma) = vae_encode(&cfg, &params, &x).unwrap();
        assert_eq!(mu.shape(), &cfg.latent_shape(2, 4, 4));
        assert_eq!(sigma.shape(), mu.shape());
        let logits = vae_decode(&cfg, &params, &mu).unwrap();
        assert_eq!(logits.shape(), &[2, 4, 4, 2, 11]);

        let opt = AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        };
        let mut st = AdamState::new(&params);
        let first = vae_train_step(&cfg, &mut params, &mut st, &opt, &table, &g, 0.01, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..150 {
            last = vae_train_step(&cfg, &mut params, &mut st, &opt, &table, &g, 0.01, &mut rng).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
        let (mu, _) = vae_encode(&cfg, &params, &x).unwrap();
        let recon = logits_to_grid(&vae_decode(&cfg, &params, &mu).unwrap(), g.spec()).unwrap();
        let agree = recon.ids().iter().zip(g.ids()).filter(|(a, b)| a == b).count();
        assert!(agree as f32 / g.ids().len() as f32 > 0.9);
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let cfg = VaeConfig {
            depth_bins: 1,
            hidden: 8,
            latent_channels: 2,
            ..VaeConfig::desk()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = EmbeddingTable::orthonormal(11, cfg.embed_dim, &mut rng);
        let params = VaeParams::init(&cfg, &mut rng);
        let g = random_grid(spec(2, 2, 1), 1, &mut rng);
        let x = embed_fold(&g, &table).unwrap();
        let (mu, sigma) = vae_encode(&cfg, &params, &x).unwrap();
        let logits = vae_decode(&cfg, &params, &mu).unwrap();
        let expected = vae_loss(&logits, &g, &mu, &sigma, 0.5).unwrap();
        let mut gr = Graph::new();
        let p = params.map("", &mut |_, t| gr.constant(t.clone()));
        let xv = gr.constant(x);
        let zero = Tensor::zeros(mu.shape());
        let loss = vae_objective(&mut gr, &cfg, &p, xv, &g, &zero, 0.5).unwrap();
        let got = gr.value(loss).item();
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn reference_codec_is_lossless(ids in proptest::collection::vec(0u8..11, 8 * 8 * 4)) {
            let g = SemanticGrid::new(spec(8, 8, 4), 1, ids).unwrap();
            let c = ReferenceCodec::new(1);
            prop_assert_eq!(c.decode(&c.encode(&g).unwrap(), g.spec()).unwrap(), g);
        }

        #[test]
        fn patchify_round_trips(c in 1usize..4, f in 1usize..3, th in 1usize..4, tw in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform(&[c, f, th * p, tw * p], 1.0, &mut rng);
            let t = patchify(&x, p).unwrap();
            prop_assert_eq!(unpatchify(&t, c, th * p, tw * p, p).unwrap(), x);
        }

        #[test]
        fn fold_is_linear_in_table(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(spec(2, 3, 2), 2, &mut rng);
            let a = Tensor::uniform(&[11, 3], 1.0, &mut rng);
            let b = Tensor::uniform(&[11, 3], 1.0, &mut rng);
            let sum = EmbeddingTable::new(a.add(&b).unwrap()).unwrap();
            let fa = embed_fold(&g, &EmbeddingTable::new(a).unwrap()).unwrap();
            let fb = embed_fold(&g, &EmbeddingTable::new(b).unwrap()).unwrap();
            let fs = embed_fold(&g, &sum).unwrap();
            prop_assert!(fs.max_abs_diff(&fa.add(&fb).unwrap()) < 1e-6);
        }

        #[test]
        fn reparameterize_is_affine_in_noise(seed in 0u64..1000, a in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu = Tensor::uniform(&[6], 1.0, &mut rng);
            let sigma = Tensor::uniform(&[6], 1.0, &mut rng).map(f32::abs);
            let n = Tensor::randn(&[6], 1.0, &mut rng);
            let z0 = reparameterize(&mu, &sigma, &Tensor::zeros(&[6])).unwrap();
            let z1 = reparameterize(&mu, &sigma, &n).unwrap();
            let za = reparameterize(&mu, &sigma, &n.scale(a)).unwrap();
            let lin = z0.add(&z1.sub(&z0).unwrap().scale(a)).unwrap();
            prop_assert!(za.max_abs_diff(&lin) < 1e-4);
        }
    }
}
