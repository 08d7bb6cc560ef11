//! Spatio-temporal dual-stream transformer.
//!
//! Occupancy tokens are `[F, S, d]`, text tokens `[L, d]`. Each block
//! modulates both streams from the timestep embedding, runs per-frame joint
//! attention over `[text; occupancy]`, a gated per-token temporal attention
//! on the occupancy stream, and gated MLP residuals.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{attend, rope_table, Attention, Linear, Mlp};
use crate::params::param_tree;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::text::{refine_null_var, refine_var, RefinerConfig, RefinerParams, TextError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("head dim {0} is not divisible by 4")]
    HeadDimIndivisible(usize),
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
}

pub type Result<T> = core::result::Result<T, BackboneError>;

/// Width of the sinusoidal timestep features fed to the timestep MLP.
pub const TIME_FREQ_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub refiner_blocks: usize,
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub d_text: usize,
    pub refiner_heads: usize,
    pub refiner_head_dim: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            d_model: 896,
            depth: 14,
            num_heads: 14,
            head_dim: 64,
            refiner_blocks: 2,
            latent_channels: 16,
            latent_h: 28,
            latent_w: 28,
            patch: 2,
            mlp_ratio: 4,
            d_text: 4096,
            refiner_heads: 14,
            refiner_head_dim: 64,
        }
    }

    pub fn desk() -> Self {
        Self {
            d_model: 64,
            depth: 2,
            num_heads: 4,
            head_dim: 16,
            refiner_blocks: 1,
            latent_channels: 4,
            latent_h: 8,
            latent_w: 8,
            patch: 2,
            mlp_ratio: 4,
            d_text: 32,
            refiner_heads: 4,
            refiner_head_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BackboneError::InvalidConfig(m));
        if self.num_heads * self.head_dim != self.d_model {
            return bad(format!(
                "num_heads {} × head_dim {} != d_model {}",
                self.num_heads, self.head_dim, self.d_model
            ));
        }
        if self.patch == 0 || self.latent_h % self.patch != 0 || self.latent_w % self.patch != 0 {
            return bad(format!(
                "patch {} must divide {}×{}",
                self.patch, self.latent_h, self.latent_w
            ));
        }
        if self.head_dim % 4 != 0 {
            return Err(BackboneError::HeadDimIndivisible(self.head_dim));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.latent_channels == 0 || self.d_text == 0 {
            return bad(String::from("depth, mlp_ratio, latent_channels and d_text must be positive"));
        }
        self.refiner().validate().map_err(BackboneError::InvalidConfig)
    }

    pub fn refiner(&self) -> RefinerConfig {
        RefinerConfig {
            d_text: self.d_text,
            d_model: self.d_model,
            blocks: self.refiner_blocks,
            num_heads: self.refiner_heads,
            head_dim: self.refiner_head_dim,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Codec-side token width `C·p²`.
    pub fn token_width(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.latent_h / self.patch, self.latent_w / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.patch_grid();
        h * w
    }
}

param_tree! {
    pub struct TimestepEmbedder { fc1: Linear, fc2: Linear }
}

param_tree! {
    /// Per-block weights; `mod_*` emit `(α₁, β₁, g₁, α₂, β₂, g₂)`.
    pub struct BlockParams {
        mod_occ: Linear,
        mod_txt: Linear,
        attn_occ: Attention,
        attn_txt: Attention,
        temporal: Attention,
        gamma_tmp: leaf,
        mlp_occ: Mlp,
        mlp_txt: Mlp,
    }
}

param_tree! {
    /// Final norm modulated by `(shift, scale)` and a linear map to `C·p²`.
    pub struct OutputHead { modulation: Linear, proj: Linear }
}

param_tree! {
    pub struct ModelParams {
        input_proj: Linear,
        refiner: RefinerParams,
        time: TimestepEmbedder,
        blocks: [BlockParams],
        head: OutputHead,
    }
}

impl BlockParams<Tensor> {
    /// Modulation layers and `γ_tmp` start at zero, so every residual is off.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            mod_occ: Linear::zeros(d, 6 * d),
            mod_txt: Linear::zeros(d, 6 * d),
            attn_occ: Attention::init(d, rng),
            attn_txt: Attention::init(d, rng),
            temporal: Attention::init(d, rng),
            gamma_tmp: Tensor::zeros(&[1]),
            mlp_occ: Mlp::init(d, cfg.mlp_ratio * d, rng),
            mlp_txt: Mlp::init(d, cfg.mlp_ratio * d, rng),
        }
    }
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            input_proj: Linear::init(cfg.token_width(), d, rng),
            refiner: RefinerParams::init(&cfg.refiner(), rng),
            time: TimestepEmbedder {
                fc1: Linear::init(TIME_FREQ_DIM, d, rng),
                fc2: Linear::init(d, d, rng),
            },
            blocks: (0..cfg.depth).map(|_| BlockParams::init(cfg, rng)).collect(),
            head: OutputHead {
                modulation: Linear::zeros(d, 2 * d),
                proj: Linear::zeros(d, cfg.token_width()),
            },
        }
    }
}

/// Sinusoid of `1000·t`: `dim/2` sines then `dim/2` cosines over
/// frequencies `10000^(-i/(dim/2))`.
pub fn timestep_sinusoid(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let arg = 1000.0 * t as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|i| libm::exp(-libm::log(10000.0) * i as f64 / half as f64))
        .collect();
    let mut out: Vec<f32> = freqs.iter().map(|f| libm::sin(arg * f) as f32).collect();
    out.extend(freqs.iter().map(|f| libm::cos(arg * f) as f32));
    out
}

pub fn timestep_embed_var(g: &mut Graph, p: &TimestepEmbedder<Var>, t: f32) -> Result<Var> {
    let s = g.constant(Tensor::new(&[1, TIME_FREQ_DIM], timestep_sinusoid(t, TIME_FREQ_DIM))?);
    let h = p.fc1.forward(g, s)?;
    let h = g.silu(h)?;
    Ok(p.fc2.forward(g, h)?)
}

/// `s(t)` as a `[1, d_model]` tensor.
pub fn timestep_embed(params: &TimestepEmbedder<Tensor>, t: f32) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.map("", &mut |_, x| g.constant(x.clone()));
    let out = timestep_embed_var(&mut g, &p, t)?;
    Ok(g.value(out).clone())
}

/// `LN(x) ⊙ (1 + α) + β` with `α`, `β` broadcast over rows.
pub fn adaln_var(g: &mut Graph, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    let w = *g.shape(x).last().unwrap_or(&0);
    if g.shape(alpha) != [w] || g.shape(beta) != [w] {
        return Err(BackboneError::WidthMismatch(format!(
            "adaln on width {w} with α {:?}, β {:?}",
            g.shape(alpha),
            g.shape(beta)
        )));
    }
    let n = g.layer_norm(x)?;
    let scale = g.add_scalar(alpha, 1.0)?;
    let y = g.mul_bcast(n, scale)?;
    Ok(g.add_bcast(y, beta)?)
}

pub fn adaln(x: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, a, b) = (g.constant(x.clone()), g.constant(alpha.clone()), g.constant(beta.clone()));
    let y = adaln_var(&mut g, x, a, b)?;
    Ok(g.value(y).clone())
}

/// Rotation tables: `positions × head_dim/2` cosines and sines.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

/// 2D table over an `h × w` token grid in row-major order; the first half
/// of the rotary pairs encode the row, the second half the column.
pub fn rope_2d(h: usize, w: usize, head_dim: usize) -> Result<RopeTable> {
    if head_dim % 4 != 0 {
        return Err(BackboneError::HeadDimIndivisible(head_dim));
    }
    let q = head_dim / 4;
    let rows: Vec<f32> = (0..h).map(|i| i as f32).collect();
    let cols: Vec<f32> = (0..w).map(|i| i as f32).collect();
    let (rc, rs) = rope_table(&rows, q);
    let (cc, cs) = rope_table(&cols, q);
    let mut cos = Vec::with_capacity(h * w * 2 * q);
    let mut sin = Vec::with_capacity(h * w * 2 * q);
    for r in 0..h {
        for c in 0..w {
            cos.extend_from_slice(&rc[r * q..(r + 1) * q]);
            cos.extend_from_slice(&cc[c * q..(c + 1) * q]);
            sin.extend_from_slice(&rs[r * q..(r + 1) * q]);
            sin.extend_from_slice(&cs[c * q..(c + 1) * q]);
        }
    }
    Ok(RopeTable { cos, sin })
}

/// 1D table over positions `0..n`.
pub fn rope_1d(n: usize, head_dim: usize) -> Result<RopeTable> {
    if head_dim % 2 != 0 {
        return Err(BackboneError::HeadDimIndivisible(head_dim));
    }
    let pos: Vec<f32> = (0..n).map(|i| i as f32).collect();
    let (cos, sin) = rope_table(&pos, head_dim / 2);
    Ok(RopeTable { cos, sin })
}

/// Applies a rotation table to `[batch, positions, heads, head_dim]`.
pub fn apply_rope(x: &Tensor, table: &RopeTable) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.rope(v, &table.cos, &table.sin)?;
    Ok(g.value(y).clone())
}

/// Tables shared by every block for a given frame count.
#[derive(Debug, Clone)]
pub struct Rotations {
    pub spatial: RopeTable,
    pub temporal: RopeTable,
}

impl Rotations {
    pub fn new(cfg: &ModelConfig, frames: usize) -> Result<Self> {
        let (h, w) = cfg.patch_grid();
        Ok(Self {
            spatial: rope_2d(h, w, cfg.head_dim)?,
            temporal: rope_1d(frames, cfg.head_dim)?,
        })
    }
}

fn heads(g: &mut Graph, x: Var, nh: usize, hd: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    Ok(g.reshape(x, &[s[0], s[1], nh, hd])?)
}

/// Per-frame joint attention over `[Ĉ; Ĥ_f]` with stream-specific
/// projections and 2D rotation on occupancy queries and keys only.
/// Returns `(ΔC [F, L, d], ΔH [F, S, d])`.
pub fn spatial_joint_attention_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    attn_txt: &Attention<Var>,
    attn_occ: &Attention<Var>,
    c_hat: Var,
    h_hat: Var,
    rope: &RopeTable,
) -> Result<(Var, Var)> {
    let (nh, hd, d) = (cfg.num_heads, cfg.head_dim, cfg.d_model);
    let hs = g.shape(h_hat).to_vec();
    let cs = g.shape(c_hat).to_vec();
    if hs.len() != 3 || cs.len() != 2 || hs[2] != d || cs[1] != d {
        return Err(BackboneError::WidthMismatch(format!(
            "joint attention on H {hs:?}, C {cs:?} with d_model {d}"
        )));
    }
    let (f, s, l) = (hs[0], hs[1], cs[0]);
    let proj = |g: &mut Graph, lin_t: &Linear<Var>, lin_o: &Linear<Var>, rotate: bool| -> Result<Var> {
        let t = lin_t.forward(g, c_hat)?;
        let t = g.expand(t, f)?;
        let t = heads(g, t, nh, hd)?;
        let o = lin_o.forward(g, h_hat)?;
        let mut o = heads(g, o, nh, hd)?;
        if rotate {
            o = g.rope(o, &rope.cos, &rope.sin)?;
        }
        Ok(g.concat(&[t, o], 1)?)
    };
    let q = proj(g, &attn_txt.q, &attn_occ.q, true)?;
    let k = proj(g, &attn_txt.k, &attn_occ.k, true)?;
    let v = proj(g, &attn_txt.v, &attn_occ.v, false)?;
    let out = attend(g, q, k, v)?;
    let parts = g.split(out, 1, &[l, s])?;
    let dc = attn_txt.o.forward(g, parts[0])?;
    let dh = attn_occ.o.forward(g, parts[1])?;
    Ok((dc, dh))
}

/// `H + γ · MHSA_tmp(H)` along frames, independently per spatial token.
pub fn temporal_attention_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    attn: &Attention<Var>,
    gamma: Var,
    h: Var,
    rope: &RopeTable,
) -> Result<Var> {
    let (nh, hd) = (cfg.num_heads, cfg.head_dim);
    let tube = g.permute(h, &[1, 0, 2])?;
    let q = attn.q.forward(g, tube)?;
    let q = heads(g, q, nh, hd)?;
    let q = g.rope(q, &rope.cos, &rope.sin)?;
    let k = attn.k.forward(g, tube)?;
    let k = heads(g, k, nh, hd)?;
    let k = g.rope(k, &rope.cos, &rope.sin)?;
    let v = attn.v.forward(g, tube)?;
    let v = heads(g, v, nh, hd)?;
    let a = attend(g, q, k, v)?;
    let a = attn.o.forward(g, a)?;
    let a = g.permute(a, &[1, 0, 2])?;
    let a = g.mul_bcast(a, gamma)?;
    Ok(g.add(h, a)?)
}

/// The six modulation vectors `(α₁, β₁, g₁, α₂, β₂, g₂)`.
fn modulation(g: &mut Graph, lin: &Linear<Var>, s_act: Var, d: usize) -> Result<Vec<Var>> {
    let m = lin.forward(g, s_act)?;
    let m = g.reshape(m, &[6 * d])?;
    Ok(g.split(m, 0, &[d; 6])?)
}

/// One block; `s_act` is `SiLU(s(t))` as `[1, d]`.
pub fn block_forward_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BlockParams<Var>,
    h: Var,
    c: Var,
    s_act: Var,
    rot: &Rotations,
) -> Result<(Var, Var)> {
    let d = cfg.d_model;
    let mo = modulation(g, &p.mod_occ, s_act, d)?;
    let mt = modulation(g, &p.mod_txt, s_act, d)?;

    let h_hat = adaln_var(g, h, mo[0], mo[1])?;
    let c_hat = adaln_var(g, c, mt[0], mt[1])?;
    let (dc, dh) = spatial_joint_attention_var(g, cfg, &p.attn_txt, &p.attn_occ, c_hat, h_hat, &rot.spatial)?;
    let dh = g.mul_bcast(dh, mo[2])?;
    let h1 = g.add(h, dh)?;
    let dc = g.mean(dc, 0)?;
    let dc = g.mul_bcast(dc, mt[2])?;
    let c1 = g.add(c, dc)?;

    let h2 = temporal_attention_var(g, cfg, &p.temporal, p.gamma_tmp, h1, &rot.temporal)?;

    let h_hat = adaln_var(g, h2, mo[3], mo[4])?;
    let m = p.mlp_occ.forward(g, h_hat)?;
    let m = g.mul_bcast(m, mo[5])?;
    let h_out = g.add(h2, m)?;
    let c_hat = adaln_var(g, c1, mt[3], mt[4])?;
    let m = p.mlp_txt.forward(g, c_hat)?;
    let m = g.mul_bcast(m, mt[5])?;
    let c_out = g.add(c1, m)?;
    Ok((h_out, c_out))
}

/// Text input to the model: raw features through `W_in`, or the null vector.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a> {
    Text(&'a Tensor),
    Null,
}

/// Condition tokens `[L, d]` after the refiner.
pub fn condition_var(g: &mut Graph, cfg: &ModelConfig, p: &ModelParams<Var>, cond: Condition<'_>) -> Result<Var> {
    Ok(match cond {
        Condition::Text(t) => {
            let x = g.constant(t.clone());
            refine_var(g, &cfg.refiner(), &p.refiner, x)?
        }
        Condition::Null => refine_null_var(g, &cfg.refiner(), &p.refiner)?,
    })
}

/// Block stack on embedded streams; returns the final `(H, C)`.
pub fn stack_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    mut h: Var,
    mut c: Var,
    t: f32,
) -> Result<(Var, Var, Var)> {
    let frames = g.shape(h)[0];
    let rot = Rotations::new(cfg, frames)?;
    let s = timestep_embed_var(g, &p.time, t)?;
    let s_act = g.silu(s)?;
    for b in &p.blocks {
        (h, c) = block_forward_var(g, cfg, b, h, c, s_act, &rot)?;
    }
    Ok((h, c, s_act))
}

/// Velocity tokens `[F, S, C·p²]` for input tokens of the same shape.
pub fn model_forward_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    x: Var,
    cond: Var,
    t: f32,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[1] != cfg.tokens_per_frame() || xs[2] != cfg.token_width() {
        return Err(BackboneError::WidthMismatch(format!(
            "input tokens {xs:?}, expected [F, {}, {}]",
            cfg.tokens_per_frame(),
            cfg.token_width()
        )));
    }
    let h = p.input_proj.forward(g, x)?;
    let (h, _, s_act) = stack_var(g, cfg, p, h, cond, t)?;
    let m = p.head.modulation.forward(g, s_act)?;
    let m = g.reshape(m, &[2 * cfg.d_model])?;
    let sc = g.split(m, 0, &[cfg.d_model, cfg.d_model])?;
    let h = adaln_var(g, h, sc[1], sc[0])?;
    Ok(p.head.proj.forward(g, h)?)
}

/// Inference forward pass without gradient tracking.
pub fn model_forward(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor>,
    x: &Tensor,
    cond: Condition<'_>,
    t: f32,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.map("", &mut |_, v| g.constant(v.clone()));
    let c = condition_var(&mut g, cfg, &p, cond)?;
    let xv = g.constant(x.clone());
    let out = model_forward_var(&mut g, cfg, &p, xv, c, t)?;
    Ok(g.value(out).clone())
}
