//! Text conditioning: the deterministic stub encoder, the bidirectional
//! token refiner, and the learned null condition.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{attend, Attention, LayerNormAffine, Mlp};
use crate::params::param_tree;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TextError {
    #[error("prompt has no tokens")]
    EmptyPrompt,
    #[error("feature width {got} does not match refiner input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = core::result::Result<T, TextError>;

/// Raw `L × d_text` token features, optionally tagged with their prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    values: Tensor,
    pub prompt: Option<String>,
}

impl TextFeatures {
    pub fn new(values: Tensor, prompt: Option<String>) -> Result<Self> {
        if values.rank() != 2 || values.dim(0) == 0 {
            return Err(TextError::EmptyPrompt);
        }
        if !values.is_finite() {
            return Err(TensorError::NumericalFailure { op: "text features" }.into());
        }
        Ok(Self { values, prompt })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub(crate) fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sinusoidal position code: even dims `sin(pos·ω_i)`, odd dims `cos(pos·ω_i)`,
/// `ω_i = 10000^(-2i/d)`.
pub fn position_code(pos: usize, d: usize) -> Vec<f32> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let a = pos as f64 * libm::pow(10000.0, -2.0 * i / d as f64);
            (if j % 2 == 0 { libm::sin(a) } else { libm::cos(a) }) as f32
        })
        .collect()
}

/// Token vectors drawn from a generator seeded by a hash of (token, seed),
/// scaled to unit expected norm, plus an optional position code.
pub fn stub_encode_with(prompt: &str, d_text: usize, seed: u64, positional: bool) -> Result<TextFeatures> {
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(TextError::EmptyPrompt);
    }
    let scale = 1.0 / libm::sqrtf(d_text as f32);
    let mut data = Vec::with_capacity(tokens.len() * d_text);
    for (pos, tok) in tokens.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok.as_bytes(), seed));
        let pe = if positional {
            position_code(pos, d_text)
        } else {
            alloc::vec![0.0; d_text]
        };
        for p in pe {
            let z: f32 = rng.sample(StandardNormal);
            data.push(z * scale + 0.1 * p);
        }
    }
    TextFeatures::new(
        Tensor::new(&[tokens.len(), d_text], data)?,
        Some(String::from(prompt)),
    )
}

pub fn stub_encode(prompt: &str, d_text: usize, seed: u64) -> Result<TextFeatures> {
    stub_encode_with(prompt, d_text, seed, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub d_text: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
}

impl RefinerConfig {
    pub fn validate(&self) -> core::result::Result<(), String> {
        if self.blocks == 0 {
            return Err(String::from("refiner needs at least one block"));
        }
        if self.num_heads * self.head_dim != self.d_model {
            return Err(format!(
                "refiner heads {}×{} != d_model {}",
                self.num_heads, self.head_dim, self.d_model
            ));
        }
        Ok(())
    }
}

param_tree! {
    pub struct RefinerBlock { ln1: LayerNormAffine, attn: Attention, ln2: LayerNormAffine, mlp: Mlp }
}

param_tree! {
    pub struct RefinerParams { w_in: leaf, blocks: [RefinerBlock], null_embedding: leaf }
}

impl RefinerParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &RefinerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.blocks)
            .map(|_| RefinerBlock {
                ln1: LayerNormAffine::new(d),
                attn: Attention::init(d, rng),
                ln2: LayerNormAffine::new(d),
                mlp: Mlp::init(d, cfg.mlp_ratio * d, rng),
            })
            .collect();
        Self {
            w_in: Tensor::uniform(&[cfg.d_text, d], 1.0 / libm::sqrtf(cfg.d_text as f32), rng),
            blocks,
            null_embedding: Tensor::randn(&[1, d], 0.02, rng),
        }
    }
}

fn block_forward(g: &mut Graph, cfg: &RefinerConfig, b: &RefinerBlock<Var>, x: Var) -> Result<Var> {
    let l = g.shape(x)[0];
    let (nh, hd) = (cfg.num_heads, cfg.head_dim);
    let n = b.ln1.forward(g, x)?;
    let heads = |g: &mut Graph, lin: &crate::nn::Linear<Var>| -> Result<Var> {
        let y = lin.forward(g, n)?;
        Ok(g.reshape(y, &[1, l, nh, hd])?)
    };
    let q = heads(g, &b.attn.q)?;
    let k = heads(g, &b.attn.k)?;
    let v = heads(g, &b.attn.v)?;
    let a = attend(g, q, k, v)?;
    let a = g.reshape(a, &[l, nh * hd])?;
    let a = b.attn.o.forward(g, a)?;
    let x = g.add(x, a)?;
    let n = b.ln2.forward(g, x)?;
    let m = b.mlp.forward(g, n)?;
    Ok(g.add(x, m)?)
}

fn run_blocks(g: &mut Graph, cfg: &RefinerConfig, p: &RefinerParams<Var>, mut x: Var) -> Result<Var> {
    for b in &p.blocks {
        x = block_forward(g, cfg, b, x)?;
    }
    Ok(x)
}

/// `C⁽⁰⁾ = C̃·W_in`, then pre-norm attention and MLP residual blocks.
pub fn refine_var(g: &mut Graph, cfg: &RefinerConfig, p: &RefinerParams<Var>, features: Var) -> Result<Var> {
    let s = g.shape(features);
    if s.len() != 2 || s[1] != cfg.d_text {
        return Err(TextError::WidthMismatch {
            expected: cfg.d_text,
            got: s.last().copied().unwrap_or(0),
        });
    }
    let x = g.matmul(features, p.w_in)?;
    run_blocks(g, cfg, p, x)
}

/// The null vector run through the refiner blocks, skipping `W_in`.
pub fn refine_null_var(g: &mut Graph, cfg: &RefinerConfig, p: &RefinerParams<Var>) -> Result<Var> {
    run_blocks(g, cfg, p, p.null_embedding)
}

pub fn refine(features: &TextFeatures, cfg: &RefinerConfig, params: &RefinerParams<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.map("", &mut |_, t| g.constant(t.clone()));
    let x = g.constant(features.values.clone());
    let out = refine_var(&mut g, cfg, &p, x)?;
    Ok(g.value(out).clone())
}

/// The learned null condition as a length-1 token sequence.
pub fn null_condition(params: &RefinerParams<Tensor>) -> Tensor {
    params.null_embedding.clone()
}
