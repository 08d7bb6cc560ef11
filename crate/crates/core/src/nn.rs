//! Layers shared by the text refiner, the backbone and the tiny VAE.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::params::param_tree;
use crate::tensor::{Graph, Result, Tensor, Var};

param_tree! {
    /// `y = x · weight + bias`, weight stored `in × out`.
    pub struct Linear { weight: leaf, bias: leaf }
}

param_tree! {
    pub struct LayerNormAffine { gain: leaf, bias: leaf }
}

param_tree! {
    pub struct Mlp { fc1: Linear, fc2: Linear }
}

param_tree! {
    pub struct Attention { q: Linear, k: Linear, v: Linear, o: Linear }
}

impl Linear<Tensor> {
    /// Uniform init with bound `1/√in`, zero bias.
    pub fn init<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrtf(inp as f32);
        Self {
            weight: Tensor::uniform(&[inp, out], bound, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inp, out]),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_bcast(y, self.bias)
    }
}

impl LayerNormAffine<Tensor> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Tensor::full(&[width], 1.0),
            bias: Tensor::zeros(&[width]),
        }
    }
}

impl LayerNormAffine<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let s = g.mul_bcast(n, self.gain)?;
        g.add_bcast(s, self.bias)
    }
}

impl Mlp<Tensor> {
    pub fn init<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::init(width, hidden, rng),
            fc2: Linear::init(hidden, width, rng),
        }
    }
}

impl Mlp<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

impl Attention<Tensor> {
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::init(width, width, rng),
            k: Linear::init(width, width, rng),
            v: Linear::init(width, width, rng),
            o: Linear::init(width, width, rng),
        }
    }
}

/// Cosine and sine tables for rotating `pairs` coordinate pairs at each of
/// the given positions, with frequencies `10000^(-i/pairs)`.
pub fn rope_table(positions: &[f32], pairs: usize) -> (Vec<f32>, Vec<f32>) {
    let mut cos = vec![0.0; positions.len() * pairs];
    let mut sin = vec![0.0; positions.len() * pairs];
    for (n, &p) in positions.iter().enumerate() {
        for i in 0..pairs {
            let theta = libm::pow(10000.0, -(i as f64) / pairs as f64);
            let a = p as f64 * theta;
            cos[n * pairs + i] = libm::cos(a) as f32;
            sin[n * pairs + i] = libm::sin(a) as f32;
        }
    }
    (cos, sin)
}

/// Multi-head attention over `[batch, n, heads, head_dim]` query/key/value
/// tensors; returns `[batch, n, heads·head_dim]`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = g.shape(q).to_vec();
    let (b, n, h, hd) = (s[0], s[1], s[2], s[3]);
    let nk = g.shape(k)[1];
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let q = g.reshape(q, &[b * h, n, hd])?;
    let k = g.permute(k, &[0, 2, 1, 3])?;
    let k = g.reshape(k, &[b * h, nk, hd])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let v = g.reshape(v, &[b * h, nk, hd])?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / libm::sqrtf(hd as f32))?;
    let w = g.softmax(scores)?;
    let o = g.bmm(w, v, false)?;
    let o = g.reshape(o, &[b, h, n, hd])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, n, h * hd])
}
