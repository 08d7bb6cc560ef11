//! Flow matching with history-prefix anchoring and guided Euler sampling.
//!
//! Time runs from clean data at `t = 0` to noise at `t = 1`; the target
//! velocity is `x1 − x0`. Clips are token tensors `[F, S, width]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    block_forward_var, condition_var, model_forward_var, BackboneError, BlockParams, Condition, ModelConfig,
    ModelParams, Rotations,
};
use crate::nn::Linear;
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::params::ParamTree;
use crate::tensor::{grad_check, Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("history horizon {h} out of range for {frames} frames")]
    HorizonOutOfRange { h: usize, frames: usize },
    #[error("non-finite loss {0}")]
    NumericalFailure(f32),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = core::result::Result<T, FlowError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    pub p_anchor: f32,
    pub p_cfg: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 7.5,
            p_anchor: 0.5,
            p_cfg: 0.15,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        if self.steps == 0 {
            return Err(FlowError::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(FlowError::InvalidConfig(format!("cfg_scale {}", self.cfg_scale)));
        }
        if !prob(self.p_anchor) || !prob(self.p_cfg) {
            return Err(FlowError::InvalidConfig(format!(
                "probabilities ({}, {}) outside [0, 1]",
                self.p_anchor, self.p_cfg
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FlowError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn frames(x: &Tensor) -> usize {
    if x.rank() == 0 { 1 } else { x.dim(0) }
}

/// `(1 − t)·x0 + t·x1`.
pub fn make_path(x0: &Tensor, x1: &Tensor, t: f32) -> Result<Tensor> {
    same_shape(x0, x1, "make_path")?;
    Ok(x0.zip(x1, "make_path", |a, b| (1.0 - t) * a + t * b)?)
}

/// Frames `0..h` from `x0`, the rest from `xt`.
pub fn replace_history(xt: &Tensor, x0: &Tensor, h: usize) -> Result<Tensor> {
    same_shape(xt, x0, "replace_history")?;
    let f = frames(xt);
    if h > f {
        return Err(FlowError::HorizonOutOfRange { h, frames: f });
    }
    let per = xt.len() / f.max(1);
    let mut out = xt.clone();
    out.data_mut()[..h * per].copy_from_slice(&x0.data()[..h * per]);
    Ok(out)
}

/// Mean squared error of `v_pred − (x1 − x0)` over frames `h..F`; zero when
/// the mask is empty.
pub fn anchored_loss(v_pred: &Tensor, x0: &Tensor, x1: &Tensor, h: usize) -> Result<f32> {
    same_shape(v_pred, x0, "anchored_loss")?;
    same_shape(x0, x1, "anchored_loss")?;
    let f = frames(x0);
    if h > f {
        return Err(FlowError::HorizonOutOfRange { h, frames: f });
    }
    if h == f {
        return Ok(0.0);
    }
    let per = x0.len() / f;
    let range = h * per..x0.len();
    let n = range.len() as f64;
    let s: f64 = range
        .map(|i| {
            let e = v_pred.data()[i] as f64 - (x1.data()[i] as f64 - x0.data()[i] as f64);
            e * e
        })
        .sum();
    Ok((s / n) as f32)
}

/// Graph form of [`anchored_loss`] against a fixed `target = x1 − x0`.
pub fn anchored_loss_var(g: &mut Graph, v_pred: Var, target: &Tensor, h: usize) -> Result<Var> {
    if g.shape(v_pred) != target.shape() {
        return Err(FlowError::ShapeMismatch(format!(
            "anchored_loss: {:?} vs {:?}",
            g.shape(v_pred),
            target.shape()
        )));
    }
    let f = frames(target);
    if h > f {
        return Err(FlowError::HorizonOutOfRange { h, frames: f });
    }
    if h == f {
        let z = g.constant(Tensor::scalar(0.0));
        let p = g.mul(v_pred, v_pred)?;
        let m = g.mean_all(p)?;
        // keeps the loss attached to the graph with a zero gradient
        let m = g.scale(m, 0.0)?;
        return Ok(g.add(m, z)?);
    }
    let fut = g.slice(v_pred, 0, h, f - h)?;
    let tgt = g.constant(target.narrow_leading(h, f - h)?);
    let e = g.sub(fut, tgt)?;
    let sq = g.mul(e, e)?;
    Ok(g.mean_all(sq)?)
}

/// Guided velocity `v_u + s·(v_c − v_u)`; `s = 1` returns `v_c` bit-exactly.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, s: f32) -> Result<Tensor> {
    same_shape(v_cond, v_uncond, "cfg_velocity")?;
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    Ok(v_uncond.zip(v_cond, "cfg_velocity", |u, c| u + s * (c - u))?)
}

/// Stochastic choices of one training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainFlags {
    pub t: f32,
    pub anchor: bool,
    pub cfg_drop: bool,
    /// Anchored frames; 0 unless `anchor` fired.
    pub h: usize,
}

/// Draws `t`, both flags independently, and `h ~ U{1, …, F−1}` when
/// anchoring. A single-frame clip has no future to anchor against, so its
/// horizon stays 0 even when the flag fires.
pub fn sample_flags<R: Rng + ?Sized>(cfg: &SamplerConfig, frames: usize, rng: &mut R) -> TrainFlags {
    let t: f32 = rng.random();
    let anchor = rng.random::<f32>() < cfg.p_anchor;
    let cfg_drop = rng.random::<f32>() < cfg.p_cfg;
    let h = if anchor && frames >= 2 { rng.random_range(1..frames) } else { 0 };
    TrainFlags { t, anchor, cfg_drop, h }
}

/// One training clip: latent tokens and raw text features.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x0: &'a Tensor,
    pub text: &'a Tensor,
}

/// A fully drawn training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub flags: TrainFlags,
}

impl FlowBatch {
    pub fn draw<R: Rng + ?Sized>(x0: &Tensor, cfg: &SamplerConfig, rng: &mut R) -> Self {
        let flags = sample_flags(cfg, frames(x0), rng);
        let x1 = Tensor::randn(x0.shape(), 1.0, rng);
        Self { x0: x0.clone(), x1, flags }
    }

    /// Network input: the noisy path with the first `h` frames clean.
    pub fn input(&self) -> Result<Tensor> {
        let xt = make_path(&self.x0, &self.x1, self.flags.t)?;
        replace_history(&xt, &self.x0, self.flags.h)
    }

    pub fn target(&self) -> Result<Tensor> {
        Ok(self.x1.sub(&self.x0)?)
    }
}

/// Anchored flow-matching loss of one drawn example.
pub fn flow_loss_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    batch: &FlowBatch,
    text: &Tensor,
) -> Result<Var> {
    let cond = if batch.flags.cfg_drop { Condition::Null } else { Condition::Text(text) };
    let c = condition_var(g, cfg, p, cond)?;
    let x = g.constant(batch.input()?);
    let v = model_forward_var(g, cfg, p, x, c, batch.flags.t)?;
    anchored_loss_var(g, v, &batch.target()?, batch.flags.h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    pub grad_norm: f32,
    pub flags: Vec<TrainFlags>,
}

/// Mean loss over `examples`, then one AdamW update.
pub fn training_step<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &mut ModelParams<Tensor>,
    state: &mut AdamState,
    opt: &AdamWConfig,
    sampler: &SamplerConfig,
    examples: &[Example<'_>],
    rng: &mut R,
) -> Result<StepReport> {
    if examples.is_empty() {
        return Err(FlowError::ShapeMismatch("empty batch".into()));
    }
    let batches: Vec<FlowBatch> = examples.iter().map(|e| FlowBatch::draw(e.x0, sampler, rng)).collect();
    let (loss, grads) = loss_and_grads(cfg, params, examples, &batches)?;
    if !loss.is_finite() {
        return Err(FlowError::NumericalFailure(loss));
    }
    let grad_norm = crate::optim::global_norm(&grads);
    adamw_step(opt, state, params, &grads);
    Ok(StepReport {
        loss,
        grad_norm,
        flags: batches.iter().map(|b| b.flags).collect(),
    })
}

/// Mean loss over pre-drawn examples and its parameter gradients.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams<Tensor>,
    examples: &[Example<'_>],
    batches: &[FlowBatch],
) -> Result<(f32, ModelParams<Tensor>)> {
    let mut g = Graph::new();
    let p = params.map("", &mut |_, t| g.param(t.clone()));
    let mut total: Option<Var> = None;
    for (e, b) in examples.iter().zip(batches) {
        let l = flow_loss_var(&mut g, cfg, &p, b, e.text)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| FlowError::ShapeMismatch("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / batches.len() as f32)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(FlowError::NumericalFailure(value));
    }
    let grads = g.backward(loss)?;
    let grads = p.map("", &mut |_, v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v))));
    Ok((value, grads))
}

/// Which branch of a guided model to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// A velocity predictor over token clips.
pub trait VelocityField {
    fn velocity(&mut self, x: &Tensor, branch: Branch, t: f32) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: FnMut(&Tensor, Branch, f32) -> Result<Tensor>,
{
    fn velocity(&mut self, x: &Tensor, branch: Branch, t: f32) -> Result<Tensor> {
        self(x, branch, t)
    }
}

/// The backbone with its text condition fixed for a sampling run.
pub struct ModelField<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams<Tensor>,
    pub text: &'a Tensor,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&mut self, x: &Tensor, branch: Branch, t: f32) -> Result<Tensor> {
        let cond = match branch {
            Branch::Conditional => Condition::Text(self.text),
            Branch::Unconditional => Condition::Null,
        };
        Ok(crate::backbone::model_forward(self.cfg, self.params, x, cond, t)?)
    }
}

fn guided<V: VelocityField + ?Sized>(field: &mut V, x: &Tensor, t: f32, s: f32) -> Result<Tensor> {
    // the blend is exact at the endpoints, so the unused branch is skipped
    if s == 1.0 {
        return field.velocity(x, Branch::Conditional, t);
    }
    if s == 0.0 {
        return field.velocity(x, Branch::Unconditional, t);
    }
    let vc = field.velocity(x, Branch::Conditional, t)?;
    let vu = field.velocity(x, Branch::Unconditional, t)?;
    cfg_velocity(&vc, &vu, s)
}

/// Anchored Euler integration from noise at `t = 1` down to `t = 0`.
///
/// `history` holds the first `h` clean frames; they are written into the
/// state before every velocity evaluation and after every update.
pub fn sample<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &mut V,
    shape: &[usize],
    history: Option<&Tensor>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let f = shape.first().copied().unwrap_or(1);
    let (h, anchor) = match history {
        Some(hist) => {
            let h = frames(hist);
            if hist.rank() != shape.len() || hist.shape()[1..] != shape[1..] {
                return Err(FlowError::ShapeMismatch(format!("history {:?} for clip {shape:?}", hist.shape())));
            }
            if h > f {
                return Err(FlowError::HorizonOutOfRange { h, frames: f });
            }
            let mut full = Tensor::zeros(shape);
            full.data_mut()[..hist.len()].copy_from_slice(hist.data());
            (h, full)
        }
        None => (0, Tensor::zeros(shape)),
    };
    let mut x = Tensor::randn(shape, 1.0, rng);
    if h == f {
        return Ok(anchor);
    }
    x = replace_history(&x, &anchor, h)?;
    let dt = 1.0 / cfg.steps as f32;
    for k in 0..cfg.steps {
        let t = 1.0 - k as f32 * dt;
        let xin = replace_history(&x, &anchor, h)?;
        let v = guided(field, &xin, t, cfg.cfg_scale)?;
        same_shape(&v, &xin, "velocity")?;
        x = xin.zip(&v, "euler", |a, b| a - dt * b)?;
        x = replace_history(&x, &anchor, h)?;
        debug_assert_eq!(&x.data()[..h * x.len() / f], &anchor.data()[..h * x.len() / f]);
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Per-frame joint attention plus per-token temporal attention.
    Stsa,
    /// One attention over all `F·S + L` tokens.
    Full,
}

/// Analytic attention cost of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Score and value multiply-adds of the text-bearing attention.
    pub spatial_macs: u128,
    pub temporal_macs: u128,
    pub attention_macs: u128,
    /// Largest simultaneously live activation, in elements.
    pub peak_activation: u128,
}

/// Closed-form per-block cost.
///
/// Score work: STSA `F·(L+S)²·d + S·F²·d`, full `(F·S+L)²·d`. The peak
/// model assumes attention is evaluated one frame (spatial) or one head
/// (temporal) at a time, so the live set is the largest of the occupancy
/// MLP hidden state `F·S·r·d`, the text MLP hidden state `L·r·d`, one
/// stream of `q, k, v`, and one score map.
pub fn flops_model(
    f: usize,
    s: usize,
    l: usize,
    d: usize,
    num_heads: usize,
    mlp_ratio: usize,
    mode: AttentionMode,
) -> CostReport {
    let (f, s, l, d, nh, r) = (f as u128, s as u128, l as u128, d as u128, num_heads.max(1) as u128, mlp_ratio as u128);
    let occ_mlp = f * s * r * d;
    let txt_mlp = l * r * d;
    match mode {
        AttentionMode::Stsa => {
            let spatial = f * (l + s) * (l + s) * d;
            let temporal = s * f * f * d;
            let joint_qkv = (l + s) * 3 * d;
            let temporal_qkv = f * s * 3 * d;
            let spatial_map = (l + s) * (l + s);
            let temporal_map = s * f * f;
            let peak = [occ_mlp, txt_mlp, joint_qkv, temporal_qkv, spatial_map, temporal_map]
                .into_iter()
                .max()
                .unwrap_or(0);
            CostReport {
                spatial_macs: spatial,
                temporal_macs: temporal,
                attention_macs: spatial + temporal,
                peak_activation: peak,
            }
        }
        AttentionMode::Full => {
            let n = f * s + l;
            let work = n * n * d;
            let _ = nh;
            let peak = [occ_mlp, txt_mlp, n * 3 * d, n * n].into_iter().max().unwrap_or(0);
            CostReport {
                spatial_macs: work,
                temporal_macs: 0,
                attention_macs: work,
                peak_activation: peak,
            }
        }
    }
}

/// Block weights with modulation, gates, and `γ_tmp` all switched on.
pub fn live_block<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> BlockParams<Tensor> {
    let d = cfg.d_model;
    let mut b = BlockParams::init(cfg, rng);
    for m in [&mut b.mod_occ, &mut b.mod_txt] {
        *m = Linear::init(d, 6 * d, rng);
        m.bias = Tensor::uniform(&[6 * d], 0.5, rng);
    }
    b.gamma_tmp = Tensor::full(&[1], 0.7);
    b
}

/// Worst relative gradient error of `anchored_loss(block(H, C))` with
/// respect to the occupancy input, the text input, and two gate leaves.
pub fn block_grad_check<R: Rng + ?Sized>(cfg: &ModelConfig, frames: usize, text_len: usize, rng: &mut R) -> Result<f32> {
    let d = cfg.d_model;
    let s = cfg.tokens_per_frame();
    let block = live_block(cfg, rng);
    let h0 = Tensor::randn(&[frames, s, d], 1.0, rng);
    let c0 = Tensor::randn(&[text_len, d], 1.0, rng);
    let s_act = Tensor::randn(&[1, d], 1.0, rng);
    let target = Tensor::randn(&[frames, s, d], 1.0, rng);
    let horizon = frames / 2;
    let rot = Rotations::new(cfg, frames)?;

    #[derive(Clone, Copy)]
    enum Probe<'a> {
        H,
        C,
        Leaf(&'a str),
    }
    let run = |g: &mut Graph, probe: Probe<'_>, x: Var| -> core::result::Result<Var, TensorError> {
        let p = block.map("", &mut |name, t| match probe {
            Probe::Leaf(want) if want == name => x,
            _ => g.constant(t.clone()),
        });
        let h = if matches!(probe, Probe::H) { x } else { g.constant(h0.clone()) };
        let c = if matches!(probe, Probe::C) { x } else { g.constant(c0.clone()) };
        let sv = g.constant(s_act.clone());
        let (ho, co) = block_forward_var(g, cfg, &p, h, c, sv, &rot).map_err(backbone_to_tensor)?;
        let l = anchored_loss_var(g, ho, &target, horizon).map_err(flow_to_tensor)?;
        // the text output only feeds later blocks; fold it in so its path is checked too
        let cm = g.mul(co, co)?;
        let cm = g.mean_all(cm)?;
        g.add(l, cm)
    };
    let mut worst = 0.0f32;
    worst = worst.max(grad_check(|g, x| run(g, Probe::H, x), &h0, 1e-2)?);
    worst = worst.max(grad_check(|g, x| run(g, Probe::C, x), &c0, 1e-2)?);
    for leaf in ["gamma_tmp", "mod_occ.bias"] {
        let mut init = None;
        block.visit("", &mut |name, t| {
            if name == leaf {
                init = Some(t.clone());
            }
        });
        let init = init.ok_or_else(|| FlowError::ShapeMismatch(format!("no leaf {leaf}")))?;
        worst = worst.max(grad_check(|g, x| run(g, Probe::Leaf(leaf), x), &init, 1e-2)?);
    }
    Ok(worst)
}

fn backbone_to_tensor(e: BackboneError) -> TensorError {
    match e {
        BackboneError::Tensor(t) => t,
        other => TensorError::ShapeMismatch { op: "block", detail: format!("{other}") },
    }
}

fn flow_to_tensor(e: FlowError) -> TensorError {
    match e {
        FlowError::Tensor(t) => t,
        other => TensorError::ShapeMismatch { op: "anchored_loss", detail: format!("{other}") },
    }
}
