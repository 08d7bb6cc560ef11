//! Training harness: batching, checkpoints, loss log and resume.
//!
//! Iteration `i` draws its batch and flow noise from a generator seeded by
//! `(seed, i)`, so a run resumed from a checkpoint at step `k` replays
//! iterations `k..` exactly without persisting generator state.

use std::fs;
use std::path::{Path, PathBuf};

use occdir_core::backbone::ModelParams;
use occdir_core::corpus::{CorpusRecord, Split};
use occdir_core::flow::{anchored_loss, loss_and_grads, Example, FlowBatch, FlowError, StepReport};
use occdir_core::optim::{adamw_step, global_norm, AdamState};
use occdir_core::params::ParamTree;
use occdir_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::pipeline::{text_features, Tokenizer};

/// Encoded training clips with their text features.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub tokens: Vec<Tensor>,
    pub texts: Vec<Tensor>,
}

impl TrainData {
    /// Train-split records only; captions share one feature tensor each.
    pub fn from_records(cfg: &RunConfig, records: &[CorpusRecord]) -> Result<Self> {
        let tok = Tokenizer::from_config(cfg)?;
        let mut cache: Vec<(String, Tensor)> = Vec::new();
        let mut data = Self { tokens: Vec::new(), texts: Vec::new() };
        for rec in records.iter().filter(|r| r.split == Split::Train) {
            let text = match cache.iter().find(|(c, _)| c == &rec.caption) {
                Some((_, t)) => t.clone(),
                None => {
                    let t = text_features(cfg, &rec.caption)?;
                    cache.push((rec.caption.clone(), t.clone()));
                    t
                }
            };
            data.tokens.push(tok.tokens(&rec.grid)?);
            data.texts.push(text);
        }
        if data.tokens.is_empty() {
            return Err(Error::Validation("corpus has no training records".into()));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Generator for iteration `i` of a run seeded with `seed`.
pub fn iteration_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

/// Parameter initialization uses a stream no iteration reaches.
pub fn init_params(cfg: &RunConfig, seed: u64) -> ModelParams<Tensor> {
    ModelParams::init(&cfg.model, &mut iteration_rng(seed, u64::MAX))
}

pub fn draw_indices<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f32,
    pub anchored_flag_rate: f32,
    pub cfg_flag_rate: f32,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub seed: u64,
    pub params: ModelParams<Tensor>,
    pub state: AdamState,
    /// Completed iterations.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, seed: u64) -> Self {
        let params = init_params(&cfg, seed);
        let state = AdamState::new(&params);
        Self { cfg, seed, params, state, step: 0 }
    }

    pub fn resume(cfg: RunConfig, seed: u64, ck: Checkpoint) -> Result<Self> {
        if ck.config != cfg.model {
            return Err(Error::Validation("checkpoint model config differs from the run config".into()));
        }
        let state = ck.optim.unwrap_or_else(|| AdamState::new(&ck.params));
        Ok(Self { cfg, seed, params: ck.params, state, step: ck.step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.model,
            step: self.step,
            params: self.params.clone(),
            optim: Some(self.state.clone()),
        }
    }

    /// Runs iteration `self.step`. Parameters are untouched on failure.
    pub fn step(&mut self, data: &TrainData) -> std::result::Result<LogRow, FlowError> {
        let mut rng = iteration_rng(self.seed, self.step);
        let idx = draw_indices(data.len(), self.cfg.train.batch_size, &mut rng);
        let examples: Vec<Example<'_>> =
            idx.iter().map(|&i| Example { x0: &data.tokens[i], text: &data.texts[i] }).collect();
        let report = parallel_step(
            &self.cfg,
            &mut self.params,
            &mut self.state,
            &examples,
            &mut rng,
        )?;
        let n = report.flags.len() as f32;
        let row = LogRow {
            iteration: self.step,
            loss: report.loss,
            anchored_flag_rate: report.flags.iter().filter(|f| f.anchor).count() as f32 / n,
            cfg_flag_rate: report.flags.iter().filter(|f| f.cfg_drop).count() as f32 / n,
        };
        self.step += 1;
        Ok(row)
    }
}

/// One AdamW update on the batch mean. Noise and flags are drawn in example
/// order; per-example gradients run in parallel and are summed in example
/// order, so the result does not depend on the thread count.
fn parallel_step(
    cfg: &RunConfig,
    params: &mut ModelParams<Tensor>,
    state: &mut AdamState,
    examples: &[Example<'_>],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<StepReport, FlowError> {
    let batches: Vec<FlowBatch> = examples.iter().map(|e| FlowBatch::draw(e.x0, &cfg.sampler, rng)).collect();
    let shared: &ModelParams<Tensor> = params;
    let parts = examples
        .par_iter()
        .zip(batches.par_iter())
        .map(|(e, b)| loss_and_grads(&cfg.model, shared, std::slice::from_ref(e), std::slice::from_ref(b)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let n = parts.len() as f32;
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().ok_or_else(|| FlowError::ShapeMismatch("empty batch".into()))?;
    for (l, g) in parts {
        loss += l;
        let mut leaves = Vec::new();
        g.visit("", &mut |_, t| leaves.push(t));
        let mut i = 0;
        grads.visit_mut("", &mut |_, acc| {
            acc.data_mut().iter_mut().zip(leaves[i].data()).for_each(|(a, b)| *a += b);
            i += 1;
        });
    }
    loss /= n;
    grads.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v /= n));
    if !loss.is_finite() {
        return Err(FlowError::NumericalFailure(loss));
    }
    let grad_norm = global_norm(&grads);
    adamw_step(&cfg.train.optimizer, state, params, &grads);
    Ok(StepReport { loss, grad_norm, flags: batches.iter().map(|b| b.flags).collect() })
}

/// Loss of the all-zero velocity on the batch iteration `i` would draw.
pub fn zero_predictor_loss(cfg: &RunConfig, data: &TrainData, seed: u64, i: u64) -> Result<f32> {
    let mut rng = iteration_rng(seed, i);
    let idx = draw_indices(data.len(), cfg.train.batch_size, &mut rng);
    let mut total = 0.0f64;
    for &j in &idx {
        let b = FlowBatch::draw(&data.tokens[j], &cfg.sampler, &mut rng);
        let zero = Tensor::zeros(b.x0.shape());
        total += anchored_loss(&zero, &b.x0, &b.x1, b.flags.h)? as f64;
    }
    Ok((total / idx.len() as f64) as f32)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:06}.occw"))
}

pub fn latest_path(dir: &Path) -> PathBuf {
    dir.join("latest.occw")
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join("loss.csv")
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub log: Vec<LogRow>,
    pub last_checkpoint: PathBuf,
}

/// Trains up to `cfg.train.iterations`, resuming from `out_dir/latest.occw`
/// when present. Checkpoints land every `checkpoint_every` iterations and at
/// the end; the CSV log keeps exactly one row per completed iteration.
pub fn run(
    cfg: &RunConfig,
    data: &TrainData,
    out_dir: &Path,
    seed: u64,
    mut on_row: impl FnMut(&LogRow),
) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let latest = latest_path(out_dir);
    let mut trainer = if latest.exists() {
        Trainer::resume(cfg.clone(), seed, load_checkpoint(&latest)?)?
    } else {
        Trainer::new(cfg.clone(), seed)
    };
    let mut log = if trainer.step > 0 && log_path(out_dir).exists() {
        read_log(&log_path(out_dir))?
    } else {
        Vec::new()
    };
    log.retain(|r| r.iteration < trainer.step);

    let mut last_good = if trainer.step > 0 { Some(latest.clone()) } else { None };
    let save = |t: &Trainer, log: &[LogRow]| -> Result<PathBuf> {
        let ck = t.checkpoint();
        let path = checkpoint_path(out_dir, t.step);
        save_checkpoint(&path, &ck)?;
        save_checkpoint(&latest, &ck)?;
        write_log(&log_path(out_dir), log)?;
        Ok(path)
    };
    while trainer.step < cfg.train.iterations {
        match trainer.step(data) {
            Ok(row) => {
                on_row(&row);
                log.push(row);
            }
            Err(source) => {
                write_log(&log_path(out_dir), &log)?;
                return Err(Error::TrainingAborted { iteration: trainer.step, checkpoint: last_good, source });
            }
        }
        if trainer.step % cfg.train.checkpoint_every == 0 || trainer.step == cfg.train.iterations {
            last_good = Some(save(&trainer, &log)?);
        }
    }
    let last_checkpoint = match last_good {
        Some(p) => p,
        None => save(&trainer, &log)?,
    };
    Ok(RunSummary { log, last_checkpoint })
}
