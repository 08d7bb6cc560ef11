//! Command-line interface. `main` only parses and maps errors to exit codes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use occdir_core::corpus::{direction_corpus, make_dataset, CorpusRecord};
use occdir_core::flow::{block_grad_check, flops_model, AttentionMode};
use occdir_core::grid::{render_bev, LabelMap, PALETTE};
use occdir_core::metrics::stub_judge;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{CorpusKind, RunConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::formats::{
    load_checkpoint, load_grid, load_latent, load_label_map, manifest_dir, read_bytes, read_manifest,
    save_grid, save_latent, save_ppm, write_json, write_manifest, ManifestEntry, SamplerRecord,
};
use crate::judge::{JudgeClient, JudgeRequest};
use crate::pipeline::{raw_from_ids, sample_tokens, standardize, Tokenizer};
use crate::train::{run, TrainData};

/// Maximum relative error accepted by `gradcheck`.
pub const GRADCHECK_TOL: f32 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "occdir", version, about = "Text-conditioned 4D semantic occupancy generation")]
pub struct Cli {
    /// Run configuration: a preset name (desk, paper) or a JSON file
    #[arg(long, global = true, default_value = "desk")]
    pub config: String,
    /// Seed for every random draw of the command
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for parallel stages (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Print the command's report as JSON on stdout
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of OCCG grids and a JSONL manifest
    MakeCorpus(MakeCorpusArgs),
    /// Map a source-labelled grid to the unified classes
    Standardize(StandardizeArgs),
    /// Train the backbone on a corpus manifest
    Train(TrainArgs),
    /// Sample a latent clip from a checkpoint
    Sample(SampleArgs),
    /// Render bird's-eye-view PPM images of a grid
    RenderBev(RenderArgs),
    /// Compare generated grids with real grids
    Evaluate(EvaluateArgs),
    /// Score renders with the rubric judge
    Judge(JudgeArgs),
    /// Finite-difference check of one backbone block and the anchored loss
    Gradcheck(GradcheckArgs),
    /// Closed-form attention cost of one block
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct MakeCorpusArgs {
    /// Output directory; receives manifest.jsonl and grids/
    #[arg(long)]
    pub out: PathBuf,
    /// Record count (defaults to corpus.records)
    #[arg(long)]
    pub records: Option<usize>,
    /// Corpus kind (defaults to corpus.kind)
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Templates,
    Direction,
}

#[derive(Debug, Args)]
pub struct StandardizeArgs {
    /// OCCG grid whose ids index the source vocabulary
    #[arg(long)]
    pub input: PathBuf,
    /// Label map: nuscenes, waymo, carla, unified, or a JSON file
    #[arg(long)]
    pub labels: String,
    /// JSON array of source label names by id (defaults to the map's entries in order)
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Resample x and y to this many voxels
    #[arg(long)]
    pub target_xy: Option<usize>,
    /// Output OCCG path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest (JSONL)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint and log directory; an existing latest.occw is resumed
    #[arg(long)]
    pub out: PathBuf,
    /// Total iterations (defaults to train.iterations)
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// OCCW checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text prompt
    #[arg(long)]
    pub prompt: String,
    /// Output OCCL latent; a sampler record is written next to it as .json
    #[arg(long)]
    pub out: PathBuf,
    /// Also decode the clip to this OCCG path
    #[arg(long)]
    pub grid_out: Option<PathBuf>,
    /// OCCL clip whose first frames are kept fixed
    #[arg(long, requires = "h")]
    pub history: Option<PathBuf>,
    /// Number of history frames to keep
    #[arg(long, requires = "history")]
    pub h: Option<usize>,
    /// Output frames (defaults to corpus.frames)
    #[arg(long)]
    pub frames: Option<usize>,
    /// Guidance scale (defaults to sampler.cfg_scale)
    #[arg(long)]
    pub cfg_scale: Option<f32>,
    /// Euler steps (defaults to sampler.steps)
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// OCCG grid
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; frame f is written as frame-f.ppm
    #[arg(long)]
    pub out: PathBuf,
    /// Render only this frame
    #[arg(long)]
    pub frame: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Manifest of real grids
    #[arg(long)]
    pub real: PathBuf,
    /// Manifest of generated grids
    #[arg(long)]
    pub gen: PathBuf,
    /// Write the report to this JSON file
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// Prompt the renders should follow
    #[arg(long)]
    pub prompt: String,
    /// Rendered frames (PPM) sent to the judge
    #[arg(long, num_args = 1..)]
    pub render: Vec<PathBuf>,
    /// Score offline from a hash of the prompt instead of calling the endpoint
    #[arg(long)]
    pub stub: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Frames in the checked clip
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    /// Text tokens in the checked condition
    #[arg(long, default_value_t = 2)]
    pub text_len: usize,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Frames F
    #[arg(long = "F", default_value_t = 16)]
    pub f: usize,
    /// Spatial tokens per frame S
    #[arg(long = "S", default_value_t = 196)]
    pub s: usize,
    /// Text tokens L
    #[arg(long = "L", default_value_t = 77)]
    pub l: usize,
    /// Model width d
    #[arg(long = "d", default_value_t = 896)]
    pub d: usize,
    /// Attention heads
    #[arg(long, default_value_t = 14)]
    pub heads: usize,
    /// MLP hidden width as a multiple of d
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
    /// Attention layout
    #[arg(long, value_enum, default_value = "stsa")]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Stsa,
    Full,
}

/// What a command prints: a human line and a JSON value.
pub struct Output {
    pub text: String,
    pub json: serde_json::Value,
    /// Set when the command completed but its check failed.
    pub failed: bool,
}

fn output<T: Serialize>(text: String, value: &T) -> Result<Output> {
    let json = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Output { text, json, failed: false })
}

pub fn execute(cli: &Cli) -> Result<Output> {
    let cfg = RunConfig::load(&cli.config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Runtime(e.to_string()))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<Output> {
    match &cli.command {
        Command::MakeCorpus(a) => make_corpus(cfg, a, cli.seed),
        Command::Standardize(a) => standardize_cmd(a),
        Command::Train(a) => train_cmd(cfg, a, cli.seed, cli.json),
        Command::Sample(a) => sample_cmd(cfg, a, cli.seed),
        Command::RenderBev(a) => render_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(cfg, a, cli.seed),
        Command::Judge(a) => judge_cmd(cfg, a),
        Command::Gradcheck(a) => gradcheck_cmd(cfg, a, cli.seed),
        Command::Flops(a) => flops_cmd(a),
    }
}

fn make_corpus(cfg: &RunConfig, a: &MakeCorpusArgs, seed: u64) -> Result<Output> {
    let n = a.records.unwrap_or(cfg.corpus.records);
    if n == 0 {
        return Err(Error::Validation("--records must be positive".into()));
    }
    let kind = match a.kind {
        Some(KindArg::Templates) => CorpusKind::Templates,
        Some(KindArg::Direction) => CorpusKind::Direction,
        None => cfg.corpus.kind,
    };
    let frames = cfg.corpus.frames;
    let records = match kind {
        CorpusKind::Templates => make_dataset(n, &cfg.grid, frames, seed)?,
        CorpusKind::Direction => direction_corpus(n, &cfg.grid, frames, seed)?,
    };
    let entries: Vec<ManifestEntry> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let rel = format!("grids/rec-{i:06}.occg");
            save_grid(&a.out.join(&rel), &r.grid)?;
            Ok(ManifestEntry { grid_path: rel, caption: r.caption.clone(), criticality: r.criticality, split: r.split })
        })
        .collect::<Result<_>>()?;
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    output(format!("wrote {n} records to {}", manifest.display()), &serde_json::json!({
        "manifest": manifest, "records": n,
    }))
}

fn standardize_cmd(a: &StandardizeArgs) -> Result<Output> {
    let map = match LabelMap::builtin(&a.labels) {
        Some(m) => m,
        None => load_label_map(Path::new(&a.labels))?,
    };
    let vocab: Vec<String> = match &a.vocab {
        Some(p) => serde_json::from_slice(&read_bytes(p)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?,
        None => map.entries.iter().map(|e| e.source.clone()).collect(),
    };
    let raw = raw_from_ids(&load_grid(&a.input)?, vocab)?;
    let grid = standardize(&raw, &map, a.target_xy)?;
    save_grid(&a.out, &grid)?;
    let s = grid.spec();
    output(format!("wrote {} ({}×{}×{}, {} frames)", a.out.display(), s.size_x, s.size_y, s.size_z, grid.frames()), &serde_json::json!({
        "output": a.out, "size": [s.size_x, s.size_y, s.size_z], "frames": grid.frames(),
    }))
}

/// Loads every manifest record's grid.
pub fn load_records(manifest: &Path) -> Result<Vec<CorpusRecord>> {
    let dir = manifest_dir(manifest);
    read_manifest(manifest)?
        .into_par_iter()
        .map(|e| {
            Ok(CorpusRecord {
                grid: load_grid(&dir.join(&e.grid_path))?,
                caption: e.caption,
                criticality: e.criticality,
                split: e.split,
            })
        })
        .collect()
}

fn train_cmd(cfg: &RunConfig, a: &TrainArgs, seed: u64, quiet: bool) -> Result<Output> {
    let mut cfg = cfg.clone();
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    let records = load_records(&a.manifest)?;
    let data = TrainData::from_records(&cfg, &records)?;
    let every = (cfg.train.iterations / 20).max(1);
    let summary = run(&cfg, &data, &a.out, seed, |row| {
        if !quiet && (row.iteration + 1) % every == 0 {
            eprintln!("iteration {:>6}  loss {:.5}", row.iteration + 1, row.loss);
        }
    })?;
    let last = summary.log.last().map(|r| r.loss);
    output(
        format!("trained {} iterations; checkpoint {}", summary.log.len(), summary.last_checkpoint.display()),
        &serde_json::json!({ "iterations": summary.log.len(), "final_loss": last, "checkpoint": summary.last_checkpoint }),
    )
}

fn sample_cmd(cfg: &RunConfig, a: &SampleArgs, seed: u64) -> Result<Output> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.config != cfg.model {
        return Err(Error::Validation("checkpoint model config differs from --config".into()));
    }
    let mut sampler = cfg.sampler;
    if let Some(s) = a.cfg_scale {
        sampler.cfg_scale = s;
    }
    if let Some(n) = a.steps {
        sampler.steps = n;
    }
    sampler.validate().map_err(|e| Error::Validation(e.to_string()))?;
    let tok = Tokenizer::from_config(cfg)?;
    let frames = a.frames.unwrap_or(cfg.corpus.frames);
    let history = match (&a.history, a.h) {
        (Some(p), Some(h)) => Some((tok.tokens_from_latent(&load_latent(p)?)?, h)),
        _ => None,
    };
    let tokens = sample_tokens(cfg, &ck.params, &sampler, &a.prompt, frames, history.as_ref().map(|(t, h)| (t, *h)), seed)?;
    let latent = tok.latent_from_tokens(&tokens)?;
    save_latent(&a.out, &latent)?;
    if let Some(g) = &a.grid_out {
        save_grid(g, &tok.grid_from_latent(&latent)?)?;
    }
    let record = SamplerRecord {
        seed,
        steps: sampler.steps,
        cfg_scale: sampler.cfg_scale,
        h: a.h.unwrap_or(0),
        prompt: a.prompt.clone(),
        checkpoint_path: a.checkpoint.display().to_string(),
        output_path: a.out.display().to_string(),
    };
    write_json(&a.out.with_extension("json"), &record)?;
    output(format!("wrote {}", a.out.display()), &record)
}

fn render_cmd(a: &RenderArgs) -> Result<Output> {
    let grid = load_grid(&a.input)?;
    let palette: Vec<[u8; 3]> = if grid.spec().num_classes == PALETTE.len() {
        PALETTE.to_vec()
    } else {
        // grey ramp for non-unified class counts, Free black
        let k = grid.spec().num_classes;
        (0..k).map(|c| if c + 1 == k { [0, 0, 0] } else { [(40 + 215 * c / k.max(2)) as u8; 3] }).collect()
    };
    let frames: Vec<usize> = match a.frame {
        Some(f) => vec![f],
        None => (0..grid.frames()).collect(),
    };
    let mut written = Vec::new();
    for f in frames {
        let path = a.out.join(format!("frame-{f}.ppm"));
        save_ppm(&path, &render_bev(&grid, f, &palette)?)?;
        written.push(path);
    }
    output(format!("wrote {} images to {}", written.len(), a.out.display()), &written)
}

fn evaluate_cmd(cfg: &RunConfig, a: &EvaluateArgs, seed: u64) -> Result<Output> {
    let grids = |p: &Path| -> Result<Vec<_>> { Ok(load_records(p)?.into_iter().map(|r| r.grid).collect()) };
    let report = evaluate(cfg, &grids(&a.real)?, &grids(&a.gen)?, seed)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    let m = &report.frame;
    output(
        format!(
            "fd {:.4}  kid {:.5} ± {:.5}  precision {:.3}  recall {:.3}  is {:.3}  clip fd {:.4}",
            m.fd, m.kid, m.kid_std, m.precision, m.recall, m.is_score, report.clip_fd
        ),
        &report,
    )
}

fn judge_cmd(cfg: &RunConfig, a: &JudgeArgs) -> Result<Output> {
    let score = if a.stub {
        stub_judge(&a.prompt)
    } else {
        if a.render.is_empty() {
            return Err(Error::Validation("--render needs at least one image unless --stub".into()));
        }
        let images = a.render.iter().map(|p| read_bytes(p)).collect::<Result<Vec<_>>>()?;
        JudgeClient::new(cfg.judge_url(), &cfg.judge).judge(&JudgeRequest::new(&a.prompt, &images))?
    };
    output(
        format!(
            "completeness {}  structural {}  semantic_alignment {}  mean {:.3}",
            score.completeness, score.structural, score.semantic_alignment, score.mean
        ),
        &score,
    )
}

fn gradcheck_cmd(cfg: &RunConfig, a: &GradcheckArgs, seed: u64) -> Result<Output> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let err = block_grad_check(&cfg.model, a.frames, a.text_len, &mut rng)?;
    let pass = err <= GRADCHECK_TOL;
    let mut out = output(
        format!("max relative error {err:.3e} ({})", if pass { "ok" } else { "above 1e-3" }),
        &serde_json::json!({ "max_relative_error": err, "tolerance": GRADCHECK_TOL, "pass": pass }),
    )?;
    out.failed = !pass;
    Ok(out)
}

fn flops_cmd(a: &FlopsArgs) -> Result<Output> {
    let mode = match a.mode {
        ModeArg::Stsa => AttentionMode::Stsa,
        ModeArg::Full => AttentionMode::Full,
    };
    let r = flops_model(a.f, a.s, a.l, a.d, a.heads, a.mlp_ratio, mode);
    output(
        format!(
            "attention MACs {} (spatial {}, temporal {})  peak activation {}",
            r.attention_macs, r.spatial_macs, r.temporal_macs, r.peak_activation
        ),
        // u128 counts as strings keep JSON readers exact
        &serde_json::json!({
            "mode": mode,
            "spatial_macs": r.spatial_macs.to_string(),
            "temporal_macs": r.temporal_macs.to_string(),
            "attention_macs": r.attention_macs.to_string(),
            "peak_activation": r.peak_activation.to_string(),
        }),
    )
}
