//! Grid ↔ token conversion and text conditioning for the reference codec.

use occdir_core::backbone::ModelParams;
use occdir_core::codec::{patchify, unpatchify, ReferenceCodec};
use occdir_core::flow::{sample, ModelField, SamplerConfig};
use occdir_core::grid::{map_labels, resample_ids, LabelMap, RawGrid};
use occdir_core::text::stub_encode;
use occdir_core::{GridSpec, SemanticGrid, Tensor};

use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Reference-codec latents rescaled from class fractions in [0, 1] to
/// [−scale, scale] and cut into `[F, S, C·p²]` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub codec: ReferenceCodec,
    pub spec: GridSpec,
    pub patch: usize,
    pub scale: f32,
}

impl Tokenizer {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.codec_matches_model()?;
        Ok(Self {
            codec: ReferenceCodec::new(cfg.codec.downsample),
            spec: cfg.grid.clone(),
            patch: cfg.model.patch,
            scale: cfg.codec.scale,
        })
    }

    pub fn latent(&self, grid: &SemanticGrid) -> Result<Tensor> {
        if grid.spec() != &self.spec {
            return Err(Error::Validation("grid geometry differs from the configured grid".into()));
        }
        Ok(self.codec.encode(grid)?.map(|v| self.scale * (2.0 * v - 1.0)))
    }

    pub fn tokens(&self, grid: &SemanticGrid) -> Result<Tensor> {
        Ok(patchify(&self.latent(grid)?, self.patch)?)
    }

    pub fn latent_from_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let [c, _, h, w] = self.codec.latent_shape(&self.spec, 1);
        Ok(unpatchify(tokens, c, h, w, self.patch)?)
    }

    pub fn tokens_from_latent(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(patchify(latent, self.patch)?)
    }

    /// Decodes a `[C, F, H, W]` latent in the rescaled range.
    pub fn grid_from_latent(&self, latent: &Tensor) -> Result<SemanticGrid> {
        Ok(self.codec.decode(&latent.map(|v| 0.5 * (v / self.scale + 1.0)), &self.spec)?)
    }

    pub fn grid(&self, tokens: &Tensor) -> Result<SemanticGrid> {
        self.grid_from_latent(&self.latent_from_tokens(tokens)?)
    }

    /// Token shape of an `F`-frame clip.
    pub fn token_shape(&self, frames: usize) -> [usize; 3] {
        let [c, _, h, w] = self.codec.latent_shape(&self.spec, frames);
        let p = self.patch;
        [frames, (h / p) * (w / p), c * p * p]
    }
}

/// Raw text features `[L, d_text]` for a prompt.
pub fn text_features(cfg: &RunConfig, prompt: &str) -> Result<Tensor> {
    Ok(stub_encode(prompt, cfg.model.d_text, cfg.text.seed)?.values().clone())
}

/// Samples an `frames`-frame token clip for `prompt`. A `history` clip
/// supplies its first `h` frames as the fixed prefix.
pub fn sample_tokens(
    cfg: &RunConfig,
    params: &ModelParams<Tensor>,
    sampler: &SamplerConfig,
    prompt: &str,
    frames: usize,
    history: Option<(&Tensor, usize)>,
    seed: u64,
) -> Result<Tensor> {
    let tok = Tokenizer::from_config(cfg)?;
    let shape = tok.token_shape(frames);
    let text = text_features(cfg, prompt)?;
    let prefix = match history {
        Some((clip, h)) => {
            if h > frames || h > clip.dim(0) {
                return Err(Error::Validation(format!(
                    "--h {h} exceeds the history clip ({} frames) or the output ({frames} frames)",
                    clip.dim(0)
                )));
            }
            Some(clip.narrow_leading(0, h)?)
        }
        None => None,
    };
    let mut field = ModelField { cfg: &cfg.model, params, text: &text };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut field, &shape, prefix.as_ref(), sampler, &mut rng)?)
}

/// Maps a source-labelled grid into the unified classes and optionally
/// resamples its horizontal axes.
pub fn standardize(raw: &RawGrid, map: &LabelMap, target_xy: Option<usize>) -> Result<SemanticGrid> {
    let grid = map_labels(raw, map)?;
    Ok(match target_xy {
        Some(n) if n != grid.spec().size_x || n != grid.spec().size_y => resample_ids(&grid, n)?,
        _ => grid,
    })
}

/// Reads source ids from a grid file with the map's entries as vocabulary.
pub fn raw_from_ids(grid: &SemanticGrid, vocab: Vec<String>) -> Result<RawGrid> {
    if let Some(&bad) = grid.ids().iter().find(|&&v| v as usize >= vocab.len()) {
        return Err(Error::Validation(format!("source id {bad} outside a vocabulary of {}", vocab.len())));
    }
    Ok(RawGrid {
        spec: grid.spec().clone(),
        frames: grid.frames(),
        vocab,
        ids: grid.ids().iter().map(|&v| v as u16).collect(),
    })
}
