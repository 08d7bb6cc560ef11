//! Distribution metrics over BEV features and the motion-direction probe.

use occdir_core::backbone::ModelParams;
use occdir_core::corpus::{motion_direction, Direction};
use occdir_core::flow::SamplerConfig;
use occdir_core::metrics::{
    bev_class_probs, bev_frame_features, bev_video_features, clip_protocol, frechet_distance, gaussian_stats,
    inception_style_score, kid_blocks, precision_recall, FeatureSet, MetricConfigEcho, MetricReport,
};
use occdir_core::{SemanticGrid, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{sample_tokens, Tokenizer};

pub const FRAME_EXTRACTOR: &str = "bev-hist-centroid-v1";
pub const VIDEO_EXTRACTOR: &str = "bev-hist-centroid-motion-v1";

/// Frame features, class probabilities and clip features of a protocol
/// draw over `grids`.
pub struct ProtocolFeatures {
    pub frames: FeatureSet,
    pub probs: Vec<Vec<f64>>,
    pub clips: FeatureSet,
}

pub fn protocol_features(cfg: &RunConfig, grids: &[SemanticGrid], seed: u64) -> Result<ProtocolFeatures> {
    let lens: Vec<usize> = grids.iter().map(SemanticGrid::frames).collect();
    let draw = clip_protocol(&lens, &cfg.metrics.protocol, seed)?;
    let len = cfg.metrics.protocol.clip_len;
    let per_clip: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> = draw
        .windows
        .par_iter()
        .map(|w| {
            let clip = grids[w.source].frame_range(w.start, len)?;
            let mut feats = Vec::new();
            let mut probs = Vec::new();
            for &o in &draw.frame_offsets {
                feats.push(bev_frame_features(&clip, o)?);
                probs.push(bev_class_probs(&clip, o)?);
            }
            Ok((feats, probs, bev_video_features(&clip)?))
        })
        .collect::<Result<_>>()?;
    let mut frames = Vec::new();
    let mut probs = Vec::new();
    let mut clips = Vec::new();
    for (f, p, c) in per_clip {
        frames.extend(f);
        probs.extend(p);
        clips.push(c);
    }
    Ok(ProtocolFeatures {
        frames: FeatureSet::new(frames, FRAME_EXTRACTOR)?,
        probs,
        clips: FeatureSet::new(clips, VIDEO_EXTRACTOR)?,
    })
}

/// Report with Fréchet and kernel distances on frame features, k-NN
/// precision/recall on frame features and the score on generated frames.
/// `clip_fd` is the Fréchet distance of clip features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub frame: MetricReport,
    pub clip_fd: f64,
    pub clip_extractor_id: String,
}

pub fn evaluate(cfg: &RunConfig, real: &[SemanticGrid], gen: &[SemanticGrid], seed: u64) -> Result<EvalReport> {
    if real.is_empty() || gen.is_empty() {
        return Err(Error::Validation("evaluation needs at least one real and one generated clip".into()));
    }
    // distinct protocol seeds keep the two draws independent
    let r = protocol_features(cfg, real, seed)?;
    let g = protocol_features(cfg, gen, seed.wrapping_add(1))?;
    let m = &cfg.metrics;
    let fd = frechet_distance(&gaussian_stats(&r.frames)?, &gaussian_stats(&g.frames)?)?;
    let (kid, kid_std) = kid_blocks(&r.frames, &g.frames, m.kid_block)?;
    let (precision, recall) = precision_recall(&r.frames, &g.frames, m.knn_k)?;
    let is_score = inception_style_score(&g.probs)?;
    let clip_fd = frechet_distance(&gaussian_stats(&r.clips)?, &gaussian_stats(&g.clips)?)?;
    Ok(EvalReport {
        frame: MetricReport {
            fd,
            kid,
            kid_std,
            precision,
            recall,
            is_score,
            config: MetricConfigEcho {
                n_real: r.frames.len(),
                n_gen: g.frames.len(),
                seed,
                extractor_id: FRAME_EXTRACTOR.into(),
                kid_block: m.kid_block,
                knn_k: m.knn_k,
            },
        },
        clip_fd,
        clip_extractor_id: VIDEO_EXTRACTOR.into(),
    })
}

/// Slope threshold, in voxels per frame, below which motion is `Unknown`.
pub const MIN_SLOPE: f64 = 0.25;

/// Directions of `n` clips sampled for `prompt`, clip `i` seeded `seed + i`.
pub fn sampled_directions(
    cfg: &RunConfig,
    params: &ModelParams<Tensor>,
    sampler: &SamplerConfig,
    prompt: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<Direction>> {
    let tok = Tokenizer::from_config(cfg)?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let t = sample_tokens(cfg, params, sampler, prompt, cfg.corpus.frames, None, seed.wrapping_add(i))?;
            Ok(motion_direction(&tok.grid(&t)?, MIN_SLOPE))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use occdir_core::corpus::{direction_corpus, make_dataset};

    #[test]
    fn identical_sets_score_perfectly() {
        let cfg = RunConfig::desk();
        let grids: Vec<_> = make_dataset(60, &cfg.grid, 8, 5).unwrap().into_iter().map(|r| r.grid).collect();
        let rep = evaluate(&cfg, &grids, &grids, 3).unwrap();
        assert_eq!(rep.frame.config.n_real, 200 * 5);
        assert!(rep.frame.fd < 0.05, "{}", rep.frame.fd);
        assert!(rep.frame.precision > 0.9 && rep.frame.recall > 0.9);
        assert!(rep.frame.is_score >= 1.0 && rep.frame.is_score <= 11.0);
        assert_eq!(evaluate(&cfg, &grids, &grids, 3).unwrap(), rep);
    }

    #[test]
    fn disjoint_sets_are_far_apart() {
        let cfg = RunConfig::desk();
        let a: Vec<_> = make_dataset(40, &cfg.grid, 8, 1).unwrap().into_iter().map(|r| r.grid).collect();
        let empty = vec![SemanticGrid::free(cfg.grid.clone(), 8).unwrap(); 40];
        let rep = evaluate(&cfg, &a, &empty, 0).unwrap();
        assert!(rep.frame.fd > 1.0);
        assert_eq!(rep.frame.precision, 0.0);
    }

    #[test]
    fn probe_reads_corpus_directions() {
        let cfg = RunConfig::desk();
        for (i, r) in direction_corpus(16, &cfg.grid, 8, 2).unwrap().iter().enumerate() {
            let want = if i % 2 == 0 { Direction::PosX } else { Direction::NegX };
            assert_eq!(motion_direction(&r.grid, MIN_SLOPE), want);
            // the probe survives the codec
            let tok = Tokenizer::from_config(&cfg).unwrap();
            let back = tok.grid(&tok.tokens(&r.grid).unwrap()).unwrap();
            assert_eq!(motion_direction(&back, MIN_SLOPE), want);
        }
    }
}
