//! Run configuration shared by every CLI command.
//!
//! Unknown keys are rejected and every omitted key takes its default, so
//! a config file only needs the fields it changes. The JSON schema that
//! documents the accepted shape ships as `schema/run_config.schema.json`.

use std::path::Path;

use occdir_core::backbone::ModelConfig;
use occdir_core::codec::ReferenceCodec;
use occdir_core::flow::SamplerConfig;
use occdir_core::metrics::ProtocolConfig;
use occdir_core::optim::AdamWConfig;
use occdir_core::GridSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Horizontal tile size of the reference codec.
    pub downsample: usize,
    /// Latent values are `scale · (2·fraction − 1)`; 1 keeps data and unit
    /// noise on the same footing.
    pub scale: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { downsample: 4, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// All seven templates in equal proportion.
    Templates,
    /// Alternating +x / −x single-vehicle scenes.
    Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub kind: CorpusKind,
    pub records: usize,
    pub frames: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { kind: CorpusKind::Templates, records: 512, frames: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            checkpoint_every: 500,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub protocol: ProtocolConfig,
    pub kid_block: usize,
    pub knn_k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { protocol: ProtocolConfig::desk(), kid_block: 50, knn_k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Seed of the stub text encoder's token table.
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    /// Overridden by `OCCDIR_JUDGE_URL` when set.
    pub url: String,
    pub timeout_ms: u64,
    pub attempts: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
    /// Requests in flight at once.
    pub concurrency: usize,
    /// Minimum spacing between request starts across all workers.
    pub min_interval_ms: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080/judge".into(),
            timeout_ms: 30_000,
            attempts: 3,
            backoff_ms: 500,
            concurrency: 4,
            min_interval_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub grid: GridSpec,
    pub codec: CodecConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub text: TextConfig,
    pub judge: JudgeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// CPU-sized run: 32×32×8 grids, reference codec at tile 4, so the
    /// latent has `8·11 = 88` channels on an 8×8 site grid.
    pub fn desk() -> Self {
        let grid = GridSpec::desk();
        let codec = CodecConfig::default();
        let model = ModelConfig {
            latent_channels: ReferenceCodec::channels(&grid),
            latent_h: grid.size_x / codec.downsample,
            latent_w: grid.size_y / codec.downsample,
            // Tokens are C·p² wide. With C = 88 a 2×2 patch gives 352-wide
            // tokens that a d = 64 model cannot denoise.
            patch: 1,
            ..ModelConfig::desk()
        };
        Self {
            model,
            sampler: SamplerConfig::default(),
            grid,
            codec,
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            text: TextConfig::default(),
            judge: JudgeConfig::default(),
        }
    }

    /// Published hyperparameters. The backbone expects a learned 16-channel
    /// latent; this preset is used for shape and cost work, not training.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            grid: GridSpec::default(),
            codec: CodecConfig { downsample: 8, ..CodecConfig::default() },
            corpus: CorpusConfig { records: 85_000, frames: 16, ..CorpusConfig::default() },
            train: TrainConfig {
                iterations: 100_000,
                batch_size: 32,
                checkpoint_every: 5_000,
                optimizer: AdamWConfig::default(),
            },
            metrics: MetricsConfig { protocol: ProtocolConfig::paper(), ..MetricsConfig::default() },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a JSON document.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that hold across sections, on top of each section's own rules.
    pub fn validate(&self) -> Result<()> {
        let v = |m: String| Err(Error::Validation(m));
        self.model.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.sampler.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.grid.validate().map_err(|e| Error::Validation(e.to_string()))?;
        let r = self.codec.downsample;
        if r == 0 || self.grid.size_x % r != 0 || self.grid.size_y % r != 0 {
            return v(format!("codec.downsample {r} must divide the grid {}×{}", self.grid.size_x, self.grid.size_y));
        }
        if !(self.codec.scale.is_finite() && self.codec.scale > 0.0) {
            return v(format!("codec.scale {} must be positive", self.codec.scale));
        }
        if self.corpus.records == 0 || self.corpus.frames == 0 {
            return v("corpus.records and corpus.frames must be positive".into());
        }
        if self.train.batch_size == 0 || self.train.checkpoint_every == 0 {
            return v("train.batch_size and train.checkpoint_every must be positive".into());
        }
        let o = &self.train.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return v("train.optimizer needs lr > 0, betas in [0, 1) and eps > 0".into());
        }
        let p = &self.metrics.protocol;
        if p.clips_n == 0 || p.frames_per_clip == 0 || p.frames_per_clip > p.clip_len {
            return v("metrics.protocol needs clips_n > 0 and 0 < frames_per_clip <= clip_len".into());
        }
        if self.metrics.kid_block < 2 || self.metrics.knn_k == 0 {
            return v("metrics.kid_block must be >= 2 and metrics.knn_k >= 1".into());
        }
        if self.judge.attempts == 0 {
            return v("judge.attempts must be positive".into());
        }
        Ok(())
    }

    /// Whether the backbone consumes reference-codec latents directly.
    pub fn codec_matches_model(&self) -> Result<()> {
        let shape = ReferenceCodec::new(self.codec.downsample).latent_shape(&self.grid, 1);
        let m = &self.model;
        if (shape[0], shape[2], shape[3]) != (m.latent_channels, m.latent_h, m.latent_w) {
            return Err(Error::Validation(format!(
                "reference codec yields {}×{}×{} latents but model expects {}×{}×{}",
                shape[0], shape[2], shape[3], m.latent_channels, m.latent_h, m.latent_w
            )));
        }
        Ok(())
    }

    pub fn judge_url(&self) -> String {
        std::env::var("OCCDIR_JUDGE_URL").unwrap_or_else(|_| self.judge.url.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn schema_keys(schema: &Value, path: &str, out: &mut Vec<String>) {
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (k, v) in props {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                out.push(p.clone());
                schema_keys(v, &p, out);
            }
        }
    }

    fn value_keys(v: &Value, path: &str, out: &mut Vec<String>) {
        if let Some(obj) = v.as_object() {
            for (k, v) in obj {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                out.push(p.clone());
                value_keys(v, &p, out);
            }
        }
    }

    #[test]
    fn schema_documents_exactly_the_config_keys() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        let mut documented = Vec::new();
        schema_keys(&schema, "", &mut documented);
        let mut actual = Vec::new();
        value_keys(&serde_json::to_value(RunConfig::desk()).unwrap(), "", &mut actual);
        documented.sort();
        actual.sort();
        assert_eq!(documented, actual);
    }

    #[test]
    fn schema_defaults_match_desk_preset() {
        fn walk(schema: &Value, value: &Value, path: &str) {
            if let Some(d) = schema.get("default") {
                assert_eq!(d, value, "default of {path}");
            }
            if let Some(props) = schema.get("properties").and_then(Value::as_object) {
                for (k, s) in props {
                    walk(s, &value[k], &format!("{path}.{k}"));
                }
            }
        }
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        // through text, so f32 fields compare at their shortest decimal form
        let desk: Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
        walk(&schema, &desk, "");
    }

    #[test]
    fn presets_validate_and_desk_feeds_the_codec() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            cfg.validate().unwrap();
            let back = RunConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
        let desk = RunConfig::desk();
        assert_eq!(desk.model.latent_channels, 88);
        assert_eq!((desk.model.latent_h, desk.model.latent_w), (8, 8));
        desk.codec_matches_model().unwrap();
        assert!(RunConfig::paper().codec_matches_model().is_err());
    }

    #[test]
    fn partial_documents_take_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::from_json(r#"{"sampler": {"steps": 4}}"#).unwrap();
        assert_eq!(cfg.sampler.steps, 4);
        assert_eq!(cfg.sampler.cfg_scale, 7.5);
        for bad in [r#"{"samplr": {}}"#, r#"{"sampler": {"step": 4}}"#, r#"{"sampler": {"steps": 0}}"#] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Validation(_))), "{bad}");
        }
    }
}
