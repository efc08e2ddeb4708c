//! Declarative run configuration loaded from TOML.
//!
//! Every section is optional and falls back to defaults; unknown keys are
//! errors. Validation reports the first offending key as `section.key`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationConfig;
use crate::adapt_eval::FinetuneConfig;
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::pretrain::TrainConfig;
use crate::store::DataConfig;
use crate::tokenizer::PatchConfig;

/// `[model]` section: model and patch geometry as flat keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch_h: usize,
    pub patch_w: usize,
    pub patch_t: usize,
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub proj_depth: usize,
    pub proj_heads: usize,
    pub proj_dim: usize,
    pub mlp_ratio: usize,
    pub detach_projector: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self::from_model(&ModelConfig::default())
    }
}

impl ModelSection {
    pub fn from_model(m: &ModelConfig) -> Self {
        Self {
            patch_h: m.patch.patch_h,
            patch_w: m.patch.patch_w,
            patch_t: m.patch.patch_t,
            embed_dim: m.patch.embed_dim,
            enc_depth: m.enc_depth,
            enc_heads: m.enc_heads,
            dec_width: m.dec_width,
            dec_depth: m.dec_depth,
            dec_heads: m.dec_heads,
            proj_depth: m.proj_depth,
            proj_heads: m.proj_heads,
            proj_dim: m.proj_dim,
            mlp_ratio: m.mlp_ratio,
            detach_projector: m.detach_projector,
        }
    }

    /// Clip geometry comes from `[data]`.
    pub fn to_model(&self, data: &DataConfig) -> ModelConfig {
        ModelConfig {
            patch: PatchConfig::new(self.patch_h, self.patch_w, self.patch_t, self.embed_dim),
            frames: data.frames,
            height: data.height,
            width: data.width,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            dec_width: self.dec_width,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
            proj_depth: self.proj_depth,
            proj_heads: self.proj_heads,
            proj_dim: self.proj_dim,
            mlp_ratio: self.mlp_ratio,
            detach_projector: self.detach_projector,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Checkpoints, logs and reports.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationConfig,
    pub output: OutputConfig,
}

fn in_section(section: &str, err: Error) -> Error {
    match err {
        Error::Config { key, reason } => Error::Config {
            key: format!("{section}.{key}"),
            reason,
        },
        other => Error::Config {
            key: section.into(),
            reason: other.to_string(),
        },
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<syntax>".into()),
            reason: e.to_string().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model(&self.data)
    }

    /// Sets every seed in the run from one value. Model initialization uses the pretraining seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| in_section("data", e))?;
        self.model_config().validate().map_err(|e| in_section("model", e))?;
        self.pretrain.validate().map_err(|e| in_section("pretrain", e))?;
        self.finetune.validate().map_err(|e| in_section("finetune", e))?;
        Ok(())
    }
}
