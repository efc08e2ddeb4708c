//! Mask-ratio and patch-size sweep: each cell is a short pretraining run
//! followed by frozen-encoder segmentation fine-tuning.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt_eval::{finetune, FinetuneConfig, LabeledClip, TaskKind};
use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::pretrain::{run_pretraining, TrainConfig};
use crate::tokenizer::PatchConfig;
use crate::videodata::VideoClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub mask_ratios: Vec<f64>,
    /// `[h, w, t]` per entry.
    pub patch_sizes: Vec<[usize; 3]>,
    /// Patch used for the mask-ratio row.
    pub base_patch: [usize; 3],
    /// Ratio used for the patch-size row.
    pub base_ratio: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            mask_ratios: vec![0.25, 0.5, 0.75, 0.9],
            patch_sizes: vec![[8, 8, 2], [8, 8, 4], [16, 16, 2], [16, 16, 4]],
            base_patch: [16, 16, 4],
            base_ratio: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub patch: [usize; 3],
    pub mask_ratio: f64,
    pub mdice: f64,
    pub final_l_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub patch_rows: Vec<AblationCell>,
    pub ratio_rows: Vec<AblationCell>,
}

pub fn patch_label(p: [usize; 3]) -> String {
    format!("{}x{}x{}", p[0], p[1], p[2])
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut out = String::from("Patch Size | mDice\n--- | ---\n");
        for c in &self.patch_rows {
            let _ = writeln!(out, "{} | {:.2}", patch_label(c.patch), 100.0 * c.mdice);
        }
        out.push_str("\nRatio | mDice\n--- | ---\n");
        for c in &self.ratio_rows {
            let _ = writeln!(out, "{:.0}% | {:.2}", 100.0 * c.mask_ratio, 100.0 * c.mdice);
        }
        out
    }

    pub fn cell_count(&self) -> usize {
        self.patch_rows.len() + self.ratio_rows.len()
    }
}

fn with_patch(base: &ModelConfig, p: [usize; 3]) -> ModelConfig {
    ModelConfig {
        patch: PatchConfig::new(p[0], p[1], p[2], base.patch.embed_dim),
        ..base.clone()
    }
}

/// Runs every cell. The cell shared by both rows is trained once.
pub fn run_ablation(
    sweep: &AblationConfig,
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    seg_cfg: &FinetuneConfig,
    pretrain_clips: &[VideoClip],
    seg_train: &[LabeledClip],
    seg_test: &[LabeledClip],
) -> Result<AblationTable> {
    if seg_cfg.task != TaskKind::Segmentation {
        return Err(Error::Config {
            key: "finetune.task".into(),
            reason: "the ablation reports segmentation mDice".into(),
        });
    }
    let mut cache: BTreeMap<(Vec<usize>, u64), AblationCell> = BTreeMap::new();
    let mut run_cell = |patch: [usize; 3], ratio: f64| -> Result<AblationCell> {
        let key = (patch.to_vec(), ratio.to_bits());
        if let Some(c) = cache.get(&key) {
            return Ok(c.clone());
        }
        let model_cfg = with_patch(base_model, patch);
        model_cfg.validate()?;
        let cfg = TrainConfig {
            mask_ratio: ratio,
            ..train_cfg.clone()
        };
        log::info!("ablation cell {} @ {ratio}", patch_label(patch));
        let outcome = run_pretraining(&cfg, &model_cfg, pretrain_clips, None)?;
        let model = Model::new(model_cfg, outcome.state.params)?;
        let ft = finetune(&model, seg_train, seg_test, seg_cfg)?;
        let cell = AblationCell {
            patch,
            mask_ratio: ratio,
            mdice: ft.report.values.get("mdice").copied().unwrap_or(0.0),
            final_l_r: outcome.log.last().map_or(f64::NAN, |r| r.l_r),
        };
        cache.insert(key, cell.clone());
        Ok(cell)
    };
    let patch_rows = sweep
        .patch_sizes
        .iter()
        .map(|&p| run_cell(p, sweep.base_ratio))
        .collect::<Result<Vec<_>>>()?;
    let ratio_rows = sweep
        .mask_ratios
        .iter()
        .map(|&r| run_cell(sweep.base_patch, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { patch_rows, ratio_rows })
}
