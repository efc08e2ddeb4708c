//! Self-supervised training loop.
//!
//! Every step draws its randomness from a generator seeded by
//! `(seed, step, position in batch)`, and the epoch order from
//! `(seed, epoch)`, so a run resumed from a checkpoint follows exactly the
//! trajectory of an uninterrupted one. Per-clip gradients are summed in batch
//! order.

use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_params, ModelConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::nn::ParamStore;
use crate::objective::{training_step, ObjectiveConfig};
use crate::tokenizer::{patchify, PatchGrid};
use crate::videodata::VideoClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub enable_contrastive: bool,
    pub alpha: f64,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub adjacency_window: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Leading fraction of steps trained on reconstruction alone.
    pub warm_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1.5e-4,
            weight_decay: 0.05,
            warmup_steps: 100,
            seed: 0,
            enable_contrastive: true,
            alpha: 0.5,
            mask_ratio: 0.75,
            mask_mode: MaskMode::UniformFrame,
            adjacency_window: 1,
            checkpoint_every: 0,
            warm_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", "must lie in [0, 1)");
        }
        if self.adjacency_window == 0 {
            return bad("adjacency_window", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.warm_fraction) {
            return bad("warm_fraction", "must lie in [0, 1]");
        }
        match self.mask_mode {
            MaskMode::UniformFrame => {}
            MaskMode::Random if !self.enable_contrastive => {}
            MaskMode::Random => return bad("mask_mode", "random masking cannot drive the contrastive pass"),
            MaskMode::Consistent => return bad("mask_mode", "consistent masks are derived per triplet, not configured"),
        }
        Ok(())
    }

    pub fn objective(&self, contrastive: bool) -> ObjectiveConfig {
        ObjectiveConfig {
            mask_ratio: self.mask_ratio,
            mask_mode: self.mask_mode,
            alpha: self.alpha,
            adjacency_window: self.adjacency_window,
            enable_contrastive: contrastive,
        }
    }

    pub fn steps_per_epoch(&self, n_clips: usize) -> usize {
        n_clips.div_ceil(self.batch_size)
    }

    /// Learning rate after `step` completed updates: linear warmup, then cosine decay.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        0.5 * self.learning_rate * (1.0 + (PI * progress).cos())
    }
}

/// AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One decoupled-weight-decay update. Decay applies to weight matrices
    /// (names ending in `.w`) only.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let decay = if name.ends_with(".w") { weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * *p);
            });
        }
    }
}

/// One structured training-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_r: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub triplet_count: usize,
    pub skipped_anchors: usize,
    pub lr: f64,
}

/// Parameters, optimizer state and completed step count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(model_cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(model_cfg, seed)?;
        let optimizer = AdamState::new(&params);
        Ok(Self {
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.backbone();
        let optimizer = match &ckpt.optimizer {
            Some(o) => o.clone(),
            None => AdamState::new(&params),
        };
        if optimizer.step != ckpt.step {
            return Err(Error::Checkpoint {
                name: "optimizer".into(),
                reason: format!("optimizer step {} differs from checkpoint step {}", optimizer.step, ckpt.step),
            });
        }
        Ok(Self {
            params,
            optimizer,
            step: ckpt.step,
        })
    }

    pub fn to_checkpoint(&self, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model_cfg: model_cfg.clone(),
            train_cfg: Some(train_cfg.clone()),
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            meta: serde_json::Value::Null,
        }
    }
}

/// Where a run writes checkpoints and its log.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{step:06}.ckpt"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepRecord>,
}

/// Checks every clip against the model geometry and the complete-cycle rule.
pub fn prepare_clips(clips: &[VideoClip], model_cfg: &ModelConfig) -> Result<Vec<PatchGrid>> {
    if clips.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    clips
        .iter()
        .map(|clip| {
            let reject = |reason: String| Error::ClipRejected {
                id: clip.source_id.clone(),
                reason,
            };
            if (clip.len(), clip.height(), clip.width()) != (model_cfg.frames, model_cfg.height, model_cfg.width) {
                return Err(reject(format!(
                    "size {}x{}x{} differs from model geometry {}x{}x{}",
                    clip.len(),
                    clip.height(),
                    clip.width(),
                    model_cfg.frames,
                    model_cfg.height,
                    model_cfg.width
                )));
            }
            match clip.period_hint() {
                Some(p) if p <= clip.len() => {}
                Some(p) => return Err(reject(format!("period {p} longer than the clip"))),
                None => return Err(reject("no period annotation; a complete cycle cannot be confirmed".into())),
            }
            patchify(clip, &model_cfg.patch).map_err(|e| reject(e.to_string()))
        })
        .collect()
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(epoch as u64 + 1)));
    order.shuffle(&mut rng);
    order
}

fn clip_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ mix(step.wrapping_mul(0x1_0000) + slot as u64)))
}

/// Runs optimization from `state` until `until_step` (or the end of training).
pub fn train_steps(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &[PatchGrid],
    state: &mut TrainState,
    until_step: Option<u64>,
    output: Option<&RunOutput>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = (per_epoch * cfg.epochs) as u64;
    let stop = until_step.unwrap_or(total).min(total);
    let warm_steps = (cfg.warm_fraction * total as f64).floor() as u64;

    let mut log = Vec::new();
    let mut log_file = match output {
        Some(out) => {
            std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let path = out.log_path();
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };

    while state.step < stop {
        let step = state.step;
        let epoch = (step as usize) / per_epoch;
        let batch_index = (step as usize) % per_epoch;
        let order = epoch_order(cfg.seed, epoch, data.len());
        let batch = &order[batch_index * cfg.batch_size..((batch_index + 1) * cfg.batch_size).min(order.len())];
        let contrastive = cfg.enable_contrastive && step >= warm_steps;
        let obj = cfg.objective(contrastive);

        let mut grads = state.params.zeros_like();
        let mut record = StepRecord {
            step: step + 1,
            epoch,
            l_r: 0.0,
            l_c: 0.0,
            l_total: 0.0,
            triplet_count: 0,
            skipped_anchors: 0,
            lr: cfg.learning_rate_at(step as usize, total as usize),
        };
        for (slot, &clip) in batch.iter().enumerate() {
            let mut rng = clip_rng(cfg.seed, step, slot);
            let out = training_step(model_cfg, &state.params, &obj, &data[clip], &mut rng)?;
            grads.add_assign(&out.grads);
            record.l_r += out.report.l_r;
            record.l_c += out.report.l_c;
            record.l_total += out.report.l_total;
            record.triplet_count += out.report.triplet_count;
            record.skipped_anchors += out.report.skipped_anchors;
        }
        let k = batch.len() as f64;
        grads.scale(1.0 / k);
        record.l_r /= k;
        record.l_c /= k;
        record.l_total /= k;

        state.optimizer.update(&mut state.params, &grads, record.lr, cfg.weight_decay);
        state.step += 1;

        if let Some((path, f)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log::debug!(
            "step {} epoch {} L_r {:.5} L_c {:.5} triplets {}",
            record.step,
            record.epoch,
            record.l_r,
            record.l_c,
            record.triplet_count
        );
        log.push(record);

        if let Some(out) = output {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(&state.to_checkpoint(model_cfg, cfg), &out.checkpoint_path(state.step))?;
            }
        }
    }
    Ok(log)
}

/// Full pretraining from a fresh initialization seeded by `cfg.seed`.
pub fn run_pretraining(cfg: &TrainConfig, model_cfg: &ModelConfig, clips: &[VideoClip], output: Option<&RunOutput>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let data = prepare_clips(clips, model_cfg)?;
    let mut state = TrainState::fresh(model_cfg, cfg.seed)?;
    if let Some(out) = output {
        // A fresh run starts a fresh log.
        let path = out.log_path();
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    let log = train_steps(cfg, model_cfg, &data, &mut state, None, output)?;
    if let Some(out) = output {
        save_checkpoint(&state.to_checkpoint(model_cfg, cfg), &out.final_path())?;
    }
    Ok(PretrainOutcome { state, log })
}

/// Continues a run from a saved checkpoint to the end of its schedule.
pub fn resume_pretraining(
    checkpoint: &Path,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    clips: &[VideoClip],
    output: Option<&RunOutput>,
) -> Result<PretrainOutcome> {
    let ckpt = crate::checkpoint::load_checkpoint_for(checkpoint, model_cfg)?;
    let data = prepare_clips(clips, model_cfg)?;
    let mut state = TrainState::from_checkpoint(&ckpt)?;
    let log = train_steps(cfg, model_cfg, &data, &mut state, None, output)?;
    if let Some(out) = output {
        save_checkpoint(&state.to_checkpoint(model_cfg, cfg), &out.final_path())?;
    }
    Ok(PretrainOutcome { state, log })
}
