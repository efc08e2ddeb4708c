//! Downstream adaptation and evaluation: augmentation, linear classification
//! and segmentation heads over a frozen (or unfrozen) encoder, and metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array3, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat};
use crate::backbone::{self, Model};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{Binder, ParamStore, Trainable};
use crate::pretrain::AdamState;
use crate::tokenizer::{patchify, pixel_slot, PatchGrid};
use crate::videodata::VideoClip;

pub const CLS_W: &str = "head.cls.w";
pub const CLS_B: &str = "head.cls.b";
pub const SEG_W: &str = "head.seg.w";
pub const SEG_B: &str = "head.seg.b";
pub const FEAT_MEAN: &str = "head.feat.mean";
pub const FEAT_STD: &str = "head.feat.std";

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// `T×H×W` label map, background 0.
    Mask(Array3<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip: VideoClip,
    pub target: Target,
}

impl LabeledClip {
    pub fn with_class(clip: VideoClip, label: usize) -> Self {
        Self {
            clip,
            target: Target::Class(label),
        }
    }

    pub fn with_mask(clip: VideoClip, mask: Array3<u8>) -> Result<Self> {
        if mask.dim() != (clip.len(), clip.height(), clip.width()) {
            return Err(Error::shape(format!(
                "mask {:?} does not match clip {}x{}x{}",
                mask.dim(),
                clip.len(),
                clip.height(),
                clip.width()
            )));
        }
        Ok(Self {
            clip,
            target: Target::Mask(mask),
        })
    }

    pub fn label(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            Target::Mask(_) => None,
        }
    }

    pub fn mask(&self) -> Option<&Array3<u8>> {
        match &self.target {
            Target::Mask(m) => Some(m),
            Target::Class(_) => None,
        }
    }
}

// ---------------------------------------------------------------- augmentation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Segmentation,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation drawn from `[-rotate_deg, rotate_deg]`.
    pub rotate_deg: f64,
    /// Translation drawn per axis from `[-translate_frac, translate_frac]` of the side.
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Side of the erased square; 0 disables erasing.
    pub erase_patch: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub mode: AugmentMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 15.0,
            translate_frac: 0.1,
            scale_min: 0.9,
            scale_max: 1.4,
            erase_patch: 16,
            hflip: true,
            vflip: true,
            mode: AugmentMode::Segmentation,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled(mode: AugmentMode) -> Self {
        Self {
            rotate_deg: 0.0,
            translate_frac: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            erase_patch: 0,
            hflip: false,
            vflip: false,
            mode,
        }
    }

    pub fn classification() -> Self {
        Self {
            mode: AugmentMode::Classification,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(0.0..=180.0).contains(&self.rotate_deg) {
            return bad("rotate_deg", "must lie in [0, 180]");
        }
        if !(0.0..0.5).contains(&self.translate_frac) {
            return bad("translate_frac", "must lie in [0, 0.5)");
        }
        if !(self.scale_min > 0.0) {
            return bad("scale_min", "must be positive");
        }
        if !(self.scale_max >= self.scale_min) {
            return bad("scale_max", "must be >= scale_min");
        }
        Ok(())
    }
}

/// Similarity transform about the frame centre: `p' = c + s·R(θ)·(p − c) + t`,
/// with points as `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineWarp {
    pub theta: f64,
    pub scale: f64,
    pub ty: f64,
    pub tx: f64,
}

impl AffineWarp {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            scale: 1.0,
            ty: 0.0,
            tx: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn centre(h: usize, w: usize) -> (f64, f64) {
        ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
    }

    pub fn forward_point(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = Self::centre(h, w);
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - cy, x - cx);
        (
            cy + self.scale * (c * dy + s * dx) + self.ty,
            cx + self.scale * (-s * dy + c * dx) + self.tx,
        )
    }

    /// Source location sampled for output pixel `(y, x)`.
    pub fn source_point(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = Self::centre(h, w);
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = ((y - cy - self.ty) / self.scale, (x - cx - self.tx) / self.scale);
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    }

    /// Bilinear resampling with zero fill outside the frame.
    pub fn warp_frames(&self, frames: &Array4<f64>) -> Array4<f64> {
        if self.is_identity() {
            return frames.clone();
        }
        let (t, h, w, c) = frames.dim();
        let mut out = Array4::zeros((t, h, w, c));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source_point(y as f64, x as f64, h, w);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (ty, tx, wgt) in taps {
                    if wgt == 0.0 || ty < 0.0 || tx < 0.0 || ty >= h as f64 || tx >= w as f64 {
                        continue;
                    }
                    let (iy, ix) = (ty as usize, tx as usize);
                    for f in 0..t {
                        for ch in 0..c {
                            out[[f, y, x, ch]] += wgt * frames[[f, iy, ix, ch]];
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling with background fill outside the frame.
    pub fn warp_mask(&self, mask: &Array3<u8>) -> Array3<u8> {
        if self.is_identity() {
            return mask.clone();
        }
        let (t, h, w) = mask.dim();
        let mut out = Array3::zeros((t, h, w));
        for y in 0..h {
            for x in 0..w {
                if let Some((iy, ix)) = self.nearest_source(y, x, h, w) {
                    for f in 0..t {
                        out[[f, y, x]] = mask[[f, iy, ix]];
                    }
                }
            }
        }
        out
    }

    /// Pixel read by [`Self::warp_mask`] for output `(y, x)`, if inside the frame.
    pub fn nearest_source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (sy, sx) = self.source_point(y as f64, x as f64, h, w);
        let (ry, rx) = (sy.round(), sx.round());
        (ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64).then(|| (ry as usize, rx as usize))
    }
}

/// One concrete draw of the augmentation recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub warp: AffineWarp,
    pub hflip: bool,
    pub vflip: bool,
    /// Top-left corner of the erased square.
    pub erase: Option<(usize, usize)>,
    pub erase_size: usize,
}

pub fn draw_augmentation<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> AugmentDraw {
    let hflip = cfg.hflip && rng.random_bool(0.5);
    let vflip = cfg.vflip && rng.random_bool(0.5);
    if cfg.mode == AugmentMode::Classification {
        return AugmentDraw {
            warp: AffineWarp::identity(),
            hflip,
            vflip,
            erase: None,
            erase_size: 0,
        };
    }
    let uniform = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let theta = uniform(rng, -cfg.rotate_deg, cfg.rotate_deg).to_radians();
    let ty = uniform(rng, -cfg.translate_frac, cfg.translate_frac) * height as f64;
    let tx = uniform(rng, -cfg.translate_frac, cfg.translate_frac) * width as f64;
    let scale = uniform(rng, cfg.scale_min, cfg.scale_max);
    let erase = (cfg.erase_patch > 0 && cfg.erase_patch <= height && cfg.erase_patch <= width).then(|| {
        (
            rng.random_range(0..=height - cfg.erase_patch),
            rng.random_range(0..=width - cfg.erase_patch),
        )
    });
    AugmentDraw {
        warp: AffineWarp { theta, scale, ty, tx },
        hflip,
        vflip,
        erase,
        erase_size: cfg.erase_patch,
    }
}

fn flip_axis<A: Clone, D: ndarray::Dimension>(a: &mut ndarray::Array<A, D>, axis: usize) {
    let flipped = {
        let mut v = a.view();
        v.invert_axis(Axis(axis));
        v.to_owned()
    };
    *a = flipped;
}

pub fn apply_augmentation(sample: &LabeledClip, draw: &AugmentDraw) -> Result<LabeledClip> {
    let mut frames = draw.warp.warp_frames(sample.clip.frames());
    let mut target = match &sample.target {
        Target::Class(c) => Target::Class(*c),
        Target::Mask(m) => Target::Mask(draw.warp.warp_mask(m)),
    };
    if draw.hflip {
        flip_axis(&mut frames, 2);
        if let Target::Mask(m) = &mut target {
            flip_axis(m, 2);
        }
    }
    if draw.vflip {
        flip_axis(&mut frames, 1);
        if let Target::Mask(m) = &mut target {
            flip_axis(m, 1);
        }
    }
    if let Some((y0, x0)) = draw.erase {
        frames
            .slice_mut(ndarray::s![.., y0..y0 + draw.erase_size, x0..x0 + draw.erase_size, ..])
            .fill(0.0);
    }
    let clip = VideoClip::new(frames.mapv(|v| v.clamp(0.0, 1.0)), sample.clip.period_hint(), sample.clip.source_id.clone())?;
    Ok(LabeledClip { clip, target })
}

pub fn augment<R: Rng + ?Sized>(sample: &LabeledClip, cfg: &AugmentConfig, rng: &mut R) -> Result<LabeledClip> {
    cfg.validate()?;
    let draw = draw_augmentation(cfg, sample.clip.height(), sample.clip.width(), rng);
    apply_augmentation(sample, &draw)
}

// ---------------------------------------------------------------- heads

fn full_plan(grid: &PatchGrid) -> MaskPlan {
    MaskPlan::none(grid.layout.n_t, grid.layout.n_s())
}

/// Encoder outputs for every token of the clip, in token-row order.
pub fn token_latents(model: &Model, clip: &VideoClip) -> Result<Mat> {
    let grid = patchify(clip, &model.cfg.patch)?;
    let latents = model.encode(&grid, &full_plan(&grid))?;
    Ok(latents.flatten().0)
}

/// Mean over all encoder outputs of the unmasked clip.
pub fn clip_features(model: &Model, clip: &VideoClip) -> Result<Array1<f64>> {
    Ok(token_latents(model, clip)?.mean_axis(Axis(0)).expect("nonempty"))
}

fn standardize(head: &ParamStore, feat: &Array1<f64>) -> Array1<f64> {
    match (head.get(FEAT_MEAN), head.get(FEAT_STD)) {
        (Some(mu), Some(sd)) => (feat - &mu.row(0)) / &sd.row(0),
        _ => feat.clone(),
    }
}

/// Class scores from pooled features.
pub fn classify_features(head: &ParamStore, feat: &Array1<f64>) -> Result<Array1<f64>> {
    let w = head.get(CLS_W).ok_or_else(|| Error::invalid("classification head missing"))?;
    let b = head.get(CLS_B).ok_or_else(|| Error::invalid("classification head bias missing"))?;
    if w.nrows() != feat.len() || b.dim() != (1, w.ncols()) {
        return Err(Error::shape(format!(
            "head {:?}/{:?} does not fit {}-wide features",
            w.dim(),
            b.dim(),
            feat.len()
        )));
    }
    Ok(standardize(head, feat).dot(w) + b.row(0))
}

pub fn classify(model: &Model, head: &ParamStore, clip: &VideoClip) -> Result<Array1<f64>> {
    classify_features(head, &clip_features(model, clip)?)
}

/// A fresh zero-initialized classification head.
pub fn init_classification_head(dim: usize, n_classes: usize) -> ParamStore {
    let mut head = ParamStore::new();
    head.insert(CLS_W, Mat::zeros((dim, n_classes)));
    head.insert(CLS_B, Mat::zeros((1, n_classes)));
    head
}

pub fn init_segmentation_head<R: Rng + ?Sized>(model: &Model, n_foreground: usize, rng: &mut R) -> ParamStore {
    let p = &model.cfg.patch;
    let cols = (n_foreground + 1) * p.patch_t * p.patch_h * p.patch_w;
    let mut head = ParamStore::new();
    head.insert(SEG_W, crate::nn::normal(rng, model.cfg.embed_dim(), cols, 0.02));
    head.insert(SEG_B, Mat::zeros((1, cols)));
    head
}

/// Number of classes (background included) a segmentation head emits.
pub fn segmentation_classes(model: &Model, head: &ParamStore) -> Result<usize> {
    let w = head.get(SEG_W).ok_or_else(|| Error::invalid("segmentation head missing"))?;
    let p = &model.cfg.patch;
    let pixels = p.patch_t * p.patch_h * p.patch_w;
    if w.nrows() != model.cfg.embed_dim() || w.ncols() % pixels != 0 || w.ncols() / pixels < 2 {
        return Err(Error::shape(format!("segmentation head {:?} does not fit the model", w.dim())));
    }
    Ok(w.ncols() / pixels)
}

/// Scatters per-token logits (`N × P·C`, class innermost) to a `T×H×W×C` volume.
pub fn token_logits_to_volume(model: &Model, logits: &Mat, classes: usize) -> Result<Array4<f64>> {
    let cfg = &model.cfg;
    let layout = cfg.layout()?;
    let pixels = cfg.patch.patch_t * cfg.patch.patch_h * cfg.patch.patch_w;
    if logits.dim() != (layout.total(), pixels * classes) {
        return Err(Error::shape(format!("logits {:?} for {} tokens", logits.dim(), layout.total())));
    }
    let mut out = Array4::zeros((cfg.frames, cfg.height, cfg.width, classes));
    for f in 0..cfg.frames {
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (row, px) = pixel_slot(&cfg.patch, &layout, f, y, x);
                for k in 0..classes {
                    out[[f, y, x, k]] = logits[[row, px * classes + k]];
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel class scores, `T×H×W×(K+1)`.
pub fn decode_segmentation(model: &Model, head: &ParamStore, clip: &VideoClip) -> Result<Array4<f64>> {
    let classes = segmentation_classes(model, head)?;
    let lat = token_latents(model, clip)?;
    let logits = lat.dot(head.expect(SEG_W)) + head.expect(SEG_B);
    token_logits_to_volume(model, &logits, classes)
}

/// Argmax over the class axis; ties go to the lowest class index.
pub fn argmax_labels(scores: &Array4<f64>) -> Array3<u8> {
    let (t, h, w, _) = scores.dim();
    Array3::from_shape_fn((t, h, w), |(f, y, x)| {
        let lane = scores.slice(ndarray::s![f, y, x, ..]);
        let mut best = 0;
        for (k, &v) in lane.iter().enumerate() {
            if v > lane[best] {
                best = k;
            }
        }
        best as u8
    })
}

// ---------------------------------------------------------------- metrics

/// Dice and IoU for class `k`; both empty counts as perfect agreement.
pub fn overlap_metrics(pred: &Array3<u8>, truth: &Array3<u8>, k: u8) -> Result<(f64, f64)> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dim(), truth.dim())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth.iter()) {
        let (a, b) = (a == k, b == k);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - both;
    Ok((2.0 * both as f64 / (p + g) as f64, both as f64 / union as f64))
}

/// Pixels of class `k` with a 4-neighbour of another class (outside counts as background).
pub fn boundary_points(mask: ArrayView2<'_, u8>, k: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let is_k = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] == k;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != k {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(is_k(yi - 1, xi) && is_k(yi + 1, xi) && is_k(yi, xi - 1) && is_k(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let dy = (y as f64 - v as f64) * spacing.0;
                    let dx = (x as f64 - u as f64) * spacing.1;
                    dy.hypot(dx)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Linear-interpolated percentile `q ∈ [0, 100]` of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub hd95: f64,
    pub assd: f64,
    pub hausdorff: f64,
    /// Frames contributing to the averages.
    pub frames: usize,
}

/// Boundary distances per frame, averaged over frames where both masks have a
/// class-`k` boundary. `None` when no frame qualifies.
pub fn surface_metrics(pred: &Array3<u8>, truth: &Array3<u8>, k: u8, spacing: (f64, f64)) -> Result<Option<SurfaceMetrics>> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dim(), truth.dim())));
    }
    let (mut hd95, mut assd, mut hd, mut n) = (0.0, 0.0, 0.0, 0usize);
    for f in 0..pred.dim().0 {
        let bp = boundary_points(pred.index_axis(Axis(0), f), k);
        let bg = boundary_points(truth.index_axis(Axis(0), f), k);
        if bp.is_empty() || bg.is_empty() {
            continue;
        }
        let d_pg = directed(&bp, &bg, spacing);
        let d_gp = directed(&bg, &bp, spacing);
        let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
        let all: Vec<f64> = d_pg.iter().chain(d_gp.iter()).copied().collect();
        hd95 += percentile(&all, 95.0);
        assd += 0.5 * (mean(&d_pg) + mean(&d_gp));
        hd += all.iter().copied().fold(0.0, f64::max);
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let n_f = n as f64;
    Ok(Some(SurfaceMetrics {
        hd95: hd95 / n_f,
        assd: assd / n_f,
        hausdorff: hd / n_f,
        frames: n,
    }))
}

/// Area under the ROC curve via the rank-sum statistic with midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// A precision, recall or F1 denominator was zero and reported as 0.
    pub zero_division: bool,
}

/// Binary metrics (positive class 1) for two classes, macro averages otherwise.
pub fn classification_metrics(pred: &[usize], labels: &[usize]) -> Result<ClassificationMetrics> {
    if pred.is_empty() {
        return Err(Error::invalid("no predictions"));
    }
    if pred.len() != labels.len() {
        return Err(Error::shape("predictions and labels differ in length"));
    }
    let n_classes = pred.iter().chain(labels).max().unwrap() + 1;
    let accuracy = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64;
    let mut zero_division = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            zero_division = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut per_class = Vec::new();
    for c in 0..n_classes.max(2) {
        let tp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count();
        let fp = pred.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count();
        let fn_ = pred.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        per_class.push((precision, recall, tp, fp, fn_));
    }
    let f1_of = |tp: usize, fp: usize, fn_: usize, zd: &mut bool| {
        if 2 * tp + fp + fn_ == 0 {
            *zd = true;
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    };
    let (precision, recall, f1) = if n_classes <= 2 {
        let (p, r, tp, fp, fn_) = per_class[1];
        (p, r, f1_of(tp, fp, fn_, &mut zero_division))
    } else {
        let k = per_class.len() as f64;
        let mut f1 = 0.0;
        for &(_, _, tp, fp, fn_) in &per_class {
            f1 += f1_of(tp, fp, fn_, &mut zero_division);
        }
        (
            per_class.iter().map(|c| c.0).sum::<f64>() / k,
            per_class.iter().map(|c| c.1).sum::<f64>() / k,
            f1 / k,
        )
    };
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        zero_division,
    })
}

// ---------------------------------------------------------------- fine-tuning

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: TaskKind,
    /// Classes for classification; foreground regions K for segmentation.
    pub n_classes: usize,
    pub label_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
    /// `None` trains on the clips as given.
    pub augment: Option<AugmentConfig>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Classification,
            n_classes: 2,
            label_fraction: 1.0,
            epochs: 200,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            batch_size: 8,
            freeze_encoder: true,
            seed: 0,
            augment: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.task == TaskKind::Classification && self.n_classes < 2 {
            return bad("n_classes", "classification needs at least 2 classes");
        }
        if self.task == TaskKind::Segmentation && !(1..=254).contains(&self.n_classes) {
            return bad("n_classes", "segmentation needs 1..=254 foreground classes");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad("label_fraction", "must lie in (0, 1]");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Structured metric record for one task and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub split: String,
    pub label_fraction: f64,
    pub samples: usize,
    pub values: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, BTreeMap<String, f64>>,
    /// Samples whose surface metrics were undefined and left out of the means.
    pub missing: usize,
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `Metric | Value` table.
    pub fn to_table(&self) -> String {
        let mut out = format!("# {} / {} / label_fraction {}\n", self.task, self.split, self.label_fraction);
        out.push_str("Metric | Value\n--- | ---\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} | {v:.4}");
        }
        for (class, vals) in &self.per_class {
            for (k, v) in vals {
                let _ = writeln!(out, "{k}[{class}] | {v:.4}");
            }
        }
        out
    }
}

pub struct FinetuneOutcome {
    /// Encoder parameters after fine-tuning (unchanged when frozen).
    pub encoder: ParamStore,
    pub head: ParamStore,
    pub report: MetricReport,
    pub train_indices: Vec<usize>,
}

/// Labelled-subset indices: per class `ceil(fraction·n_c)` (at least one),
/// drawn without replacement; masks are subsampled as one pool.
pub fn subsample_labels(data: &[LabeledClip], fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.iter().enumerate() {
        pools.entry(s.label()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut pool) in pools {
        if fraction >= 1.0 {
            out.extend(pool);
            continue;
        }
        pool.shuffle(&mut rng);
        let keep = ((fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
        out.extend(&pool[..keep]);
    }
    out.sort_unstable();
    out
}

fn check_targets(data: &[LabeledClip], cfg: &FinetuneConfig) -> Result<()> {
    for s in data {
        match (&s.target, cfg.task) {
            (Target::Class(c), TaskKind::Classification) if *c < cfg.n_classes => {}
            (Target::Class(c), TaskKind::Classification) => {
                return Err(Error::invalid(format!(
                    "clip {} has label {c} but the task has {} classes",
                    s.clip.source_id, cfg.n_classes
                )))
            }
            (Target::Mask(m), TaskKind::Segmentation) => {
                if let Some(&bad) = m.iter().find(|&&v| v as usize > cfg.n_classes) {
                    return Err(Error::invalid(format!(
                        "clip {} has mask label {bad} above K = {}",
                        s.clip.source_id, cfg.n_classes
                    )));
                }
            }
            _ => {
                return Err(Error::invalid(format!(
                    "clip {} target does not match a {} task",
                    s.clip.source_id, cfg.task
                )))
            }
        }
    }
    Ok(())
}

fn mask_targets(model: &Model, mask: &Array3<u8>) -> Result<Vec<usize>> {
    let cfg = &model.cfg;
    let layout = cfg.layout()?;
    let pixels = cfg.patch.patch_t * cfg.patch.patch_h * cfg.patch.patch_w;
    let mut out = vec![0usize; layout.total() * pixels];
    for ((f, y, x), &v) in mask.indexed_iter() {
        let (row, px) = pixel_slot(&cfg.patch, &layout, f, y, x);
        out[row * pixels + px] = v as usize;
    }
    Ok(out)
}

fn augmented_batch(data: &[&LabeledClip], cfg: &FinetuneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledClip>> {
    data.iter()
        .map(|s| match &cfg.augment {
            Some(a) => augment(s, a, rng),
            None => Ok((*s).clone()),
        })
        .collect()
}

/// Head loss for one sample on the tape. `latents` must already be on `g`.
fn head_loss(
    model: &Model,
    cfg: &FinetuneConfig,
    g: &mut Graph,
    b: &mut Binder,
    latents: crate::autograd::Var,
    sample: &LabeledClip,
    stats: Option<(&Mat, &Mat)>,
) -> Result<crate::autograd::Var> {
    match &sample.target {
        Target::Class(c) => {
            let mut x = g.mean_rows(latents);
            if let Some((mu, sd)) = stats {
                let neg_mu = g.constant(-mu);
                x = g.add_row(x, neg_mu);
                let inv = g.constant(sd.mapv(|v| 1.0 / v));
                x = g.mul(x, inv);
            }
            let w = b.param(g, CLS_W);
            let bias = b.param(g, CLS_B);
            let logits = g.matmul(x, w);
            let logits = g.add_row(logits, bias);
            Ok(g.cross_entropy(logits, &[*c]))
        }
        Target::Mask(m) => {
            let classes = cfg.n_classes + 1;
            let w = b.param(g, SEG_W);
            let bias = b.param(g, SEG_B);
            let logits = g.matmul(latents, w);
            let logits = g.add_row(logits, bias);
            let rows = g.value(logits).len() / classes;
            let per_pixel = g.reshape(logits, rows, classes);
            Ok(g.cross_entropy(per_pixel, &mask_targets(model, m)?))
        }
    }
}

fn encode_on_tape(model: &Model, g: &mut Graph, b: &mut Binder, clip: &VideoClip) -> Result<crate::autograd::Var> {
    let grid = patchify(clip, &model.cfg.patch)?;
    let enc = backbone::encode_graph(&model.cfg, g, b, &grid, &full_plan(&grid))?;
    Ok(enc.latents)
}

/// Trains a task head (and optionally the encoder) on the training split and
/// reports metrics on `test`.
pub fn finetune(model: &Model, train: &[LabeledClip], test: &[LabeledClip], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_targets(train, cfg)?;
    check_targets(test, cfg)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("train and test splits must be nonempty"));
    }
    let indices = subsample_labels(train, cfg.label_fraction, cfg.seed);
    let subset: Vec<&LabeledClip> = indices.iter().map(|&i| &train[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7_u64);
    let dim = model.cfg.embed_dim();

    let mut trainables = match cfg.task {
        TaskKind::Classification => init_classification_head(dim, cfg.n_classes),
        TaskKind::Segmentation => init_segmentation_head(model, cfg.n_classes, &mut rng),
    };
    // Feature standardization is fixed from the labelled subset, not learned.
    let mut stats = ParamStore::new();
    if cfg.task == TaskKind::Classification {
        // Feature standardization statistics from the labelled subset.
        let feats: Vec<Array1<f64>> = subset.iter().map(|s| clip_features(model, &s.clip)).collect::<Result<_>>()?;
        let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views).expect("equal widths");
        let mu = stacked.mean_axis(Axis(0)).unwrap();
        let sd = stacked.std_axis(Axis(0), 0.0).mapv(|v| v.max(1e-6));
        stats.insert(FEAT_MEAN, mu.insert_axis(Axis(0)));
        stats.insert(FEAT_STD, sd.insert_axis(Axis(0)));
    }

    let mut encoder = model.params.clone();
    if !cfg.freeze_encoder {
        trainables.extend(encoder.clone());
    }
    let mut opt = AdamState::new(&trainables);

    // Frozen encoder without augmentation: latents never change, so compute once.
    let cached: Option<Vec<Mat>> = if cfg.freeze_encoder && cfg.augment.is_none() {
        Some(subset.iter().map(|s| token_latents(model, &s.clip)).collect::<Result<_>>()?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..subset.len()).collect();
    let steps_per_epoch = subset.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_refs: Vec<&LabeledClip> = chunk.iter().map(|&i| subset[i]).collect();
            let batch = augmented_batch(&batch_refs, cfg, &mut rng)?;
            let current = Model {
                cfg: model.cfg.clone(),
                params: encoder.clone(),
            };
            let mut grads = trainables.zeros_like();
            for (slot, sample) in batch.iter().enumerate() {
                let mut g = Graph::new();
                let trainable = if cfg.freeze_encoder {
                    Trainable::Prefixes(vec!["head.cls.".into(), "head.seg.".into()])
                } else {
                    Trainable::All
                };
                let mut store = current.params.clone();
                store.extend(trainables.subset("head."));
                let mut b = Binder::new(&store, trainable);
                let latents = match &cached {
                    Some(c) => g.constant(c[chunk[slot]].clone()),
                    None if cfg.freeze_encoder => g.constant(token_latents(&current, &sample.clip)?),
                    None => encode_on_tape(&current, &mut g, &mut b, &sample.clip)?,
                };
                let feat_stats = stats.get(FEAT_MEAN).zip(stats.get(FEAT_STD));
                let loss = head_loss(&current, cfg, &mut g, &mut b, latents, sample, feat_stats)?;
                let mut raw = g.backward(loss);
                grads.add_assign(&b.gradients(&mut raw));
            }
            grads.scale(1.0 / batch.len() as f64);
            // Cosine-decayed learning rate.
            let lr = 0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            opt.update(&mut trainables, &grads, lr, cfg.weight_decay);
            if !cfg.freeze_encoder {
                for (name, value) in encoder.iter_mut() {
                    *value = trainables.expect(name).clone();
                }
            }
            step += 1;
        }
    }

    let mut head = trainables.subset("head.");
    head.extend(stats);
    let final_model = Model {
        cfg: model.cfg.clone(),
        params: encoder.clone(),
    };
    let report = evaluate(&final_model, &head, cfg.task, test, "test", cfg.label_fraction)?;
    Ok(FinetuneOutcome {
        encoder,
        head,
        report,
        train_indices: indices,
    })
}

/// Metrics of a trained head on `data`.
pub fn evaluate(model: &Model, head: &ParamStore, task: TaskKind, data: &[LabeledClip], split: &str, label_fraction: f64) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut report = MetricReport {
        task,
        split: split.to_string(),
        label_fraction,
        samples: data.len(),
        values: BTreeMap::new(),
        per_class: BTreeMap::new(),
        missing: 0,
        flags: Vec::new(),
    };
    match task {
        TaskKind::Classification => {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            let mut scores = Vec::new();
            for s in data {
                let label = s.label().ok_or_else(|| Error::invalid("segmentation sample in a classification evaluation"))?;
                let out = classify(model, head, &s.clip)?;
                if label >= out.len() {
                    return Err(Error::invalid(format!("label {label} outside a {}-class head", out.len())));
                }
                let mut best = 0;
                for (k, &v) in out.iter().enumerate() {
                    if v > out[best] {
                        best = k;
                    }
                }
                preds.push(best);
                labels.push(label);
                if out.len() == 2 {
                    scores.push(out[1] - out[0]);
                }
            }
            let m = classification_metrics(&preds, &labels)?;
            report.values.insert("accuracy".into(), m.accuracy);
            report.values.insert("precision".into(), m.precision);
            report.values.insert("recall".into(), m.recall);
            report.values.insert("f1".into(), m.f1);
            if m.zero_division {
                report.flags.push("zero_division".into());
            }
            if !scores.is_empty() {
                let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                match roc_auc(&scores, &bin) {
                    Ok(auc) => {
                        report.values.insert("auroc".into(), auc);
                    }
                    Err(_) => report.flags.push("auroc_single_class".into()),
                }
            }
        }
        TaskKind::Segmentation => {
            let classes = segmentation_classes(model, head)?;
            let mut sums: Vec<BTreeMap<&str, (f64, usize)>> = vec![BTreeMap::new(); classes];
            for s in data {
                let truth = s.mask().ok_or_else(|| Error::invalid("classification sample in a segmentation evaluation"))?;
                let pred = argmax_labels(&decode_segmentation(model, head, &s.clip)?);
                for k in 1..classes {
                    let (dice, iou) = overlap_metrics(&pred, truth, k as u8)?;
                    let acc = &mut sums[k];
                    let mut add = |key, v: f64| {
                        let e = acc.entry(key).or_insert((0.0, 0));
                        e.0 += v;
                        e.1 += 1;
                    };
                    add("dice", dice);
                    add("iou", iou);
                    match surface_metrics(&pred, truth, k as u8, (1.0, 1.0))? {
                        Some(sm) => {
                            add("hd95", sm.hd95);
                            add("assd", sm.assd);
                        }
                        None => report.missing += 1,
                    }
                }
            }
            let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for (k, acc) in sums.iter().enumerate().skip(1) {
                let mut vals = BTreeMap::new();
                for (&key, &(sum, n)) in acc {
                    let v = sum / n as f64;
                    vals.insert(key.to_string(), v);
                    means.entry(key).or_default().push(v);
                }
                report.per_class.insert(format!("class_{k}"), vals);
            }
            for (key, vals) in means {
                let name = match key {
                    "dice" => "mdice",
                    "iou" => "miou",
                    other => other,
                };
                report.values.insert(name.into(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    Ok(report)
}
