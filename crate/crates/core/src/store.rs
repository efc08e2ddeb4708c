//! On-disk clip corpus.
//!
//! Each clip is a binary array file with a `key = value` sidecar (`.meta`)
//! and, for segmentation data, a label-map file (`.mask`). A tab-separated
//! manifest lists clip paths relative to itself and their split.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt_eval::{LabeledClip, TaskKind};
use crate::error::{Error, Result};
use crate::videodata::{ellipse_masks, generate_periodic_clip, SyntheticSpec, VideoClip, CHANNELS};

const CLIP_MAGIC: &[u8; 8] = b"CYMACLP1";
const MASK_MAGIC: &[u8; 8] = b"CYMAMSK1";
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

fn put_u64(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

fn take_u64(bytes: &[u8], at: &mut usize) -> Option<usize> {
    let v = u64::from_le_bytes(bytes.get(*at..*at + 8)?.try_into().ok()?);
    *at += 8;
    Some(v as usize)
}

/// Writes frames as little-endian `f64`. Gray clips (equal channels) store one channel.
pub fn write_clip_file(path: &Path, clip: &VideoClip) -> Result<()> {
    let frames = clip.frames();
    let (t, h, w, c) = frames.dim();
    let gray = frames.outer_iter().all(|f| f.rows().into_iter().all(|px| px.iter().all(|&v| v == px[0])));
    let stored = if gray { 1 } else { c };
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    out.write_all(CLIP_MAGIC).map_err(io)?;
    for d in [t, h, w, stored] {
        put_u64(&mut out, d).map_err(io)?;
    }
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..stored {
                    out.write_all(&frames[[f, y, x, ch]].to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    out.flush().map_err(io)
}

pub fn read_clip_file(path: &Path, period_hint: Option<usize>, source_id: &str) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.get(..8) != Some(CLIP_MAGIC.as_slice()) {
        return Err(Error::format(path, "not a clip file"));
    }
    let mut at = 8;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = take_u64(&bytes, &mut at).ok_or_else(|| Error::format(path, "truncated header"))?;
    }
    let [t, h, w, c] = dims;
    if c != 1 && c != CHANNELS {
        return Err(Error::format(path, format!("{c} channels")));
    }
    if bytes.len() != at + t * h * w * c * 8 {
        return Err(Error::format(path, "payload length disagrees with header"));
    }
    let values: Vec<f64> = bytes[at..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let arr = Array4::from_shape_vec((t, h, w, c), values).expect("length checked");
    if c == 1 {
        VideoClip::from_grayscale(arr, period_hint, source_id)
    } else {
        VideoClip::new(arr, period_hint, source_id)
    }
}

pub fn write_mask_file(path: &Path, mask: &Array3<u8>) -> Result<()> {
    let (t, h, w) = mask.dim();
    let mut bytes = Vec::with_capacity(32 + mask.len());
    bytes.extend_from_slice(MASK_MAGIC);
    for d in [t, h, w] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    bytes.extend(mask.iter());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask_file(path: &Path) -> Result<Array3<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.get(..8) != Some(MASK_MAGIC.as_slice()) {
        return Err(Error::format(path, "not a mask file"));
    }
    let mut at = 8;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = take_u64(&bytes, &mut at).ok_or_else(|| Error::format(path, "truncated header"))?;
    }
    let [t, h, w] = dims;
    if bytes.len() != at + t * h * w {
        return Err(Error::format(path, "payload length disagrees with header"));
    }
    Ok(Array3::from_shape_vec((t, h, w), bytes[at..].to_vec()).expect("length checked"))
}

/// Sidecar metadata, stored as sorted `key = value` lines.
pub type ClipMeta = BTreeMap<String, String>;

fn meta_path(clip_path: &Path) -> PathBuf {
    clip_path.with_extension("meta")
}

fn mask_path(clip_path: &Path) -> PathBuf {
    clip_path.with_extension("mask")
}

pub fn write_meta(clip_path: &Path, meta: &ClipMeta) -> Result<()> {
    let path = meta_path(clip_path);
    let text: String = meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(clip_path: &Path) -> Result<ClipMeta> {
    let path = meta_path(clip_path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = ClipMeta::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, format!("line {} is not key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_meta<T: std::str::FromStr>(meta: &ClipMeta, key: &str, path: &Path) -> Result<Option<T>> {
    match meta.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::format(meta_path(path), format!("bad value for {key}: '{v}'"))),
    }
}

/// Writes a clip, its sidecar and, if given, its label map.
pub fn save_sample(path: &Path, clip: &VideoClip, label: Option<usize>, mask: Option<&Array3<u8>>, extra: &ClipMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_clip_file(path, clip)?;
    let mut meta = extra.clone();
    meta.insert("source_id".into(), clip.source_id.clone());
    if let Some(p) = clip.period_hint() {
        meta.insert("period_hint".into(), p.to_string());
    }
    if let Some(l) = label {
        meta.insert("label".into(), l.to_string());
    }
    if let Some(m) = mask {
        write_mask_file(&mask_path(path), m)?;
        meta.insert("mask".into(), "true".into());
    }
    write_meta(path, &meta)
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let meta = read_meta(path)?;
    let period = parse_meta(&meta, "period_hint", path)?;
    let id = meta.get("source_id").cloned().unwrap_or_else(|| path.display().to_string());
    read_clip_file(path, period, &id)
}

pub fn load_sample(path: &Path, task: TaskKind) -> Result<LabeledClip> {
    let meta = read_meta(path)?;
    let clip = load_clip(path)?;
    match task {
        TaskKind::Classification => {
            let label = parse_meta(&meta, "label", path)?
                .ok_or_else(|| Error::format(meta_path(path), "no label for a classification task"))?;
            Ok(LabeledClip::with_class(clip, label))
        }
        TaskKind::Segmentation => {
            let mask = read_mask_file(&mask_path(path))?;
            LabeledClip::with_mask(clip, mask)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from("path\tsplit\n");
    for e in entries {
        text.push_str(&format!("{}\t{}\n", e.path.display(), e.split.as_str()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative clip paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (p, s) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {} needs path<TAB>split", n + 1)))?;
        let split = s.trim().parse().map_err(|e: Error| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(ManifestEntry {
            path: base.join(p),
            split,
        });
    }
    Ok(out)
}

pub fn load_split_clips(manifest: &Path, split: Split) -> Result<Vec<VideoClip>> {
    read_manifest(manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_clip(&e.path))
        .collect()
}

pub fn load_split_samples(manifest: &Path, split: Split, task: TaskKind) -> Result<Vec<LabeledClip>> {
    read_manifest(manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_sample(&e.path, task))
        .collect()
}

/// Synthetic corpus settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Periods cycled through; a clip's class label is its period's index here.
    pub periods: Vec<usize>,
    pub amplitude: f64,
    pub noise_level: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Directory for generated clips and the manifest.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clips: 200,
            frames: 32,
            height: 64,
            width: 64,
            periods: vec![8, 16],
            amplitude: 0.3,
            noise_level: 0.05,
            seed: 0,
            val_fraction: 0.1,
            test_fraction: 0.2,
            dir: PathBuf::from("data"),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.into(),
                reason,
            })
        };
        if self.n_clips == 0 {
            return bad("n_clips", "must be at least 1".into());
        }
        if self.periods.is_empty() {
            return bad("periods", "needs at least one period".into());
        }
        if let Some(&p) = self.periods.iter().find(|&&p| p < 2 || p > self.frames) {
            return bad("periods", format!("period {p} outside [2, frames]"));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return bad("amplitude", "must lie in [0, 1]".into());
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise_level", "must be >= 0".into());
        }
        for (key, v) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, "must lie in [0, 1)".into());
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return bad("test_fraction", "val_fraction + test_fraction must be < 1".into());
        }
        Ok(())
    }

    pub fn spec(&self, period: usize, phase: f64) -> SyntheticSpec {
        SyntheticSpec::new(self.frames, self.height, self.width, period)
            .with_amplitude(self.amplitude)
            .with_noise(self.noise_level)
            .with_phase(phase)
    }
}

/// One generated sample before it is written.
pub struct GeneratedSample {
    pub clip: VideoClip,
    pub label: usize,
    pub mask: Array3<u8>,
    pub split: Split,
    pub seed: u64,
}

/// Deterministic corpus: clip `i` uses period `periods[i % len]`, a phase and
/// seed drawn from `cfg.seed`, and a split from a seeded permutation.
pub fn generate_corpus(cfg: &DataConfig) -> Result<Vec<GeneratedSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cfg.n_clips).collect();
    order.shuffle(&mut rng);
    let n_test = (cfg.test_fraction * cfg.n_clips as f64).round() as usize;
    let n_val = (cfg.val_fraction * cfg.n_clips as f64).round() as usize;
    let mut split = vec![Split::Train; cfg.n_clips];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        split[i] = Split::Val;
    }
    (0..cfg.n_clips)
        .map(|i| {
            let label = i % cfg.periods.len();
            let period = cfg.periods[label];
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let seed: u64 = rng.random();
            let spec = cfg.spec(period, phase);
            let mut clip = generate_periodic_clip(&spec, seed)?;
            clip.source_id = format!("clip_{i:05}");
            let mask = ellipse_masks(&spec, seed)?;
            Ok(GeneratedSample {
                clip,
                label,
                mask,
                split: split[i],
                seed,
            })
        })
        .collect()
}

/// Generates and writes the corpus; returns the manifest path.
pub fn write_corpus(cfg: &DataConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for s in generate_corpus(cfg)? {
        let rel = PathBuf::from(format!("{}.clip", s.clip.source_id));
        let mut extra = ClipMeta::new();
        extra.insert("seed".into(), s.seed.to_string());
        save_sample(&dir.join(&rel), &s.clip, Some(s.label), Some(&s.mask), &extra)?;
        entries.push(ManifestEntry { path: rel, split: s.split });
    }
    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
