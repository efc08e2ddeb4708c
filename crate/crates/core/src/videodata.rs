//! Synthetic periodic clips and cycle-length normalization.
//!
//! Clips are stored as `T×H×W×C` arrays with values in `[0, 1]`. The
//! synthetic source draws a bright ellipse whose radius oscillates with a
//! fixed period, optionally corrupted by multiplicative speckle.

use std::f64::consts::PI;

use ndarray::{s, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Array4<f64>,
    period_hint: Option<usize>,
    pub source_id: String,
}

impl VideoClip {
    /// Validates the frame array (`T×H×W×3`, values in `[0,1]`) and period hint.
    pub fn new(frames: Array4<f64>, period_hint: Option<usize>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        let (t, h, w, c) = frames.dim();
        let reject = |reason: String| Error::ClipRejected {
            id: source_id.clone(),
            reason,
        };
        if t == 0 || h == 0 || w == 0 {
            return Err(reject(format!("empty clip {t}x{h}x{w}")));
        }
        if c != CHANNELS {
            return Err(reject(format!("expected {CHANNELS} channels, got {c}")));
        }
        if let Some(bad) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(reject(format!("pixel value {bad} outside [0,1]")));
        }
        if let Some(p) = period_hint {
            if p < 2 || p > t {
                return Err(reject(format!("period_hint {p} outside [2, {t}]")));
            }
        }
        Ok(Self {
            frames,
            period_hint,
            source_id,
        })
    }

    /// Builds a three-channel clip from a single-channel `T×H×W×1` array.
    pub fn from_grayscale(frames: Array4<f64>, period_hint: Option<usize>, source_id: impl Into<String>) -> Result<Self> {
        let rgb = replicate_channels(&frames)?;
        Self::new(rgb, period_hint, source_id)
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f64> {
        self.frames
    }

    pub fn period_hint(&self) -> Option<usize> {
        self.period_hint
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn frame(&self, f: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(0), f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub period: usize,
    pub amplitude: f64,
    pub noise_level: f64,
    #[serde(default)]
    pub phase_offset: f64,
}

impl SyntheticSpec {
    pub fn new(frames: usize, height: usize, width: usize, period: usize) -> Self {
        Self {
            frames,
            height,
            width,
            period,
            amplitude: 0.3,
            noise_level: 0.0,
            phase_offset: 0.0,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn with_noise(mut self, noise_level: f64) -> Self {
        self.noise_level = noise_level;
        self
    }

    pub fn with_phase(mut self, phase_offset: f64) -> Self {
        self.phase_offset = phase_offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("clip dimensions must be positive"));
        }
        if self.period < 2 {
            return Err(Error::invalid(format!("period {} must be at least 2", self.period)));
        }
        if self.frames < self.period {
            return Err(Error::invalid(format!(
                "T = {} is shorter than one period ({}); a clip must contain a complete cycle",
                self.frames, self.period
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::invalid(format!("amplitude {} outside [0,1]", self.amplitude)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::invalid(format!("noise_level {} must be >= 0", self.noise_level)));
        }
        if !(0.0..2.0 * PI).contains(&self.phase_offset) {
            return Err(Error::invalid(format!("phase_offset {} outside [0, 2pi)", self.phase_offset)));
        }
        Ok(())
    }
}

/// Ellipse geometry drawn from the seed, in fractions of the frame size.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    foreground: f64,
    background: f64,
}

impl Geometry {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            cy: rng.random_range(0.4..0.6),
            cx: rng.random_range(0.4..0.6),
            ry: rng.random_range(0.18..0.28),
            rx: rng.random_range(0.14..0.24),
            foreground: rng.random_range(0.7..0.9),
            background: rng.random_range(0.05..0.15),
        }
    }
}

/// Radius scale of the ellipse at `phase_index` in `0..period`; largest at
/// phase zero and smallest half a period later.
fn radius_scale(spec: &SyntheticSpec, phase_index: usize) -> f64 {
    let angle = 2.0 * PI * phase_index as f64 / spec.period as f64 + spec.phase_offset;
    1.0 + spec.amplitude * angle.cos()
}

/// Signed "inside-ness" of pixel `(y, x)` for the ellipse at a radius scale;
/// positive inside, negative outside, roughly in pixels along the minor axis.
fn ellipse_field(geo: &Geometry, spec: &SyntheticSpec, scale: f64, y: usize, x: usize) -> f64 {
    let h = spec.height as f64;
    let w = spec.width as f64;
    let dy = (y as f64 + 0.5 - geo.cy * h) / (geo.ry * h);
    let dx = (x as f64 + 0.5 - geo.cx * w) / (geo.rx * w);
    let r = (dy * dy + dx * dx).sqrt();
    (scale - r) * geo.rx.min(geo.ry) * h.min(w)
}

fn render_frame(geo: &Geometry, spec: &SyntheticSpec, phase_index: usize) -> ndarray::Array2<f64> {
    let scale = radius_scale(spec, phase_index);
    ndarray::Array2::from_shape_fn((spec.height, spec.width), |(y, x)| {
        let inside = ellipse_field(geo, spec, scale, y, x);
        // one-pixel soft edge
        let cover = 1.0 / (1.0 + (-2.0 * inside).exp());
        geo.background + (geo.foreground - geo.background) * cover
    })
}

/// Foreground mask of the noiseless ellipse for every frame: `T×H×W`, 1 inside.
pub fn ellipse_masks(spec: &SyntheticSpec, seed: u64) -> Result<ndarray::Array3<u8>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::sample(&mut rng);
    let mut out = ndarray::Array3::zeros((spec.frames, spec.height, spec.width));
    for f in 0..spec.frames {
        let scale = radius_scale(spec, f % spec.period);
        for y in 0..spec.height {
            for x in 0..spec.width {
                if ellipse_field(&geo, spec, scale, y, x) > 0.0 {
                    out[[f, y, x]] = 1;
                }
            }
        }
    }
    Ok(out)
}

/// Generates a periodic clip. Frame `f` depends only on `(f mod period, seed)`
/// when `noise_level` is zero.
pub fn generate_periodic_clip(spec: &SyntheticSpec, seed: u64) -> Result<VideoClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::sample(&mut rng);
    let cycle: Vec<_> = (0..spec.period).map(|p| render_frame(&geo, spec, p)).collect();

    let mut frames = Array4::zeros((spec.frames, spec.height, spec.width, CHANNELS));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    for f in 0..spec.frames {
        let base = &cycle[f % spec.period];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut v = base[[y, x]];
                if spec.noise_level > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut noise_rng);
                    v = (v * (1.0 + spec.noise_level * n)).clamp(0.0, 1.0);
                }
                frames.slice_mut(s![f, y, x, ..]).fill(v);
            }
        }
    }
    VideoClip::new(frames, Some(spec.period), format!("synthetic-{seed}"))
}

/// Mirrors a half cycle `f1..fK` into `f1..fK, f(K-1)..f2`, length `2K-2`.
pub fn reverse_pad<F: Clone>(half_cycle: &[F]) -> Result<Vec<F>> {
    let k = half_cycle.len();
    if k < 2 {
        return Err(Error::invalid(format!("reverse_pad needs at least 2 frames, got {k}")));
    }
    let mut out = Vec::with_capacity(2 * k - 2);
    out.extend_from_slice(half_cycle);
    out.extend(half_cycle[1..k - 1].iter().rev().cloned());
    Ok(out)
}

/// Crops or cyclically extends a clip to exactly `target` frames.
///
/// Clips without a period hint are first mirrored with [`reverse_pad`], so the
/// repeated unit is a full cycle.
pub fn fit_to_length(clip: &VideoClip, target: usize) -> Result<VideoClip> {
    if target == 0 {
        return Err(Error::invalid("target length must be at least 1"));
    }
    let t = clip.len();
    if t >= target {
        let frames = clip.frames.slice(s![..target, .., .., ..]).to_owned();
        let hint = clip.period_hint.filter(|&p| p <= target);
        return VideoClip::new(frames, hint, clip.source_id.clone());
    }

    let (unit, hint): (Vec<usize>, Option<usize>) = match clip.period_hint {
        Some(p) => ((0..t).collect(), Some(p)),
        None if t >= 2 => {
            let idx = reverse_pad(&(0..t).collect::<Vec<_>>())?;
            let p = idx.len();
            (idx, Some(p))
        }
        None => (vec![0], None),
    };
    let order: Vec<usize> = (0..target).map(|i| unit[i % unit.len()]).collect();
    let frames = clip.frames.select(Axis(0), &order);
    let hint = hint.filter(|&p| p >= 2 && p <= target);
    VideoClip::new(frames, hint, clip.source_id.clone())
}

fn replicate_channels(frames: &Array4<f64>) -> Result<Array4<f64>> {
    match frames.dim().3 {
        CHANNELS => Ok(frames.clone()),
        1 => {
            let (t, h, w, _) = frames.dim();
            Ok(Array4::from_shape_fn((t, h, w, CHANNELS), |(f, y, x, _)| frames[[f, y, x, 0]]))
        }
        c => Err(Error::shape(format!("expected 1 or {CHANNELS} channels, got {c}"))),
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping. Accepts one
/// or three channels and always returns three.
pub fn resize_frames(frames: &Array4<f64>, height: usize, width: usize) -> Result<Array4<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("target size {height}x{width} must be positive")));
    }
    let rgb = replicate_channels(frames)?;
    let (t, h_in, w_in, c) = rgb.dim();
    if h_in == height && w_in == width {
        return Ok(rgb);
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = taps(h_in, height);
    let xs = taps(w_in, width);
    let mut out = Array4::zeros((t, height, width, c));
    for f in 0..t {
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                for ch in 0..c {
                    let top = rgb[[f, y0, x0, ch]] * (1.0 - wx) + rgb[[f, y0, x1, ch]] * wx;
                    let bottom = rgb[[f, y1, x0, ch]] * (1.0 - wx) + rgb[[f, y1, x1, ch]] * wx;
                    out[[f, oy, ox, ch]] = (top * (1.0 - wy) + bottom * wy).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Resizes a clip to `height×width`.
pub fn normalize_clip(clip: &VideoClip, height: usize, width: usize) -> Result<VideoClip> {
    let frames = resize_frames(&clip.frames, height, width)?;
    VideoClip::new(frames, clip.period_hint, clip.source_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_abs_diff(clip: &VideoClip, a: usize, b: usize) -> f64 {
        let d = &clip.frame(a) - &clip.frame(b);
        d.mapv(f64::abs).mean().unwrap()
    }

    #[test]
    fn noiseless_clip_repeats_at_period() {
        let spec = SyntheticSpec::new(32, 64, 64, 8).with_amplitude(0.3);
        let clip = generate_periodic_clip(&spec, 0).unwrap();
        assert_eq!(clip.period_hint(), Some(8));
        for f in 0..24 {
            assert_eq!(clip.frame(f), clip.frame(f + 8));
        }
        assert!(mean_abs_diff(&clip, 0, 2) > 0.0);
    }

    #[test]
    fn zero_amplitude_is_static() {
        for period in [2, 5, 8] {
            let spec = SyntheticSpec::new(16, 16, 16, period).with_amplitude(0.0);
            let clip = generate_periodic_clip(&spec, 3).unwrap();
            for f in 1..16 {
                assert_eq!(clip.frame(0), clip.frame(f));
            }
        }
    }

    #[test]
    fn noisy_in_phase_frames_closer_than_anti_phase() {
        let spec = SyntheticSpec::new(32, 64, 64, 8).with_noise(0.05);
        let clip = generate_periodic_clip(&spec, 0).unwrap();
        let same = mean_abs_diff(&clip, 0, 8);
        let anti = mean_abs_diff(&clip, 0, 4);
        assert!(same < anti, "in-phase {same} vs anti-phase {anti}");
    }

    #[test]
    fn generator_rejects_bad_specs() {
        assert!(generate_periodic_clip(&SyntheticSpec::new(6, 8, 8, 8), 0).is_err());
        assert!(generate_periodic_clip(&SyntheticSpec::new(16, 8, 8, 8).with_amplitude(1.5), 0).is_err());
        assert!(generate_periodic_clip(&SyntheticSpec::new(16, 8, 8, 1), 0).is_err());
    }

    #[test]
    fn generated_values_stay_in_unit_range() {
        let spec = SyntheticSpec::new(16, 32, 32, 4).with_noise(0.8).with_amplitude(1.0);
        let clip = generate_periodic_clip(&spec, 9).unwrap();
        assert!(clip.frames().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reverse_pad_examples() {
        assert_eq!(reverse_pad(&[1, 2, 3]).unwrap(), vec![1, 2, 3, 2]);
        assert_eq!(reverse_pad(&[1, 2]).unwrap(), vec![1, 2]);
        assert!(reverse_pad(&[1]).is_err());
        assert!(reverse_pad::<i32>(&[]).is_err());
    }

    #[test]
    fn reverse_pad_tiles_periodically() {
        for k in 2..10 {
            let half: Vec<usize> = (0..k).collect();
            let cycle = reverse_pad(&half).unwrap();
            let p = 2 * k - 2;
            assert_eq!(cycle.len(), p);
            assert_eq!(&cycle[..k], &half[..]);
            let tiled: Vec<usize> = cycle.iter().chain(cycle.iter()).copied().collect();
            for i in 0..p {
                assert_eq!(tiled[i], tiled[i + p]);
            }
        }
    }

    fn ramp_clip(t: usize, hint: Option<usize>) -> VideoClip {
        let frames = Array4::from_shape_fn((t, 4, 4, 3), |(f, y, x, _)| ((f * 16 + y * 4 + x) % 97) as f64 / 97.0);
        VideoClip::new(frames, hint, "ramp").unwrap()
    }

    #[test]
    fn fit_to_length_crops_and_keeps_identity() {
        let clip = ramp_clip(40, Some(10));
        let cropped = fit_to_length(&clip, 32).unwrap();
        assert_eq!(cropped.len(), 32);
        assert_eq!(cropped.frames(), &clip.frames().slice(s![..32, .., .., ..]).to_owned());

        let clip = ramp_clip(32, Some(8));
        assert_eq!(fit_to_length(&clip, 32).unwrap(), clip);
    }

    #[test]
    fn fit_to_length_tiles_with_hint() {
        let clip = ramp_clip(10, Some(10));
        let out = fit_to_length(&clip, 32).unwrap();
        assert_eq!(out.len(), 32);
        for i in 0..22 {
            assert_eq!(out.frame(i), out.frame(i + 10));
        }
        assert_eq!(out.period_hint(), Some(10));
    }

    #[test]
    fn fit_to_length_mirrors_half_cycles() {
        let clip = ramp_clip(5, None);
        let out = fit_to_length(&clip, 20).unwrap();
        assert_eq!(out.period_hint(), Some(8));
        let expected = [0, 1, 2, 3, 4, 3, 2, 1];
        for i in 0..20 {
            assert_eq!(out.frame(i), clip.frame(expected[i % 8]));
        }
    }

    #[test]
    fn grayscale_resize_replicates_channels() {
        let gray = Array4::from_shape_fn((2, 112, 112, 1), |(f, y, x, _)| ((f + y * 3 + x) % 50) as f64 / 50.0);
        let out = resize_frames(&gray, 224, 224).unwrap();
        assert_eq!(out.dim(), (2, 224, 224, 3));
        for v in out.lanes(Axis(3)) {
            assert_eq!(v[0], v[1]);
            assert_eq!(v[1], v[2]);
        }
    }

    #[test]
    fn resize_identity_and_constants() {
        let clip = ramp_clip(3, None);
        let same = normalize_clip(&clip, 4, 4).unwrap();
        assert_eq!(same, clip);

        let constant = VideoClip::new(Array4::from_elem((2, 7, 5, 3), 0.375), None, "c").unwrap();
        let out = normalize_clip(&constant, 13, 9).unwrap();
        assert!(out.frames().iter().all(|&v| (v - 0.375).abs() < 1e-15));
        assert!(normalize_clip(&constant, 0, 9).is_err());
    }

    #[test]
    fn clip_validation() {
        assert!(VideoClip::new(Array4::from_elem((2, 2, 2, 3), 1.5), None, "x").is_err());
        assert!(VideoClip::new(Array4::from_elem((2, 2, 2, 1), 0.5), None, "x").is_err());
        assert!(VideoClip::new(Array4::from_elem((4, 2, 2, 3), 0.5), Some(5), "x").is_err());
        assert!(VideoClip::new(Array4::from_elem((4, 2, 2, 3), 0.5), Some(1), "x").is_err());
    }
}
