//! Spatio-temporal patchification and patch embedding.
//!
//! Patch order is temporal-major: row `t_j * N_S + i` of a [`PatchGrid`]
//! holds temporal group `t_j` and spatial tile `i`, where tiles are numbered
//! row-major across the frame. Inside a patch, values are flattened in
//! `(frame, row, column, channel)` order.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::videodata::{VideoClip, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub patch_t: usize,
    pub embed_dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_h: 16,
            patch_w: 16,
            patch_t: 4,
            embed_dim: 64,
        }
    }
}

impl PatchConfig {
    pub fn new(patch_h: usize, patch_w: usize, patch_t: usize, embed_dim: usize) -> Self {
        Self {
            patch_h,
            patch_w,
            patch_t,
            embed_dim,
        }
    }

    /// Values per flattened patch, `c·t·h·w`.
    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_t * self.patch_h * self.patch_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.patch_t == 0 {
            return Err(Error::invalid("patch sizes must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        Ok(())
    }

    /// Token layout for a `T×H×W` clip, rejecting non-divisible axes.
    pub fn layout(&self, frames: usize, height: usize, width: usize) -> Result<GridLayout> {
        self.validate()?;
        for (axis, size, patch) in [
            ("T", frames, self.patch_t),
            ("H", height, self.patch_h),
            ("W", width, self.patch_w),
        ] {
            if size == 0 || size % patch != 0 {
                return Err(Error::NotDivisible { axis, size, patch });
            }
        }
        Ok(GridLayout {
            n_t: frames / self.patch_t,
            n_h: height / self.patch_h,
            n_w: width / self.patch_w,
        })
    }
}

/// Number of patches along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl GridLayout {
    /// Spatial positions per temporal group.
    pub fn n_s(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn total(&self) -> usize {
        self.n_t * self.n_s()
    }

    pub fn row(&self, t_j: usize, i: usize) -> usize {
        t_j * self.n_s() + i
    }
}

/// Raw pixel patches, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub layout: GridLayout,
    pub patches: Array2<f64>,
}

impl PatchGrid {
    pub fn patch(&self, t_j: usize, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.patches.row(self.layout.row(t_j, i))
    }
}

/// Embedded tokens, one row per token in patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub layout: GridLayout,
    pub tokens: Mat,
}

fn patch_row_index(cfg: &PatchConfig, layout: &GridLayout, f: usize, y: usize, x: usize) -> (usize, usize) {
    let (t_j, dt) = (f / cfg.patch_t, f % cfg.patch_t);
    let (ty, dy) = (y / cfg.patch_h, y % cfg.patch_h);
    let (tx, dx) = (x / cfg.patch_w, x % cfg.patch_w);
    let row = layout.row(t_j, ty * layout.n_w + tx);
    let col = ((dt * cfg.patch_h + dy) * cfg.patch_w + dx) * CHANNELS;
    (row, col)
}

/// Token row of pixel `(f, y, x)` and its index among the patch's `t·h·w` pixels.
pub fn pixel_slot(cfg: &PatchConfig, layout: &GridLayout, f: usize, y: usize, x: usize) -> (usize, usize) {
    let (row, col) = patch_row_index(cfg, layout, f, y, x);
    (row, col / CHANNELS)
}

/// Splits a `T×H×W×c` array into flattened patches.
pub fn patchify_frames(frames: &Array4<f64>, cfg: &PatchConfig) -> Result<PatchGrid> {
    let (t, h, w, c) = frames.dim();
    if c != CHANNELS {
        return Err(Error::shape(format!("expected {CHANNELS} channels, got {c}")));
    }
    let layout = cfg.layout(t, h, w)?;
    let mut patches = Array2::zeros((layout.total(), cfg.patch_dim()));
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let (row, col) = patch_row_index(cfg, &layout, f, y, x);
                for ch in 0..c {
                    patches[[row, col + ch]] = frames[[f, y, x, ch]];
                }
            }
        }
    }
    Ok(PatchGrid { layout, patches })
}

pub fn patchify(clip: &VideoClip, cfg: &PatchConfig) -> Result<PatchGrid> {
    patchify_frames(clip.frames(), cfg)
}

/// Reassembles a `T×H×W×c` array. Exact inverse of [`patchify_frames`].
pub fn unpatchify_frames(grid: &PatchGrid, cfg: &PatchConfig, height: usize, width: usize, frames: usize) -> Result<Array4<f64>> {
    let layout = cfg.layout(frames, height, width)?;
    if layout != grid.layout || grid.patches.dim() != (layout.total(), cfg.patch_dim()) {
        return Err(Error::shape(format!(
            "grid {:?} with {:?} values does not match a {frames}x{height}x{width} clip",
            grid.layout,
            grid.patches.dim()
        )));
    }
    let mut out = Array4::zeros((frames, height, width, CHANNELS));
    for f in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let (row, col) = patch_row_index(cfg, &layout, f, y, x);
                for ch in 0..CHANNELS {
                    out[[f, y, x, ch]] = grid.patches[[row, col + ch]];
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(grid: &PatchGrid, cfg: &PatchConfig, height: usize, width: usize, frames: usize) -> Result<VideoClip> {
    let arr = unpatchify_frames(grid, cfg, height, width, frames)?;
    VideoClip::new(arr, None, "reconstruction")
}

/// `tokens = patches · projection + positions`.
pub fn embed_tokens(grid: &PatchGrid, projection: &Mat, positions: &Mat) -> Result<TokenGrid> {
    let pd = grid.patches.ncols();
    if projection.nrows() != pd {
        return Err(Error::shape(format!(
            "projection has {} rows, patches have {pd} values",
            projection.nrows()
        )));
    }
    if positions.dim() != (grid.layout.total(), projection.ncols()) {
        return Err(Error::shape(format!(
            "position table {:?} does not match {} tokens of width {}",
            positions.dim(),
            grid.layout.total(),
            projection.ncols()
        )));
    }
    let tokens = grid.patches.dot(projection) + positions;
    Ok(TokenGrid {
        layout: grid.layout,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(t: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((t, h, w, 3), |_| rng.random::<f64>())
    }

    #[test]
    fn full_scale_token_counts() {
        let cfg = PatchConfig::default();
        let layout = cfg.layout(32, 224, 224).unwrap();
        assert_eq!(layout.n_s(), 196);
        assert_eq!(layout.n_t, 8);
        assert_eq!(layout.total(), 1568);
        assert_eq!(cfg.patch_dim(), 3 * 4 * 16 * 16);
    }

    #[test]
    fn constant_clip_gives_constant_patches() {
        let frames = Array4::from_elem((8, 32, 32, 3), 0.5);
        let grid = patchify_frames(&frames, &PatchConfig::new(16, 16, 4, 8)).unwrap();
        assert!(grid.patches.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_non_divisible_axis() {
        let frames = Array4::zeros((8, 30, 32, 3));
        match patchify_frames(&frames, &PatchConfig::new(16, 16, 4, 8)) {
            Err(Error::NotDivisible { axis, .. }) => assert_eq!(axis, "H"),
            other => panic!("unexpected {other:?}"),
        }
        let frames = Array4::zeros((6, 32, 32, 3));
        match patchify_frames(&frames, &PatchConfig::new(16, 16, 4, 8)) {
            Err(Error::NotDivisible { axis, .. }) => assert_eq!(axis, "T"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patch_contains_its_pixel_block() {
        let frames = random_frames(8, 16, 24, 1);
        let cfg = PatchConfig::new(8, 8, 4, 4);
        let grid = patchify_frames(&frames, &cfg).unwrap();
        // group 1, tile (row 1, col 2) → i = 1*3 + 2
        let patch = grid.patch(1, 5);
        let mut k = 0;
        for f in 4..8 {
            for y in 8..16 {
                for x in 16..24 {
                    for c in 0..3 {
                        assert_eq!(patch[k], frames[[f, y, x, c]]);
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn single_patch_grid() {
        let frames = random_frames(2, 4, 4, 2);
        let cfg = PatchConfig::new(4, 4, 2, 1);
        let grid = patchify_frames(&frames, &cfg).unwrap();
        assert_eq!(grid.patches.dim(), (1, 96));
        assert_eq!(grid.patches.row(0).to_vec(), frames.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn swapping_patches_swaps_pixel_blocks() {
        let frames = random_frames(8, 16, 16, 3);
        let cfg = PatchConfig::new(8, 8, 4, 4);
        let mut grid = patchify_frames(&frames, &cfg).unwrap();
        let (a, b) = (grid.layout.row(0, 1), grid.layout.row(1, 2));
        let ra = grid.patches.row(a).to_owned();
        let rb = grid.patches.row(b).to_owned();
        grid.patches.row_mut(a).assign(&rb);
        grid.patches.row_mut(b).assign(&ra);
        let out = unpatchify_frames(&grid, &cfg, 16, 16, 8).unwrap();
        for f in 0..8 {
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        // tile 1 = (0, 8..16), tile 2 = (8..16, 0..8)
                        let in_a = f < 4 && y < 8 && x >= 8;
                        let in_b = f >= 4 && y >= 8 && x < 8;
                        let src = if in_a {
                            frames[[f + 4, y + 8, x - 8, c]]
                        } else if in_b {
                            frames[[f - 4, y - 8, x + 8, c]]
                        } else {
                            frames[[f, y, x, c]]
                        };
                        assert_eq!(out[[f, y, x, c]], src);
                    }
                }
            }
        }
    }

    #[test]
    fn unpatchify_rejects_mismatch() {
        let frames = random_frames(4, 8, 8, 4);
        let cfg = PatchConfig::new(4, 4, 2, 1);
        let grid = patchify_frames(&frames, &cfg).unwrap();
        assert!(unpatchify_frames(&grid, &cfg, 8, 8, 8).is_err());
        assert!(unpatchify_frames(&grid, &cfg, 8, 12, 4).is_err());
    }

    #[test]
    fn embedding_examples() {
        let frames = random_frames(4, 8, 8, 5);
        let cfg = PatchConfig::new(4, 4, 2, 3);
        let grid = patchify_frames(&frames, &cfg).unwrap();
        let n = grid.layout.total();
        let pd = cfg.patch_dim();

        let zero = embed_tokens(&grid, &Mat::zeros((pd, 3)), &Mat::zeros((n, 3))).unwrap();
        assert!(zero.tokens.iter().all(|&v| v == 0.0));

        let ident = embed_tokens(&grid, &Mat::eye(pd), &Mat::zeros((n, pd))).unwrap();
        assert_eq!(ident.tokens, grid.patches);

        assert!(embed_tokens(&grid, &Mat::zeros((pd + 1, 3)), &Mat::zeros((n, 3))).is_err());
        assert!(embed_tokens(&grid, &Mat::zeros((pd, 3)), &Mat::zeros((n, 4))).is_err());
    }

    #[test]
    fn identical_patches_differ_by_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = Array4::from_elem((4, 8, 8, 3), 0.25);
        let cfg = PatchConfig::new(4, 4, 2, 5);
        let grid = patchify_frames(&frames, &cfg).unwrap();
        let proj = Mat::from_shape_fn((cfg.patch_dim(), 5), |_| rng.random_range(-1.0..1.0));
        let pos = Mat::from_shape_fn((grid.layout.total(), 5), |_| rng.random_range(-1.0..1.0));
        let tok = embed_tokens(&grid, &proj, &pos).unwrap();
        for (a, b) in [(0, 3), (1, 6), (2, 7)] {
            let lhs = &tok.tokens.row(a) - &tok.tokens.row(b);
            let rhs = &pos.row(a) - &pos.row(b);
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                assert!((l - r).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(seed in any::<u64>(), nt in 1usize..3, nh in 1usize..3, nw in 1usize..3) {
            let cfg = PatchConfig::new(4, 2, 2, 1);
            let frames = random_frames(nt * 2, nh * 4, nw * 2, seed);
            let grid = patchify_frames(&frames, &cfg).unwrap();
            let back = unpatchify_frames(&grid, &cfg, nh * 4, nw * 2, nt * 2).unwrap();
            prop_assert_eq!(back, frames);
        }

        #[test]
        fn embedding_is_affine(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let cfg = PatchConfig::new(2, 2, 2, 3);
            let g1 = patchify_frames(&random_frames(4, 4, 4, seed), &cfg).unwrap();
            let g2 = patchify_frames(&random_frames(4, 4, 4, seed.wrapping_add(1)), &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let proj = Mat::from_shape_fn((cfg.patch_dim(), 3), |_| rng.random_range(-1.0..1.0));
            let pos = Mat::from_shape_fn((g1.layout.total(), 3), |_| rng.random_range(-1.0..1.0));
            let mix = PatchGrid { layout: g1.layout, patches: &g1.patches * a + &g2.patches * b };
            let lhs = embed_tokens(&mix, &proj, &pos).unwrap().tokens - &pos;
            let e1 = embed_tokens(&g1, &proj, &pos).unwrap().tokens - &pos;
            let e2 = embed_tokens(&g2, &proj, &pos).unwrap().tokens - &pos;
            let rhs = e1 * a + e2 * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
