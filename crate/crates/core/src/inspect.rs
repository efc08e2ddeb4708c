//! Temporal self-similarity inspection and its plain-text export.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::masking::{sample_uniform_frame_mask, MaskPlan};
use crate::objective::{self_similarity, SimilarityMatrix};
use crate::tokenizer::patchify;
use crate::videodata::VideoClip;

/// Self-similarity of a clip's group embeddings. Unmasked unless `masked`
/// gives `(ratio, seed)` for a uniform-frame mask.
pub fn clip_similarity(model: &Model, clip: &VideoClip, masked: Option<(f64, u64)>) -> Result<SimilarityMatrix> {
    let grid = patchify(clip, &model.cfg.patch)?;
    let (n_t, n_s) = (grid.layout.n_t, grid.layout.n_s());
    let plan = match masked {
        None => MaskPlan::none(n_t, n_s),
        Some((ratio, seed)) => sample_uniform_frame_mask(n_t, n_s, ratio, &mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    let latents = model.encode(&grid, &plan)?;
    self_similarity(&model.project_frames(&latents)?)
}

/// `# n_t=<N>` followed by one comma-separated row per group.
pub fn similarity_csv(sim: &SimilarityMatrix) -> String {
    let n = sim.s.nrows();
    let mut out = format!("# n_t={n}\n");
    for row in sim.s.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn write_similarity(sim: &SimilarityMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, similarity_csv(sim)).map_err(|e| Error::io(path, e))
}

pub fn read_similarity(path: &Path) -> Result<SimilarityMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .and_then(|h| h.strip_prefix("# n_t="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "missing '# n_t=' header"))?;
    let mut values = Vec::with_capacity(n * n);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        for cell in line.split(',') {
            values.push(cell.trim().parse::<f64>().map_err(|_| Error::format(path, format!("bad number '{cell}'")))?);
        }
    }
    let s = Mat::from_shape_vec((n, n), values).map_err(|_| Error::format(path, "row count disagrees with n_t"))?;
    Ok(SimilarityMatrix { s })
}

/// Mean distance at in-phase and anti-phase group lags for a period spanning
/// `groups_per_period` temporal groups (must be even).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseLagSummary {
    pub in_phase: f64,
    pub anti_phase: f64,
}

impl PhaseLagSummary {
    pub fn ratio(&self) -> f64 {
        self.in_phase / self.anti_phase
    }
}

/// Sums and counts of in-phase (lag ≡ 0) and anti-phase (lag ≡ P/2) entries.
pub fn phase_lag_sums(sim: &SimilarityMatrix, groups_per_period: usize) -> Result<(f64, usize, f64, usize)> {
    if groups_per_period < 2 || groups_per_period % 2 != 0 {
        return Err(Error::invalid(format!(
            "a period of {groups_per_period} groups has no anti-phase lag"
        )));
    }
    let n = sim.s.nrows();
    let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for i in 0..n {
        for j in 0..n {
            let lag = i.abs_diff(j);
            if lag == 0 {
                continue;
            }
            if lag % groups_per_period == 0 {
                a += sim.s[[i, j]];
                na += 1;
            } else if lag % groups_per_period == groups_per_period / 2 {
                b += sim.s[[i, j]];
                nb += 1;
            }
        }
    }
    Ok((a, na, b, nb))
}

pub fn phase_lag_summary(sim: &SimilarityMatrix, groups_per_period: usize) -> Result<PhaseLagSummary> {
    let (a, na, b, nb) = phase_lag_sums(sim, groups_per_period)?;
    if na == 0 || nb == 0 {
        return Err(Error::invalid("clip too short for both lag classes"));
    }
    Ok(PhaseLagSummary {
        in_phase: a / na as f64,
        anti_phase: b / nb as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let s = Mat::from_shape_fn((3, 3), |(i, j)| if i == j { 0.0 } else { 0.1 + 1.0 / (i + j) as f64 });
        let sim = SimilarityMatrix { s };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_similarity(&sim, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("# n_t=3\n"));
        assert_eq!(read_similarity(&p).unwrap(), sim);
    }

    #[test]
    fn lag_classes() {
        // Period of two groups: even lags in phase, odd lags anti-phase.
        let s = Mat::from_shape_fn((4, 4), |(i, j)| if i.abs_diff(j) % 2 == 0 { 0.0 } else { 1.0 });
        let sum = phase_lag_summary(&SimilarityMatrix { s: s.clone() }, 2).unwrap();
        assert_eq!((sum.in_phase, sum.anti_phase), (0.0, 1.0));
        assert!(phase_lag_summary(&SimilarityMatrix { s }, 3).is_err());
    }
}
