//! Token masking: random, uniform-frame and spatio-temporally consistent.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::tokenizer::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Random,
    UniformFrame,
    Consistent,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Random => "random",
            MaskMode::UniformFrame => "uniform_frame",
            MaskMode::Consistent => "consistent",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskMode::Random),
            "uniform_frame" => Ok(MaskMode::UniformFrame),
            "consistent" => Ok(MaskMode::Consistent),
            other => Err(Error::invalid(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Boolean mask over `(temporal group, spatial position)`; `true` = masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    mask: Array2<bool>,
    ratio: f64,
    mode: MaskMode,
    /// Row sets forced identical by [`replicate_mask_rows`]: `(anchor, partners)`.
    replicated: Vec<(usize, Vec<usize>)>,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} must lie in [0, 1)")));
    }
    Ok(())
}

/// `floor(ratio · n)` without rounding up.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).floor() as usize
}

impl MaskPlan {
    /// Nothing masked.
    pub fn none(n_t: usize, n_s: usize) -> Self {
        Self {
            mask: Array2::from_elem((n_t, n_s), false),
            ratio: 0.0,
            mode: MaskMode::UniformFrame,
            replicated: Vec::new(),
        }
    }

    pub fn from_matrix(mask: Array2<bool>, ratio: f64, mode: MaskMode) -> Self {
        Self {
            mask,
            ratio,
            mode,
            replicated: Vec::new(),
        }
    }

    pub fn matrix(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn replicated(&self) -> &[(usize, Vec<usize>)] {
        &self.replicated
    }

    pub fn n_t(&self) -> usize {
        self.mask.nrows()
    }

    pub fn n_s(&self) -> usize {
        self.mask.ncols()
    }

    pub fn is_masked(&self, t_j: usize, i: usize) -> bool {
        self.mask[[t_j, i]]
    }

    pub fn masked_total(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn row_masked_counts(&self) -> Vec<usize> {
        self.mask.rows().into_iter().map(|r| r.iter().filter(|&&m| m).count()).collect()
    }

    /// Flat token indices (temporal-major) of visible tokens, in order.
    pub fn visible_rows(&self) -> Vec<usize> {
        self.rows_where(false)
    }

    pub fn masked_rows(&self) -> Vec<usize> {
        self.rows_where(true)
    }

    fn rows_where(&self, masked: bool) -> Vec<usize> {
        let n_s = self.n_s();
        self.mask
            .indexed_iter()
            .filter(|(_, &m)| m == masked)
            .map(|((t, i), _)| t * n_s + i)
            .collect()
    }

    /// Visible spatial positions of one temporal group.
    pub fn visible_in_group(&self, t_j: usize) -> Vec<usize> {
        self.mask
            .row(t_j)
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn sample_random_mask<R: Rng + ?Sized>(n_t: usize, n_s: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let n = n_t * n_s;
    let k = masked_count(ratio, n);
    let mut mask = Array2::from_elem((n_t, n_s), false);
    for idx in sample(rng, n, k).into_iter() {
        mask[[idx / n_s, idx % n_s]] = true;
    }
    Ok(MaskPlan::from_matrix(mask, ratio, MaskMode::Random))
}

pub fn sample_uniform_frame_mask<R: Rng + ?Sized>(n_t: usize, n_s: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let k = masked_count(ratio, n_s);
    if k >= n_s && n_s > 0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} masks all {n_s} positions of a group"
        )));
    }
    let mut mask = Array2::from_elem((n_t, n_s), false);
    for t in 0..n_t {
        for i in sample(rng, n_s, k).into_iter() {
            mask[[t, i]] = true;
        }
    }
    Ok(MaskPlan::from_matrix(mask, ratio, MaskMode::UniformFrame))
}

/// Copies the anchor row onto every partner row and tags the plan consistent.
pub fn replicate_mask_rows(plan: &MaskPlan, anchor: usize, partners: &[usize]) -> Result<MaskPlan> {
    if plan.mode == MaskMode::Random {
        return Err(Error::invalid("consistent masking is derived from a uniform-frame plan"));
    }
    let n_t = plan.n_t();
    if anchor >= n_t {
        return Err(Error::invalid(format!("anchor row {anchor} out of range 0..{n_t}")));
    }
    for (k, &p) in partners.iter().enumerate() {
        if p >= n_t {
            return Err(Error::invalid(format!("partner row {p} out of range 0..{n_t}")));
        }
        if p == anchor {
            return Err(Error::invalid(format!("anchor row {anchor} listed as its own partner")));
        }
        if partners[..k].contains(&p) {
            return Err(Error::invalid(format!("partner row {p} listed twice")));
        }
    }
    let mut out = plan.clone();
    let anchor_row = plan.mask.row(anchor).to_owned();
    for &p in partners {
        out.mask.row_mut(p).assign(&anchor_row);
    }
    out.mode = MaskMode::Consistent;
    if !partners.is_empty() {
        out.replicated.push((anchor, partners.to_vec()));
    }
    Ok(out)
}

/// Visible tokens per temporal group, with their `(t_j, i)` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleTokens {
    pub groups: Vec<Mat>,
    pub coords: Vec<Vec<(usize, usize)>>,
    pub n_s: usize,
}

impl VisibleTokens {
    /// Rebuilds the full `N×D` grid, writing `fill` at masked positions.
    pub fn scatter(&self, fill: f64) -> Mat {
        let width = self.groups.first().map_or(0, |g| g.ncols());
        let n = self.groups.len() * self.n_s;
        let mut out = Mat::from_elem((n, width), fill);
        for (group, coords) in self.groups.iter().zip(&self.coords) {
            for (row, &(t, i)) in group.rows().into_iter().zip(coords) {
                out.row_mut(t * self.n_s + i).assign(&row);
            }
        }
        out
    }

    pub fn visible_count(&self) -> usize {
        self.coords.iter().map(Vec::len).sum()
    }
}

/// Selects the visible tokens of every group; token values are not altered.
pub fn apply_mask(tokens: &TokenGrid, plan: &MaskPlan) -> Result<VisibleTokens> {
    if plan.n_t() != tokens.layout.n_t || plan.n_s() != tokens.layout.n_s() {
        return Err(Error::shape(format!(
            "mask {}x{} does not match token grid {}x{}",
            plan.n_t(),
            plan.n_s(),
            tokens.layout.n_t,
            tokens.layout.n_s()
        )));
    }
    let n_s = plan.n_s();
    let mut groups = Vec::with_capacity(plan.n_t());
    let mut coords = Vec::with_capacity(plan.n_t());
    for t in 0..plan.n_t() {
        let vis = plan.visible_in_group(t);
        let rows: Vec<usize> = vis.iter().map(|&i| t * n_s + i).collect();
        groups.push(tokens.tokens.select(ndarray::Axis(0), &rows));
        coords.push(vis.into_iter().map(|i| (t, i)).collect());
    }
    Ok(VisibleTokens { groups, coords, n_s })
}
