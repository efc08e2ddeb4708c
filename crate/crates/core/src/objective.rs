//! Training objective: masked reconstruction, temporal self-similarity,
//! triplet mining and the periodic triplet loss.
//!
//! A step runs two passes. The first uses a uniform-frame mask; its
//! reconstruction gives `L_r` and its projected group embeddings give the
//! self-similarity matrix from which triplets are mined. The second pass
//! re-encodes the clip once per triplet with the anchor's mask row copied
//! onto the positive and negative rows, and the triplet loss on those
//! embeddings gives `L_c`. Mining is a constant: no gradient flows through
//! the choice of triplets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::backbone::{self, EncodedGraph, FrameEmbeddingSequence, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::{replicate_mask_rows, sample_random_mask, sample_uniform_frame_mask, MaskMode, MaskPlan};
use crate::nn::{Binder, ParamStore, Trainable};
use crate::tokenizer::PatchGrid;

/// Mean over masked patches of the per-patch mean squared error.
pub fn reconstruction_loss(pred: &PatchGrid, target: &PatchGrid, plan: &MaskPlan) -> Result<f64> {
    if pred.patches.dim() != target.patches.dim() || pred.layout != target.layout {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.patches.dim(),
            target.patches.dim()
        )));
    }
    if plan.n_t() * plan.n_s() != pred.patches.nrows() {
        return Err(Error::shape("mask does not cover the patch grid"));
    }
    let rows = plan.masked_rows();
    if rows.is_empty() {
        return Err(Error::invalid("reconstruction loss is undefined without masked patches"));
    }
    let p = pred.patches.select(ndarray::Axis(0), &rows);
    let t = target.patches.select(ndarray::Axis(0), &rows);
    let sq = (p - t).mapv(|x| x * x);
    Ok(sq.sum() / sq.len() as f64)
}

fn reconstruction_loss_graph(g: &mut Graph, pred: Var, target: &PatchGrid, plan: &MaskPlan) -> Result<Var> {
    let rows = plan.masked_rows();
    if rows.is_empty() {
        return Err(Error::invalid("reconstruction loss is undefined without masked patches"));
    }
    let p = g.gather_rows(pred, &rows);
    let t = g.constant(target.patches.select(ndarray::Axis(0), &rows));
    let diff = g.sub(p, t);
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}

/// Pairwise Euclidean distances between unit-normalized group embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Mat,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }

    pub fn is_symmetric_zero_diagonal(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| self.s[[i, i]] == 0.0 && (0..n).all(|j| self.s[[i, j]] == self.s[[j, i]]))
    }
}

fn unit_rows(z: &Mat) -> Result<Mat> {
    let mut out = z.clone();
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid(format!("embedding row {k} has norm {norm}")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

fn row_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn self_similarity(z: &FrameEmbeddingSequence) -> Result<SimilarityMatrix> {
    let n = z.z.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("self-similarity needs at least 2 groups, got {n}")));
    }
    let u = unit_rows(&z.z)?;
    let mut s = Mat::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = row_distance(u.row(i), u.row(j));
            s[[i, j]] = d;
            s[[j, i]] = d;
        }
    }
    Ok(SimilarityMatrix { s })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSet {
    pub triples: Vec<Triplet>,
    /// Threshold of every anchor, indexed by anchor.
    pub thresholds: Vec<f64>,
    pub skipped_anchors: Vec<usize>,
    pub adjacency_window: usize,
}

impl TripletSet {
    pub fn empty(adjacency_window: usize) -> Self {
        Self {
            triples: Vec::new(),
            thresholds: Vec::new(),
            skipped_anchors: Vec::new(),
            adjacency_window,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Checks `S[a,p] < thres(a) <= S[a,n]` and the adjacency rule for every triple.
    pub fn satisfies_invariants(&self, sim: &SimilarityMatrix) -> bool {
        self.triples.iter().all(|t| {
            let thr = self.thresholds[t.anchor];
            t.positive != t.anchor
                && t.negative != t.anchor
                && sim.s[[t.anchor, t.positive]] < thr
                && thr <= sim.s[[t.anchor, t.negative]]
                && t.anchor.abs_diff(t.negative) > self.adjacency_window
        })
    }
}

/// Threshold and candidate sets of one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub threshold: f64,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Mean distance to the other groups; positives fall strictly below it,
/// negatives at or above it and more than `window` groups away.
pub fn anchor_candidates(sim: &SimilarityMatrix, anchor: usize, window: usize) -> Candidates {
    let n = sim.len();
    let row = sim.s.row(anchor);
    let threshold = (0..n).filter(|&j| j != anchor).map(|j| row[j]).sum::<f64>() / (n - 1) as f64;
    let positives = (0..n).filter(|&j| j != anchor && row[j] < threshold).collect();
    let negatives = (0..n)
        .filter(|&j| row[j] >= threshold && j.abs_diff(anchor) > window)
        .collect();
    Candidates {
        threshold,
        positives,
        negatives,
    }
}

/// One triple per anchor, drawn uniformly from its positive × negative pairs.
/// Anchors with no positive or no negative are skipped.
pub fn mine_triplets<R: Rng + ?Sized>(sim: &SimilarityMatrix, adjacency_window: usize, rng: &mut R) -> TripletSet {
    let n = sim.len();
    let mut set = TripletSet::empty(adjacency_window);
    if n < 3 {
        set.skipped_anchors = (0..n).collect();
        set.thresholds = vec![f64::NAN; n];
        return set;
    }
    for anchor in 0..n {
        let c = anchor_candidates(sim, anchor, adjacency_window);
        set.thresholds.push(c.threshold);
        if c.positives.is_empty() || c.negatives.is_empty() {
            set.skipped_anchors.push(anchor);
            continue;
        }
        let k = rng.random_range(0..c.positives.len() * c.negatives.len());
        set.triples.push(Triplet {
            anchor,
            positive: c.positives[k / c.negatives.len()],
            negative: c.negatives[k % c.negatives.len()],
        });
    }
    set
}

fn hinge(d_ap: f64, d_an: f64, alpha: f64) -> f64 {
    (d_ap - d_an + alpha).max(0.0)
}

/// Mean over triples of `max(0, d(a,p) - d(a,n) + alpha)` on unit-normalized rows.
pub fn triplet_loss(z: &FrameEmbeddingSequence, triples: &TripletSet, alpha: f64) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::invalid("triplet loss needs at least one triple"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("margin {alpha} must be >= 0")));
    }
    let n = z.z.nrows();
    for t in &triples.triples {
        if t.anchor >= n || t.positive >= n || t.negative >= n {
            return Err(Error::invalid(format!("triple {t:?} out of range for {n} groups")));
        }
    }
    let u = unit_rows(&z.z)?;
    let total: f64 = triples
        .triples
        .iter()
        .map(|t| {
            hinge(
                row_distance(u.row(t.anchor), u.row(t.positive)),
                row_distance(u.row(t.anchor), u.row(t.negative)),
                alpha,
            )
        })
        .sum();
    Ok(total / triples.len() as f64)
}

pub fn total_loss(l_r: f64, l_c: f64) -> Result<f64> {
    if !l_r.is_finite() || !l_c.is_finite() {
        return Err(Error::invalid(format!("non-finite loss terms ({l_r}, {l_c})")));
    }
    Ok(l_r + l_c)
}

fn distance_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.square(d);
    let d = g.sum_all(d);
    g.sqrt(d)
}

/// Hinge of one `3×d` embedding block ordered (anchor, positive, negative).
fn triplet_hinge_graph(g: &mut Graph, z3: Var, alpha: f64) -> Var {
    let u = g.normalize_rows(z3);
    let a = g.gather_rows(u, &[0]);
    let p = g.gather_rows(u, &[1]);
    let n = g.gather_rows(u, &[2]);
    let d_ap = distance_graph(g, a, p);
    let d_an = distance_graph(g, a, n);
    let diff = g.sub(d_ap, d_an);
    let margin = g.constant(Mat::from_elem((1, 1), alpha));
    let x = g.add(diff, margin);
    g.relu(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub alpha: f64,
    pub adjacency_window: usize,
    pub enable_contrastive: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            mask_mode: MaskMode::UniformFrame,
            alpha: 0.5,
            adjacency_window: 1,
            enable_contrastive: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub masked_patch_count: usize,
    pub triplet_count: usize,
    pub skipped_anchors: usize,
}

/// Loss nodes of one step.
pub struct StepGraph {
    pub l_r: Var,
    pub l_c: Option<Var>,
    pub total: Var,
    pub triples: TripletSet,
}

/// How pass 2 gets its triplets.
pub enum TripletSource<'a, R: Rng + ?Sized> {
    /// Mine from the pass-1 self-similarity matrix.
    Mine(&'a mut R),
    /// Use the given set unchanged.
    Fixed(&'a TripletSet),
}

/// Pass-1 group embeddings computed off the gradient path.
fn pass_one_embeddings(cfg: &ModelConfig, params: &ParamStore, g: &Graph, enc: &EncodedGraph) -> FrameEmbeddingSequence {
    let mut pg = Graph::new();
    let latents = pg.constant(g.value(enc.latents).clone());
    let global = pg.constant(g.value(enc.global).clone());
    let detached = EncodedGraph {
        latents,
        global,
        rows: enc.rows.clone(),
        groups: enc.groups.clone(),
    };
    let mut b = Binder::new(params, Trainable::None);
    let z = backbone::project_frames_graph(cfg, &mut pg, &mut b, &detached, None);
    FrameEmbeddingSequence { z: pg.value(z).clone() }
}

/// Builds both passes onto `g`.
pub fn build_step_graph<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    obj: &ObjectiveConfig,
    g: &mut Graph,
    b: &mut Binder,
    patches: &PatchGrid,
    plan: &MaskPlan,
    triplets: TripletSource<'_, R>,
) -> Result<StepGraph> {
    let enc = backbone::encode_graph(cfg, g, b, patches, plan)?;
    let pred = backbone::reconstruct_graph(cfg, g, b, &enc, plan);
    let l_r = reconstruction_loss_graph(g, pred, patches, plan)?;

    if !obj.enable_contrastive {
        return Ok(StepGraph {
            l_r,
            l_c: None,
            total: l_r,
            triples: TripletSet::empty(obj.adjacency_window),
        });
    }

    let triples = match triplets {
        TripletSource::Fixed(set) => set.clone(),
        TripletSource::Mine(rng) => {
            let z = pass_one_embeddings(cfg, b.store(), g, &enc);
            let sim = self_similarity(&z)?;
            debug_assert!(sim.is_symmetric_zero_diagonal());
            let set = mine_triplets(&sim, obj.adjacency_window, rng);
            debug_assert!(set.satisfies_invariants(&sim));
            set
        }
    };

    if triples.is_empty() {
        return Ok(StepGraph {
            l_r,
            l_c: None,
            total: l_r,
            triples,
        });
    }

    let mut hinges = Vec::with_capacity(triples.len());
    for t in &triples.triples {
        let consistent = replicate_mask_rows(plan, t.anchor, &[t.positive, t.negative])?;
        let enc2 = backbone::encode_graph(cfg, g, b, patches, &consistent)?;
        let z3 = backbone::project_frames_graph(cfg, g, b, &enc2, Some(&[t.anchor, t.positive, t.negative]));
        hinges.push(triplet_hinge_graph(g, z3, obj.alpha));
    }
    let stacked = if hinges.len() == 1 { hinges[0] } else { g.concat_rows(&hinges) };
    let l_c = g.mean_all(stacked);
    let total = g.add(l_r, l_c);
    Ok(StepGraph {
        l_r,
        l_c: Some(l_c),
        total,
        triples,
    })
}

pub struct StepOutput {
    pub report: LossReport,
    pub grads: ParamStore,
    pub plan: MaskPlan,
    pub triples: TripletSet,
}

/// One two-pass training step on a single clip's patches.
pub fn training_step<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ParamStore,
    obj: &ObjectiveConfig,
    patches: &PatchGrid,
    rng: &mut R,
) -> Result<StepOutput> {
    let layout = cfg.layout()?;
    let plan = match obj.mask_mode {
        MaskMode::Random if !obj.enable_contrastive => sample_random_mask(layout.n_t, layout.n_s(), obj.mask_ratio, rng)?,
        MaskMode::UniformFrame => sample_uniform_frame_mask(layout.n_t, layout.n_s(), obj.mask_ratio, rng)?,
        mode => return Err(Error::invalid(format!("{mode} masking cannot drive a training step here"))),
    };
    let mut g = Graph::new();
    let mut b = Binder::new(params, Trainable::All);
    let step = build_step_graph(cfg, obj, &mut g, &mut b, patches, &plan, TripletSource::Mine(rng))?;
    let l_r = g.scalar(step.l_r);
    let l_c = step.l_c.map_or(0.0, |v| g.scalar(v));
    let l_total = g.scalar(step.total);
    let mut raw = g.backward(step.total);
    let grads = b.gradients(&mut raw);
    let mut full = params.zeros_like();
    full.add_assign(&grads);
    Ok(StepOutput {
        report: LossReport {
            l_r,
            l_c,
            l_total,
            masked_patch_count: plan.masked_total(),
            triplet_count: step.triples.len(),
            skipped_anchors: step.triples.skipped_anchors.len(),
        },
        grads: full,
        plan,
        triples: step.triples,
    })
}

/// Forward-only total loss for a fixed mask and triplet set.
pub fn loss_for_plan(
    cfg: &ModelConfig,
    params: &ParamStore,
    obj: &ObjectiveConfig,
    patches: &PatchGrid,
    plan: &MaskPlan,
    triples: &TripletSet,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, Trainable::None);
    let step = build_step_graph::<rand_chacha::ChaCha8Rng>(cfg, obj, &mut g, &mut b, patches, plan, TripletSource::Fixed(triples))?;
    let l_r = g.scalar(step.l_r);
    let l_c = step.l_c.map_or(0.0, |v| g.scalar(v));
    Ok(LossReport {
        l_r,
        l_c,
        l_total: g.scalar(step.total),
        masked_patch_count: plan.masked_total(),
        triplet_count: triples.len(),
        skipped_anchors: triples.skipped_anchors.len(),
    })
}
