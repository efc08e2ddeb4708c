//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured quantity, then asserts. Tolerances are the constants below.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cyclemae_core::ablation::{run_ablation, AblationConfig};
use cyclemae_core::adapt_eval::{
    finetune, overlap_metrics, roc_auc, surface_metrics, FinetuneConfig, LabeledClip, TaskKind,
};
use cyclemae_core::autograd::{Graph, Mat};
use cyclemae_core::backbone::{Model, ModelConfig};
use cyclemae_core::checkpoint::{load_checkpoint, save_checkpoint};
use cyclemae_core::inspect::{clip_similarity, phase_lag_sums, read_similarity, write_similarity};
use cyclemae_core::masking::{
    replicate_mask_rows, sample_random_mask, sample_uniform_frame_mask, MaskMode, MaskPlan,
};
use cyclemae_core::nn::{Binder, ParamStore, Trainable};
use cyclemae_core::objective::{
    anchor_candidates, build_step_graph, loss_for_plan, mine_triplets, reconstruction_loss, ObjectiveConfig,
    SimilarityMatrix, Triplet, TripletSet, TripletSource,
};
use cyclemae_core::pretrain::{
    resume_pretraining, run_pretraining, RunOutput, TrainConfig, TrainState,
};
use cyclemae_core::tokenizer::{patchify, pixel_slot, PatchConfig};
use cyclemae_core::videodata::{ellipse_masks, generate_periodic_clip, SyntheticSpec, VideoClip};

// ------------------------------------------------------------ tolerances

const MASK_SEEDS: u64 = 1000;
const FD_STEP: f64 = 1e-5;
const FD_MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients below it are
/// judged by absolute error.
const FD_REL_FLOOR: f64 = 1e-6;
/// Hinges closer than this to their kink are not finite-differenced.
const HINGE_CLEARANCE: f64 = 1e-3;
const MINING_MATRICES: u64 = 100;
const PERIODICITY_RATIO_MAX: f64 = 0.8;
const PROBE_GAP_MIN: f64 = 10.0;
const METRIC_TOL: f64 = 1e-12;

// Desk-scale pretraining shared by criteria 5 and 6.
const DESK_CLIPS: usize = 200;
const DESK_EPOCHS: usize = 10;
const DESK_LR: f64 = 1e-3;
const DESK_WARMUP: usize = 20;
const DESK_MASK_RATIO: f64 = 0.25;
const HELD_OUT_CLIPS: usize = 20;
const PROBE_TEST_CLIPS: usize = 100;
const PROBE_LABEL_FRACTION: f64 = 0.1;

fn verdict(criterion: u32, pass: bool, detail: impl std::fmt::Display, started: Instant) {
    println!(
        "criterion {criterion}: {} | {detail} | {:.1}s",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

fn same_bits(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ma), (nb, mb))| {
            na == nb && ma.dim() == mb.dim() && ma.iter().zip(mb.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

// ------------------------------------------------------------ 1. masks

#[test]
fn criterion_1_mask_invariants() {
    let started = Instant::now();
    let (n_t, n_s) = (8, 196);
    // floor(r * 196), written out.
    let expected = [(0.25, 49), (0.5, 98), (0.75, 147), (0.9, 176)];
    let mut failures = Vec::new();
    let mut plans = 0usize;
    for seed in 0..MASK_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(ratio, k) in &expected {
            let plan = sample_uniform_frame_mask(n_t, n_s, ratio, &mut rng).unwrap();
            let counts = plan.row_masked_counts();
            if counts.iter().any(|&c| c != k) || plan.masked_total() != n_t * k {
                failures.push(format!("uniform seed {seed} ratio {ratio}: {counts:?}"));
            }

            let random = sample_random_mask(n_t, n_s, ratio, &mut rng).unwrap();
            let total_k = (ratio * (n_t * n_s) as f64).floor() as usize;
            if random.masked_total() != total_k {
                failures.push(format!("random seed {seed} ratio {ratio}: {}", random.masked_total()));
            }

            let anchor = rng.random_range(0..n_t);
            let mut partners: Vec<usize> = (0..n_t).filter(|&t| t != anchor).collect();
            let keep = rng.random_range(1..=partners.len());
            for i in 0..keep {
                let j = rng.random_range(i..partners.len());
                partners.swap(i, j);
            }
            partners.truncate(keep);
            let consistent = replicate_mask_rows(&plan, anchor, &partners).unwrap();
            let m = consistent.matrix();
            let identical = partners.iter().all(|&p| m.row(p) == m.row(anchor));
            let others_kept = (0..n_t)
                .filter(|t| !partners.contains(t))
                .all(|t| m.row(t) == plan.matrix().row(t));
            let counts_kept = consistent.row_masked_counts().iter().all(|&c| c == k);
            if !(identical && others_kept && counts_kept && consistent.mode() == MaskMode::Consistent) {
                failures.push(format!("consistent seed {seed} ratio {ratio} anchor {anchor}"));
            }
            plans += 3;
        }
    }
    verdict(
        1,
        failures.is_empty(),
        format!("{plans} plans, {} violations", failures.len()),
        started,
    );
    assert!(failures.is_empty(), "{:?}", &failures[..failures.len().min(5)]);
}

// ------------------------------------------------------------ 2. masked-only L_r

#[test]
fn criterion_2_reconstruction_loss_sees_only_masked_patches() {
    let started = Instant::now();
    let cfg = ModelConfig::tiny();
    let model = Model::init(cfg.clone(), 7).unwrap();
    let clip = generate_periodic_clip(&SyntheticSpec::new(8, 32, 32, 4).with_noise(0.05), 3).unwrap();
    let target = patchify(&clip, &cfg.patch).unwrap();
    let layout = target.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let plan = sample_uniform_frame_mask(layout.n_t, layout.n_s(), 0.75, &mut rng).unwrap();

    let pred = model.reconstruct(&model.encode(&target, &plan).unwrap(), &plan).unwrap();
    let base = reconstruction_loss(&pred, &target, &plan).unwrap();

    // Visible-position predictions replaced by noise.
    let mut noisy_pred = pred.clone();
    for row in plan.visible_rows() {
        noisy_pred.patches.row_mut(row).mapv_inplace(|_| rng.random_range(-5.0..5.0));
    }
    let l_visible = reconstruction_loss(&noisy_pred, &target, &plan).unwrap();

    // Pixels under masked tokens changed in the encoder input.
    let mut frames = clip.frames().clone();
    let (t, h, w, _) = frames.dim();
    let mut touched = 0;
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let (row, _) = pixel_slot(&cfg.patch, &layout, f, y, x);
                let (t_j, i) = (row / layout.n_s(), row % layout.n_s());
                if plan.is_masked(t_j, i) {
                    frames.slice_mut(ndarray::s![f, y, x, ..]).fill(rng.random_range(0.0..1.0));
                    touched += 1;
                }
            }
        }
    }
    let perturbed = VideoClip::new(frames, clip.period_hint(), "perturbed").unwrap();
    let input = patchify(&perturbed, &cfg.patch).unwrap();
    assert_ne!(input.patches, target.patches);
    let pred2 = model.reconstruct(&model.encode(&input, &plan).unwrap(), &plan).unwrap();
    let l_masked_input = reconstruction_loss(&pred2, &target, &plan).unwrap();

    let pass = base.to_bits() == l_visible.to_bits() && base.to_bits() == l_masked_input.to_bits();
    verdict(
        2,
        pass,
        format!("L_r {base:e}; visible-pred perturbed {l_visible:e}; {touched} masked pixels perturbed {l_masked_input:e}"),
        started,
    );
    assert!(pass);
}

// ------------------------------------------------------------ 3. gradients

struct FdResult {
    max_rel: f64,
    checked: usize,
    worst: String,
}

fn analytic_grads(
    cfg: &ModelConfig,
    params: &ParamStore,
    obj: &ObjectiveConfig,
    patches: &cyclemae_core::PatchGrid,
    plan: &MaskPlan,
    triples: &TripletSet,
) -> ParamStore {
    let mut g = Graph::new();
    let mut b = Binder::new(params, Trainable::All);
    let step = build_step_graph::<ChaCha8Rng>(cfg, obj, &mut g, &mut b, patches, plan, TripletSource::Fixed(triples)).unwrap();
    let mut raw = g.backward(step.total);
    b.gradients(&mut raw)
}

fn finite_difference_check(cfg: &ModelConfig, clip: &VideoClip, triples: &TripletSet, seed: u64) -> FdResult {
    let params = Model::init(cfg.clone(), seed).unwrap().params;
    let patches = patchify(clip, &cfg.patch).unwrap();
    let layout = patches.layout;
    let plan = sample_uniform_frame_mask(layout.n_t, layout.n_s(), 0.75, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let obj = ObjectiveConfig::default();
    let grads = analytic_grads(cfg, &params, &obj, &patches, &plan, triples);

    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Mat::zeros(params.expect(name).dim()));
        for idx in 0..analytic.len() {
            let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
            let orig = params.expect(name)[[r, c]];
            probe.get_mut(name).unwrap()[[r, c]] = orig + FD_STEP;
            let up = loss_for_plan(cfg, &probe, &obj, &patches, &plan, triples).unwrap().l_total;
            probe.get_mut(name).unwrap()[[r, c]] = orig - FD_STEP;
            let down = loss_for_plan(cfg, &probe, &obj, &patches, &plan, triples).unwrap().l_total;
            probe.get_mut(name).unwrap()[[r, c]] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = analytic[[r, c]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{r},{c}] fd {fd:e} analytic {an:e}"));
            }
            checked += 1;
        }
    }
    FdResult {
        max_rel: worst.0,
        checked,
        worst: worst.1,
    }
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let started = Instant::now();
    // Tiny config: two temporal groups, so only L_r contributes.
    let tiny = ModelConfig::tiny();
    let clip = generate_periodic_clip(&SyntheticSpec::new(8, 32, 32, 4).with_noise(0.05), 21).unwrap();
    let a = finite_difference_check(&tiny, &clip, &TripletSet::empty(1), 5);

    // Same blocks over four groups with fixed triplets, so L_c is differentiated too.
    let long = ModelConfig {
        frames: 16,
        ..ModelConfig::tiny()
    };
    let clip16 = generate_periodic_clip(&SyntheticSpec::new(16, 32, 32, 8).with_noise(0.05), 22).unwrap();
    let triples = TripletSet {
        triples: vec![
            Triplet { anchor: 0, positive: 1, negative: 3 },
            Triplet { anchor: 3, positive: 2, negative: 0 },
        ],
        thresholds: vec![0.0; 4],
        skipped_anchors: vec![],
        adjacency_window: 1,
    };
    // Keep every hinge away from its kink.
    let params = Model::init(long.clone(), 6).unwrap().params;
    let patches = patchify(&clip16, &long.patch).unwrap();
    let plan = sample_uniform_frame_mask(4, patches.layout.n_s(), 0.75, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    for t in &triples.triples {
        let single = TripletSet {
            triples: vec![*t],
            ..triples.clone()
        };
        let l_c = loss_for_plan(&long, &params, &ObjectiveConfig::default(), &patches, &plan, &single).unwrap().l_c;
        assert!(l_c > HINGE_CLEARANCE, "hinge {t:?} too close to its kink: {l_c}");
    }
    let b = finite_difference_check(&long, &clip16, &triples, 6);

    let max_rel = a.max_rel.max(b.max_rel);
    let pass = max_rel <= FD_MAX_REL_ERR;
    verdict(
        3,
        pass,
        format!(
            "max rel err {max_rel:.2e} over {} + {} parameters (worst: {} / {})",
            a.checked, b.checked, a.worst, b.worst
        ),
        started,
    );
    assert!(pass);
}

// ------------------------------------------------------------ 4. mining oracle

/// Every admissible (positive, negative) pair in positive-major order.
fn oracle_pairs(s: &Mat, anchor: usize, window: usize) -> (f64, Vec<usize>, Vec<usize>, Vec<(usize, usize)>) {
    let n = s.nrows();
    let mut total = 0.0;
    for j in 0..n {
        if j != anchor {
            total += s[[anchor, j]];
        }
    }
    let thr = total / (n - 1) as f64;
    let pos: Vec<usize> = (0..n).filter(|&j| j != anchor && s[[anchor, j]] < thr).collect();
    let neg: Vec<usize> = (0..n)
        .filter(|&j| j != anchor && s[[anchor, j]] >= thr && anchor.abs_diff(j) > window)
        .collect();
    let mut pairs = Vec::new();
    for &p in &pos {
        for &q in &neg {
            pairs.push((p, q));
        }
    }
    (thr, pos, neg, pairs)
}

fn random_similarity(rng: &mut ChaCha8Rng, n: usize, quantized: bool) -> Mat {
    let mut s = Mat::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let mut v: f64 = rng.random_range(0.0..2.0);
            if quantized {
                v = (v * 4.0).round() / 4.0;
            }
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    s
}

#[test]
fn criterion_4_mining_matches_brute_force() {
    let started = Instant::now();
    let mut mismatches = Vec::new();
    let mut triples = 0;
    for m in 0..MINING_MATRICES {
        let mut gen = ChaCha8Rng::seed_from_u64(10_000 + m);
        // Every third matrix is coarsely quantized to force ties at the threshold.
        let s = random_similarity(&mut gen, 8, m % 3 == 0);
        let window = (m % 3) as usize;
        let sim = SimilarityMatrix { s: s.clone() };

        let mut oracle_rng = ChaCha8Rng::seed_from_u64(m);
        let mut expected = Vec::new();
        for anchor in 0..8 {
            let (thr, pos, neg, pairs) = oracle_pairs(&s, anchor, window);
            let c = anchor_candidates(&sim, anchor, window);
            if c.threshold.to_bits() != thr.to_bits() || c.positives != pos || c.negatives != neg {
                mismatches.push(format!("matrix {m} anchor {anchor}: candidates"));
            }
            if !pairs.is_empty() {
                let (p, q) = pairs[oracle_rng.random_range(0..pairs.len())];
                expected.push(Triplet { anchor, positive: p, negative: q });
            }
        }
        let got = mine_triplets(&sim, window, &mut ChaCha8Rng::seed_from_u64(m));
        if got.triples != expected {
            mismatches.push(format!("matrix {m}: {:?} vs {:?}", got.triples, expected));
        }
        if !got.satisfies_invariants(&sim) {
            mismatches.push(format!("matrix {m}: invariant"));
        }
        triples += expected.len();
    }
    verdict(
        4,
        mismatches.is_empty(),
        format!("{MINING_MATRICES} matrices, {triples} oracle triples, {} mismatches", mismatches.len()),
        started,
    );
    assert!(mismatches.is_empty(), "{mismatches:?}");
}

// ------------------------------------------------------------ 5 and 6. desk-scale pretraining

/// Period 8 on even indices, 16 on odd; phases spread over the cycle.
fn desk_corpus(n: usize, noise: f64, seed0: u64) -> Vec<VideoClip> {
    (0..n)
        .map(|i| {
            let period = if i % 2 == 0 { 8 } else { 16 };
            let phase = (i as f64 * 0.731).rem_euclid(std::f64::consts::TAU);
            let spec = SyntheticSpec::new(32, 64, 64, period).with_noise(noise).with_phase(phase);
            generate_periodic_clip(&spec, seed0 + i as u64).unwrap()
        })
        .collect()
}

fn desk_train_config(contrastive: bool) -> TrainConfig {
    TrainConfig {
        epochs: DESK_EPOCHS,
        learning_rate: DESK_LR,
        warmup_steps: DESK_WARMUP,
        mask_ratio: DESK_MASK_RATIO,
        enable_contrastive: contrastive,
        ..TrainConfig::default()
    }
}

fn desk_corpus_train() -> &'static Vec<VideoClip> {
    static CLIPS: OnceLock<Vec<VideoClip>> = OnceLock::new();
    CLIPS.get_or_init(|| desk_corpus(DESK_CLIPS, 0.05, 1000))
}

fn pretrained(contrastive: bool) -> &'static Model {
    static WITH: OnceLock<Model> = OnceLock::new();
    static WITHOUT: OnceLock<Model> = OnceLock::new();
    let cell = if contrastive { &WITH } else { &WITHOUT };
    cell.get_or_init(|| {
        let cfg = ModelConfig::default();
        let outcome = run_pretraining(&desk_train_config(contrastive), &cfg, desk_corpus_train(), None).unwrap();
        let last = outcome.log.last().unwrap();
        println!(
            "  pretrain (L_c {}): {} steps, final L_r {:.5} L_c {:.4}",
            if contrastive { "on" } else { "off" },
            last.step,
            last.l_r,
            last.l_c
        );
        Model::new(cfg, outcome.state.params).unwrap()
    })
}

/// Pooled in-phase / anti-phase distance ratio over held-out clips, read back
/// from the exported matrices.
fn periodicity_ratio(model: &Model, clips: &[VideoClip], dir: &std::path::Path, tag: &str) -> (f64, f64, f64) {
    let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
    for (k, clip) in clips.iter().enumerate() {
        let path = dir.join(format!("{tag}_{k}.csv"));
        write_similarity(&clip_similarity(model, clip, None).unwrap(), &path).unwrap();
        let sim = read_similarity(&path).unwrap();
        assert!(sim.is_symmetric_zero_diagonal());
        let groups_per_period = clip.period_hint().unwrap() / model.cfg.patch.patch_t;
        let (sa, ca, sb, cb) = phase_lag_sums(&sim, groups_per_period).unwrap();
        a += sa;
        na += ca;
        b += sb;
        nb += cb;
    }
    let (inp, anti) = (a / na as f64, b / nb as f64);
    (inp / anti, inp, anti)
}

#[test]
fn criterion_5_periodicity_emerges_with_contrastive_loss() {
    let started = Instant::now();
    let held_out = desk_corpus(HELD_OUT_CLIPS, 0.0, 900_000);
    let dir = tempfile::tempdir().unwrap();
    let (r_with, in_with, anti_with) = periodicity_ratio(pretrained(true), &held_out, dir.path(), "with");
    let (r_without, in_without, anti_without) = periodicity_ratio(pretrained(false), &held_out, dir.path(), "without");
    let pass = r_with <= PERIODICITY_RATIO_MAX && r_without > r_with;
    verdict(
        5,
        pass,
        format!(
            "ratio with L_c {r_with:.4} (in {in_with:.4} / anti {anti_with:.4}); without {r_without:.4} (in {in_without:.4} / anti {anti_without:.4}); mask ratio {DESK_MASK_RATIO}"
        ),
        started,
    );
    assert!(pass);
}

fn period_labels(clips: &[VideoClip]) -> Vec<LabeledClip> {
    clips
        .iter()
        .map(|c| LabeledClip::with_class(c.clone(), usize::from(c.period_hint() == Some(16))))
        .collect()
}

#[test]
fn criterion_6_pretrained_encoder_beats_random_probe() {
    let started = Instant::now();
    let cfg = ModelConfig::default();
    let train = period_labels(desk_corpus_train());
    let test = period_labels(&desk_corpus(PROBE_TEST_CLIPS, 0.05, 500_000));
    let probe = FinetuneConfig {
        task: TaskKind::Classification,
        n_classes: 2,
        label_fraction: PROBE_LABEL_FRACTION,
        freeze_encoder: true,
        ..FinetuneConfig::default()
    };
    // Baseline first: same initialization the pretraining run starts from.
    let random = Model::new(cfg.clone(), TrainState::fresh(&cfg, 0).unwrap().params).unwrap();
    let acc_random = 100.0 * finetune(&random, &train, &test, &probe).unwrap().report.values["accuracy"];
    println!("  random-init frozen probe accuracy {acc_random:.1}%");
    let out = finetune(pretrained(true), &train, &test, &probe).unwrap();
    let acc_pre = 100.0 * out.report.values["accuracy"];
    let gap = acc_pre - acc_random;
    let pass = gap >= PROBE_GAP_MIN;
    verdict(
        6,
        pass,
        format!(
            "accuracy pretrained {acc_pre:.1}% vs random {acc_random:.1}% (gap {gap:+.1} pts, {} labelled clips)",
            out.train_indices.len()
        ),
        started,
    );
    assert!(pass);
}

// ------------------------------------------------------------ 7. metrics

#[test]
fn criterion_7_metric_closed_forms() {
    let started = Instant::now();
    let mut errs: Vec<(String, f64)> = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| errs.push((what.to_string(), (got - want).abs()));

    let mut a = Array3::<u8>::zeros((1, 16, 16));
    a.slice_mut(ndarray::s![0, 4..12, 2..10]).fill(1);
    let (d, i) = overlap_metrics(&a, &a, 1).unwrap();
    check("identical dice", d, 1.0);
    check("identical iou", i, 1.0);

    let mut far = Array3::<u8>::zeros((1, 16, 16));
    far.slice_mut(ndarray::s![0, 0..2, 12..16]).fill(1);
    let (d, i) = overlap_metrics(&a, &far, 1).unwrap();
    check("disjoint dice", d, 0.0);
    check("disjoint iou", i, 0.0);

    // Equal areas sharing half of each: dice 1/2, iou 1/3.
    let mut half = Array3::<u8>::zeros((1, 16, 16));
    half.slice_mut(ndarray::s![0, 4..12, 6..14]).fill(1);
    let (d, i) = overlap_metrics(&a, &half, 1).unwrap();
    check("half dice", d, 0.5);
    check("half iou", i, 1.0 / 3.0);

    // Parallel one-pixel boundaries three rows apart.
    let mut top = Array3::<u8>::zeros((2, 20, 20));
    let mut low = Array3::<u8>::zeros((2, 20, 20));
    top.slice_mut(ndarray::s![.., 8, ..]).fill(1);
    low.slice_mut(ndarray::s![.., 11, ..]).fill(1);
    let s = surface_metrics(&top, &low, 1, (1.0, 1.0)).unwrap().unwrap();
    check("translate hd95", s.hd95, 3.0);
    check("translate assd", s.assd, 3.0);

    let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    check("4-point auroc", auc, 0.75);

    let worst = errs.iter().cloned().fold((String::new(), 0.0), |w, e| if e.1 > w.1 { e } else { w });
    let pass = errs.iter().all(|(_, e)| *e <= METRIC_TOL);
    verdict(7, pass, format!("{} closed forms, max abs err {:.1e}", errs.len(), worst.1), started);
    assert!(pass, "{errs:?}");
}

// ------------------------------------------------------------ 8. reproducibility

fn small_setup() -> (ModelConfig, TrainConfig, Vec<VideoClip>) {
    let cfg = ModelConfig {
        frames: 16,
        ..ModelConfig::tiny()
    };
    let train = TrainConfig {
        epochs: 3,
        batch_size: 3,
        learning_rate: 1e-3,
        warmup_steps: 2,
        checkpoint_every: 4,
        ..TrainConfig::default()
    };
    let clips = (0..7)
        .map(|i| {
            let spec = SyntheticSpec::new(16, 32, 32, if i % 2 == 0 { 4 } else { 8 }).with_noise(0.05);
            generate_periodic_clip(&spec, 40 + i).unwrap()
        })
        .collect();
    (cfg, train, clips)
}

#[test]
fn criterion_8_reproducibility_and_resume() {
    let started = Instant::now();
    let (cfg, train, clips) = small_setup();
    let dir = tempfile::tempdir().unwrap();
    let out_a = RunOutput { dir: dir.path().join("a") };
    let out_b = RunOutput { dir: dir.path().join("b") };

    let a = run_pretraining(&train, &cfg, &clips, Some(&out_a)).unwrap();
    let b = run_pretraining(&train, &cfg, &clips, Some(&out_b)).unwrap();
    let total = a.log.len() as u64;
    let reproducible = same_bits(&a.state.params, &b.state.params)
        && a.log == b.log
        && std::fs::read(out_a.final_path()).unwrap() == std::fs::read(out_b.final_path()).unwrap()
        && std::fs::read(out_a.log_path()).unwrap() == std::fs::read(out_b.log_path()).unwrap();
    let contrastive_active = a.log.iter().any(|r| r.triplet_count > 0);

    // Save, load, save again.
    let ckpt = a.state.to_checkpoint(&cfg, &train);
    let p1 = dir.path().join("rt1.ckpt");
    let p2 = dir.path().join("rt2.ckpt");
    save_checkpoint(&ckpt, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(&loaded, &p2).unwrap();
    let optimizer_bits = {
        let (o1, o2) = (ckpt.optimizer.as_ref().unwrap(), loaded.optimizer.as_ref().unwrap());
        same_bits(&o1.m, &o2.m) && same_bits(&o1.v, &o2.v) && o1.step == o2.step
    };
    let round_trip = same_bits(&ckpt.params, &loaded.params)
        && optimizer_bits
        && loaded.step == ckpt.step
        && loaded.train_cfg == ckpt.train_cfg
        && std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    // Interrupt at the first periodic checkpoint and resume.
    let cut = train.checkpoint_every as u64;
    let out_c = RunOutput { dir: dir.path().join("c") };
    let resumed = resume_pretraining(&out_a.checkpoint_path(cut), &train, &cfg, &clips, Some(&out_c)).unwrap();
    let resume_equivalent = same_bits(&resumed.state.params, &a.state.params)
        && resumed.state.optimizer == a.state.optimizer
        && resumed.log[..] == a.log[cut as usize..]
        && std::fs::read(out_c.final_path()).unwrap() == std::fs::read(out_a.final_path()).unwrap();

    let pass = reproducible && round_trip && resume_equivalent && contrastive_active;
    verdict(
        8,
        pass,
        format!(
            "{total} steps: reruns identical {reproducible}, checkpoint round trip {round_trip}, resume at step {cut} identical {resume_equivalent}"
        ),
        started,
    );
    assert!(pass);
}

// ------------------------------------------------------------ 9. ablation

#[test]
fn criterion_9_ablation_reports_all_cells() {
    let started = Instant::now();
    let base = ModelConfig {
        patch: PatchConfig::new(16, 16, 4, 8),
        frames: 16,
        ..ModelConfig::tiny()
    };
    let train = TrainConfig {
        epochs: 1,
        batch_size: 3,
        learning_rate: 1e-3,
        warmup_steps: 1,
        ..TrainConfig::default()
    };
    let seg = FinetuneConfig {
        task: TaskKind::Segmentation,
        n_classes: 1,
        epochs: 60,
        ..FinetuneConfig::default()
    };
    let sample = |i: u64| {
        let spec = SyntheticSpec::new(16, 32, 32, if i % 2 == 0 { 4 } else { 8 }).with_noise(0.05);
        let clip = generate_periodic_clip(&spec, 70 + i).unwrap();
        LabeledClip::with_mask(clip, ellipse_masks(&spec, 70 + i).unwrap()).unwrap()
    };
    let seg_train: Vec<LabeledClip> = (0..6).map(sample).collect();
    let seg_test: Vec<LabeledClip> = (6..9).map(sample).collect();
    let clips: Vec<VideoClip> = seg_train.iter().map(|s| s.clip.clone()).collect();

    let sweep = AblationConfig::default();
    let table = run_ablation(&sweep, &base, &train, &seg, &clips, &seg_train, &seg_test).unwrap();
    let text = table.to_table();
    println!("{text}");
    let lines: Vec<&str> = text.lines().collect();
    let layout_ok = lines[0] == "Patch Size | mDice"
        && ["8x8x2 | ", "8x8x4 | ", "16x16x2 | ", "16x16x4 | "]
            .iter()
            .all(|p| lines.iter().any(|l| l.starts_with(p)))
        && lines.contains(&"Ratio | mDice")
        && ["25% | ", "50% | ", "75% | ", "90% | "]
            .iter()
            .all(|p| lines.iter().any(|l| l.starts_with(p)));
    let all_finite = table
        .patch_rows
        .iter()
        .chain(&table.ratio_rows)
        .all(|c| c.mdice.is_finite() && (0.0..=1.0).contains(&c.mdice) && c.final_l_r.is_finite());
    let pass = table.cell_count() == 8 && layout_ok && all_finite;
    verdict(9, pass, format!("{} cells reported", table.cell_count()), started);
    assert!(pass);
}
