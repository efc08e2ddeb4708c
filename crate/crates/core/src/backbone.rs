//! Encoder over visible tokens, reconstruction decoder with learnable
//! placeholder tokens, and the shared per-group projection head.
//!
//! The graph-level functions (`*_graph`) build onto an autograd tape and are
//! used by training. [`Model`] wraps them for inference on plain arrays.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{self, BlockShape, Binder, ParamStore, Trainable};
use crate::tokenizer::{GridLayout, PatchConfig, PatchGrid};

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    /// Clip geometry the positional tables are sized for.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_width: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub proj_depth: usize,
    pub proj_heads: usize,
    pub proj_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Stops contrastive gradients at the encoder output.
    #[serde(default)]
    pub detach_projector: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            frames: 32,
            height: 64,
            width: 64,
            enc_depth: 2,
            enc_heads: 4,
            dec_width: 32,
            dec_depth: 1,
            dec_heads: 4,
            proj_depth: 1,
            proj_heads: 4,
            proj_dim: 64,
            mlp_ratio: 4,
            detach_projector: false,
        }
    }
}

impl ModelConfig {
    /// The minimal geometry used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            patch: PatchConfig::new(8, 8, 4, 8),
            frames: 8,
            height: 32,
            width: 32,
            enc_depth: 1,
            enc_heads: 2,
            dec_width: 8,
            dec_depth: 1,
            dec_heads: 2,
            proj_depth: 1,
            proj_heads: 2,
            proj_dim: 8,
            mlp_ratio: 2,
            detach_projector: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.patch.embed_dim
    }

    pub fn layout(&self) -> Result<GridLayout> {
        self.patch.layout(self.frames, self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        let d = self.embed_dim();
        let checks = [
            ("enc_heads", self.enc_heads, d),
            ("dec_heads", self.dec_heads, self.dec_width),
            ("proj_heads", self.proj_heads, d),
        ];
        for (key, heads, width) in checks {
            if heads == 0 || width % heads != 0 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("{heads} heads do not divide width {width}"),
                });
            }
        }
        for (key, v) in [
            ("dec_width", self.dec_width),
            ("proj_dim", self.proj_dim),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        Ok(())
    }

    fn enc_block(&self) -> BlockShape {
        let d = self.embed_dim();
        BlockShape {
            width: d,
            heads: self.enc_heads,
            hidden: d * self.mlp_ratio,
        }
    }

    fn dec_block(&self) -> BlockShape {
        BlockShape {
            width: self.dec_width,
            heads: self.dec_heads,
            hidden: self.dec_width * self.mlp_ratio,
        }
    }

    fn proj_block(&self) -> BlockShape {
        let d = self.embed_dim();
        BlockShape {
            width: d,
            heads: self.proj_heads,
            hidden: d * self.mlp_ratio,
        }
    }
}

/// Deterministic random initialization of every model parameter.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let n = layout.total();
    let d = cfg.embed_dim();
    let pd = cfg.patch.patch_dim();
    let dw = cfg.dec_width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    nn::init_linear(&mut store, &mut rng, "embed.proj", pd, d, false);
    store.insert("embed.pos", nn::normal(&mut rng, n, d, 0.02));
    store.insert("enc.cls", nn::normal(&mut rng, 1, d, 0.02));
    for k in 0..cfg.enc_depth {
        nn::init_block(&mut store, &mut rng, &format!("enc.block{k}"), cfg.enc_block());
    }
    nn::init_norm(&mut store, "enc.norm", d);

    nn::init_linear(&mut store, &mut rng, "dec.embed", d, dw, true);
    store.insert("dec.miss", nn::normal(&mut rng, 1, dw, 0.02));
    store.insert("dec.pos", nn::normal(&mut rng, n, dw, 0.02));
    for k in 0..cfg.dec_depth {
        nn::init_block(&mut store, &mut rng, &format!("dec.block{k}"), cfg.dec_block());
    }
    nn::init_norm(&mut store, "dec.norm", dw);
    nn::init_linear(&mut store, &mut rng, "dec.head", dw, pd, true);

    store.insert("proj.cls", nn::normal(&mut rng, 1, d, 0.02));
    for k in 0..cfg.proj_depth {
        nn::init_block(&mut store, &mut rng, &format!("proj.block{k}"), cfg.proj_block());
    }
    nn::init_norm(&mut store, "proj.norm", d);
    nn::init_linear(&mut store, &mut rng, "proj.out", d, cfg.proj_dim, true);
    Ok(store)
}

/// Encoder output on the tape.
pub struct EncodedGraph {
    /// Visible-token latents, rows in [`MaskPlan::visible_rows`] order.
    pub latents: Var,
    /// Final state of the encoder [CLS] token.
    pub global: Var,
    /// Flat token index of each latent row.
    pub rows: Vec<usize>,
    /// Latent row range of each temporal group.
    pub groups: Vec<Range<usize>>,
}

fn group_ranges(plan: &MaskPlan) -> Result<Vec<Range<usize>>> {
    let mut out = Vec::with_capacity(plan.n_t());
    let mut start = 0;
    for t in 0..plan.n_t() {
        let count = plan.visible_in_group(t).len();
        if count == 0 {
            return Err(Error::invalid(format!("temporal group {t} has no visible tokens")));
        }
        out.push(start..start + count);
        start += count;
    }
    Ok(out)
}

fn check_plan(cfg: &ModelConfig, patches: &PatchGrid, plan: &MaskPlan) -> Result<GridLayout> {
    let layout = cfg.layout()?;
    if patches.layout != layout || patches.patches.ncols() != cfg.patch.patch_dim() {
        return Err(Error::shape(format!(
            "patch grid {:?} does not match model layout {layout:?}",
            patches.layout
        )));
    }
    if plan.n_t() != layout.n_t || plan.n_s() != layout.n_s() {
        return Err(Error::shape(format!(
            "mask {}x{} does not match layout {}x{}",
            plan.n_t(),
            plan.n_s(),
            layout.n_t,
            layout.n_s()
        )));
    }
    Ok(layout)
}

/// Embeds the visible patches and runs the encoder over them.
pub fn encode_graph(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, patches: &PatchGrid, plan: &MaskPlan) -> Result<EncodedGraph> {
    check_plan(cfg, patches, plan)?;
    let groups = group_ranges(plan)?;
    let rows = plan.visible_rows();
    let x = g.constant(patches.patches.select(ndarray::Axis(0), &rows));
    let proj = b.param(g, "embed.proj.w");
    let x = g.matmul(x, proj);
    let pos_table = b.param(g, "embed.pos");
    let pos = g.gather_rows(pos_table, &rows);
    let tokens = g.add(x, pos);
    let (latents, global) = encode_tokens_graph(cfg, g, b, tokens);
    Ok(EncodedGraph {
        latents,
        global,
        rows,
        groups,
    })
}

/// Runs the encoder blocks over already-embedded tokens (positions added).
pub fn encode_tokens_graph(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, tokens: Var) -> (Var, Var) {
    let n = g.value(tokens).nrows();
    let cls = b.param(g, "enc.cls");
    let mut x = g.concat_rows(&[cls, tokens]);
    for k in 0..cfg.enc_depth {
        x = nn::block(g, b, &format!("enc.block{k}"), x, cfg.enc_heads);
    }
    let x = nn::layer_norm(g, b, "enc.norm", x);
    let global = g.gather_rows(x, &[0]);
    let latents = g.gather_rows(x, &(1..=n).collect::<Vec<_>>());
    (latents, global)
}

/// Predicts every patch from the visible latents; returns an `N×(c·t·h·w)` node.
pub fn reconstruct_graph(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, enc: &EncodedGraph, plan: &MaskPlan) -> Var {
    let n = plan.n_t() * plan.n_s();
    let y = nn::linear(g, b, "dec.embed", enc.latents);
    let full = g.scatter_rows(y, &enc.rows, n);
    let mut indicator = Mat::zeros((n, 1));
    for r in plan.masked_rows() {
        indicator[[r, 0]] = 1.0;
    }
    let indicator = g.constant(indicator);
    let miss = b.param(g, "dec.miss");
    let miss = g.matmul(indicator, miss);
    let full = g.add(full, miss);
    let pos = b.param(g, "dec.pos");
    let mut x = g.add(full, pos);
    for k in 0..cfg.dec_depth {
        x = nn::block(g, b, &format!("dec.block{k}"), x, cfg.dec_heads);
    }
    let x = nn::layer_norm(g, b, "dec.norm", x);
    nn::linear(g, b, "dec.head", x)
}

/// Runs the shared projection head on one group's latent rows; returns `1×proj_dim`.
pub fn project_group_graph(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, latents: Var, rows: &[usize]) -> Var {
    let group = g.gather_rows(latents, rows);
    let cls = b.param(g, "proj.cls");
    let mut x = g.concat_rows(&[cls, group]);
    for k in 0..cfg.proj_depth {
        x = nn::block(g, b, &format!("proj.block{k}"), x, cfg.proj_heads);
    }
    let x = nn::layer_norm(g, b, "proj.norm", x);
    let x = g.gather_rows(x, &[0]);
    nn::linear(g, b, "proj.out", x)
}

/// Projects the requested groups (all when `which` is `None`); one row each.
pub fn project_frames_graph(cfg: &ModelConfig, g: &mut Graph, b: &mut Binder, enc: &EncodedGraph, which: Option<&[usize]>) -> Var {
    let latents = if cfg.detach_projector {
        g.detach(enc.latents)
    } else {
        enc.latents
    };
    let all: Vec<usize> = (0..enc.groups.len()).collect();
    let which = which.unwrap_or(&all);
    let rows: Vec<Var> = which
        .iter()
        .map(|&t| {
            let range: Vec<usize> = enc.groups[t].clone().collect();
            project_group_graph(cfg, g, b, latents, &range)
        })
        .collect();
    if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)
    }
}

/// Visible-token latents grouped by temporal group.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens {
    pub groups: Vec<Mat>,
    pub coords: Vec<Vec<(usize, usize)>>,
    /// Encoder [CLS] state.
    pub global: Mat,
}

impl LatentTokens {
    pub fn flatten(&self) -> (Mat, Vec<Range<usize>>) {
        let views: Vec<_> = self.groups.iter().map(|m| m.view()).collect();
        let flat = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
        let mut ranges = Vec::new();
        let mut start = 0;
        for m in &self.groups {
            ranges.push(start..start + m.nrows());
            start += m.nrows();
        }
        (flat, ranges)
    }

    /// Mean over every visible latent.
    pub fn mean_latent(&self) -> Mat {
        let (flat, _) = self.flatten();
        flat.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0))
    }
}

/// Per-group projection-head embeddings, `N_T×proj_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddingSequence {
    pub z: Mat,
}

/// Model configuration plus parameters, for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        init_params(&cfg, 0)?.check_compatible(&params)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn encode(&self, patches: &PatchGrid, plan: &MaskPlan) -> Result<LatentTokens> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, Trainable::None);
        let enc = encode_graph(&self.cfg, &mut g, &mut b, patches, plan)?;
        let latents = g.value(enc.latents);
        let n_s = plan.n_s();
        let groups = enc
            .groups
            .iter()
            .map(|r| latents.slice(ndarray::s![r.clone(), ..]).to_owned())
            .collect();
        let coords = enc
            .groups
            .iter()
            .map(|r| enc.rows[r.clone()].iter().map(|&k| (k / n_s, k % n_s)).collect())
            .collect();
        Ok(LatentTokens {
            groups,
            coords,
            global: g.value(enc.global).clone(),
        })
    }

    /// Encoder over embedded tokens given directly (positions already added).
    pub fn encode_token_rows(&self, tokens: &Mat) -> Result<(Mat, Mat)> {
        if tokens.nrows() == 0 {
            return Err(Error::invalid("empty visible token set"));
        }
        if tokens.ncols() != self.cfg.embed_dim() {
            return Err(Error::shape(format!(
                "tokens have width {}, encoder expects {}",
                tokens.ncols(),
                self.cfg.embed_dim()
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, Trainable::None);
        let t = g.constant(tokens.clone());
        let (lat, global) = encode_tokens_graph(&self.cfg, &mut g, &mut b, t);
        Ok((g.value(lat).clone(), g.value(global).clone()))
    }

    fn encoded_from_latents(&self, g: &mut Graph, latents: &LatentTokens, plan: &MaskPlan) -> Result<EncodedGraph> {
        if latents.groups.len() != plan.n_t() {
            return Err(Error::shape(format!(
                "{} latent groups for a {}-group mask",
                latents.groups.len(),
                plan.n_t()
            )));
        }
        for (t, coords) in latents.coords.iter().enumerate() {
            let expected: Vec<(usize, usize)> = plan.visible_in_group(t).into_iter().map(|i| (t, i)).collect();
            if *coords != expected {
                return Err(Error::shape(format!("latent coordinates of group {t} disagree with the mask")));
            }
        }
        let (flat, groups) = latents.flatten();
        let latents = g.constant(flat);
        let global = g.constant(Mat::zeros((1, self.cfg.embed_dim())));
        Ok(EncodedGraph {
            latents,
            global,
            rows: plan.visible_rows(),
            groups,
        })
    }

    pub fn reconstruct(&self, latents: &LatentTokens, plan: &MaskPlan) -> Result<PatchGrid> {
        let layout = self.cfg.layout()?;
        let mut g = Graph::new();
        let enc = self.encoded_from_latents(&mut g, latents, plan)?;
        let mut b = Binder::new(&self.params, Trainable::None);
        let pred = reconstruct_graph(&self.cfg, &mut g, &mut b, &enc, plan);
        Ok(PatchGrid {
            layout,
            patches: g.value(pred).clone(),
        })
    }

    pub fn project_frames(&self, latents: &LatentTokens) -> Result<FrameEmbeddingSequence> {
        if let Some(t) = latents.groups.iter().position(|m| m.nrows() == 0) {
            return Err(Error::invalid(format!("temporal group {t} has no latents")));
        }
        let mut g = Graph::new();
        let (flat, groups) = latents.flatten();
        let enc = EncodedGraph {
            latents: g.constant(flat),
            global: g.constant(Mat::zeros((1, self.cfg.embed_dim()))),
            rows: Vec::new(),
            groups,
        };
        let mut b = Binder::new(&self.params, Trainable::None);
        let z = project_frames_graph(&self.cfg, &mut g, &mut b, &enc, None);
        Ok(FrameEmbeddingSequence { z: g.value(z).clone() })
    }
}

/// Closed-form parameter count for a configuration.
pub fn expected_param_count(cfg: &ModelConfig) -> Result<usize> {
    let layout = cfg.layout()?;
    let n = layout.total();
    let d = cfg.embed_dim();
    let pd = cfg.patch.patch_dim();
    let dw = cfg.dec_width;
    let encoder = pd * d + n * d + d + cfg.enc_depth * cfg.enc_block().param_count() + 2 * d;
    let decoder = (d * dw + dw) + dw + n * dw + cfg.dec_depth * cfg.dec_block().param_count() + 2 * dw + (dw * pd + pd);
    let projector = d + cfg.proj_depth * cfg.proj_block().param_count() + 2 * d + (d * cfg.proj_dim + cfg.proj_dim);
    Ok(encoder + decoder + projector)
}
