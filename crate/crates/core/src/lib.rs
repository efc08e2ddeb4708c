//! Masked video autoencoding with periodic contrastive learning.
//!
//! The pipeline patchifies a periodic clip, masks most tokens with a
//! uniform-frame mask, reconstructs the masked patches and, in parallel,
//! pulls together per-group embeddings that share a motion phase using
//! triplets mined from a temporal self-similarity matrix.

pub mod ablation;
pub mod adapt_eval;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inspect;
pub mod masking;
pub mod nn;
pub mod objective;
pub mod pretrain;
pub mod store;
pub mod tokenizer;
pub mod videodata;

pub use backbone::{FrameEmbeddingSequence, LatentTokens, Model, ModelConfig};
pub use error::{Error, Result};
pub use masking::{MaskMode, MaskPlan};
pub use tokenizer::{GridLayout, PatchConfig, PatchGrid, TokenGrid};
pub use videodata::{SyntheticSpec, VideoClip};
