//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `CYMAECK1`, a little-endian `u64` header length,
//! a JSON header (configs, step, array table), then every array's values as
//! little-endian `f64` in header order. Optimizer moments, when present,
//! follow as two more blocks in the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::backbone::{init_params, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pretrain::{AdamState, TrainConfig};

const MAGIC: &[u8; 8] = b"CYMAECK1";

/// Prefix reserved for task-head arrays stored beside the backbone.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: Option<TrainConfig>,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    /// Free-form metadata (fine-tuning heads record their task here).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model_cfg: ModelConfig, params: ParamStore, step: u64) -> Self {
        Self {
            model_cfg,
            train_cfg: None,
            step,
            params,
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    /// Backbone parameters without any task head.
    pub fn backbone(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, value) in self.params.iter() {
            if !name.starts_with(HEAD_PREFIX) {
                out.insert(name.clone(), value.clone());
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    arrays: Vec<ArrayEntry>,
    optimizer_step: Option<u64>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn write_array<W: Write>(w: &mut W, m: &Mat) -> std::io::Result<()> {
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R, rows: usize, cols: usize) -> std::io::Result<Mat> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let values = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Mat::from_shape_vec((rows, cols), values).expect("length matches"))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let header = Header {
        model: ckpt.model_cfg.clone(),
        train: ckpt.train_cfg.clone(),
        step: ckpt.step,
        arrays: ckpt
            .params
            .iter()
            .map(|(name, m)| ArrayEntry {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        meta: ckpt.meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for (_, m) in ckpt.params.iter() {
        write_array(&mut w, m).map_err(io)?;
    }
    if let Some(opt) = &ckpt.optimizer {
        for store in [&opt.m, &opt.v] {
            for (name, _) in ckpt.params.iter() {
                let m = store.get(name).ok_or_else(|| Error::Checkpoint {
                    name: name.clone(),
                    reason: "optimizer state missing".into(),
                })?;
                write_array(&mut w, m).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Loads a checkpoint and checks every backbone array against the shapes its
/// own model config implies.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| Error::format(path, format!("header: {e}")))?;

    let mut params = ParamStore::new();
    for entry in &header.arrays {
        params.insert(entry.name.clone(), read_array(&mut r, entry.rows, entry.cols).map_err(io)?);
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut m = ParamStore::new();
            let mut v = ParamStore::new();
            for store in [&mut m, &mut v] {
                for entry in &header.arrays {
                    store.insert(entry.name.clone(), read_array(&mut r, entry.rows, entry.cols).map_err(io)?);
                }
            }
            Some(AdamState { m, v, step })
        }
        None => None,
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
    }

    let ckpt = Checkpoint {
        model_cfg: header.model,
        train_cfg: header.train,
        step: header.step,
        params,
        optimizer,
        meta: header.meta,
    };
    let template = init_params(&ckpt.model_cfg, 0)?;
    template.check_compatible(&ckpt.backbone())?;
    Ok(ckpt)
}

/// Loads a checkpoint and additionally requires a specific model config.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let template = init_params(expected, 0)?;
    template.check_compatible(&ckpt.backbone())?;
    if &ckpt.model_cfg != expected {
        return Err(Error::Checkpoint {
            name: "model_config".into(),
            reason: format!("stored {:?} differs from expected {:?}", ckpt.model_cfg, expected),
        });
    }
    Ok(ckpt)
}
