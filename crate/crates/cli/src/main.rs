use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cyclemae_core::ablation::run_ablation;
use cyclemae_core::adapt_eval::{evaluate, finetune, TaskKind};
use cyclemae_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, HEAD_PREFIX};
use cyclemae_core::config::RunConfig;
use cyclemae_core::inspect::{clip_similarity, write_similarity};
use cyclemae_core::pretrain::{resume_pretraining, run_pretraining, RunOutput};
use cyclemae_core::store::{self, Split, MANIFEST_NAME};
use cyclemae_core::Model;

#[derive(Parser)]
#[command(name = "cyclemae", version, about = "Masked video pretraining with a periodic contrastive loss")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData {
        /// Output directory (default: data.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-supervised pretraining on the training split.
    Pretrain {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Disable the contrastive loss (ablation).
        #[arg(long)]
        no_contrastive: bool,
    },
    /// Train a task head and report test metrics.
    Finetune {
        /// Pretrained checkpoint (default: <output.dir>/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start from a fresh random encoder instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
    },
    /// Recompute metrics of a fine-tuned checkpoint.
    Evaluate {
        /// Fine-tuned checkpoint (default: <output.dir>/finetune.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export the temporal self-similarity matrix of one clip.
    InspectSim {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encode under a uniform-frame mask of this ratio instead of unmasked.
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
    },
    /// Sweep mask ratios and patch sizes; writes a table of segmentation mDice.
    Ablation,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("invalid config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn manifest(cfg: &RunConfig) -> PathBuf {
    cfg.data.dir.join(MANIFEST_NAME)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = RunOutput {
        dir: cfg.output.dir.clone(),
    };
    match cli.command {
        Command::GenData { out: dir } => {
            let dir = dir.unwrap_or_else(|| cfg.data.dir.clone());
            let m = store::write_corpus(&cfg.data, &dir)?;
            println!("wrote {} clips; manifest {}", cfg.data.n_clips, m.display());
        }
        Command::Pretrain { resume, no_contrastive } => {
            let mut train = cfg.pretrain.clone();
            if no_contrastive {
                train.enable_contrastive = false;
            }
            let model_cfg = cfg.model_config();
            let clips = store::load_split_clips(&manifest(&cfg), Split::Train)?;
            let outcome = match resume {
                Some(ckpt) => resume_pretraining(&ckpt, &train, &model_cfg, &clips, Some(&out))?,
                None => run_pretraining(&train, &model_cfg, &clips, Some(&out))?,
            };
            if let Some(last) = outcome.log.last() {
                println!(
                    "step {} L_r {:.6} L_c {:.6} L_total {:.6}",
                    last.step, last.l_r, last.l_c, last.l_total
                );
            }
            println!("checkpoint {}", out.final_path().display());
        }
        Command::Finetune { checkpoint, random_init } => {
            let model_cfg = cfg.model_config();
            let model = if random_init {
                Model::init(model_cfg, cfg.pretrain.seed)?
            } else {
                let path = checkpoint.unwrap_or_else(|| out.final_path());
                let ckpt = load_checkpoint_for(&path, &model_cfg)?;
                Model::new(model_cfg, ckpt.backbone())?
            };
            let ft = &cfg.finetune;
            let train = store::load_split_samples(&manifest(&cfg), Split::Train, ft.task)?;
            let test = store::load_split_samples(&manifest(&cfg), Split::Test, ft.task)?;
            let result = finetune(&model, &train, &test, ft)?;
            let mut params = result.encoder.clone();
            params.extend(result.head.clone());
            let mut ckpt = Checkpoint::new(model.cfg.clone(), params, 0);
            ckpt.meta = serde_json::json!({
                "task": ft.task,
                "label_fraction": ft.label_fraction,
                "train_indices": result.train_indices,
            });
            save_checkpoint(&ckpt, &out.dir.join("finetune.ckpt"))?;
            write_text(&out.dir.join("report.json"), &result.report.to_json())?;
            write_text(&out.dir.join("report.txt"), &result.report.to_table())?;
            print!("{}", result.report.to_table());
        }
        Command::Evaluate { checkpoint, split } => {
            let split: Split = split.parse()?;
            let path = checkpoint.unwrap_or_else(|| out.dir.join("finetune.ckpt"));
            let ckpt = load_checkpoint(&path)?;
            let task: TaskKind = serde_json::from_value(ckpt.meta["task"].clone())
                .with_context(|| format!("{} carries no task head", path.display()))?;
            let label_fraction = ckpt.meta["label_fraction"].as_f64().unwrap_or(1.0);
            let model = Model::new(ckpt.model_cfg.clone(), ckpt.backbone())?;
            let head = ckpt.params.subset(HEAD_PREFIX);
            let data = store::load_split_samples(&manifest(&cfg), split, task)?;
            let report = evaluate(&model, &head, task, &data, split.as_str(), label_fraction)?;
            write_text(&out.dir.join(format!("eval_{}.json", split.as_str())), &report.to_json())?;
            println!("{}", report.to_json());
        }
        Command::InspectSim {
            checkpoint,
            clip,
            out: target,
            mask_ratio,
            mask_seed,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let model = Model::new(ckpt.model_cfg.clone(), ckpt.backbone())?;
            let clip = store::load_clip(&clip)?;
            let sim = clip_similarity(&model, &clip, mask_ratio.map(|r| (r, mask_seed)))?;
            write_similarity(&sim, &target)?;
            println!("wrote {}x{} matrix to {}", sim.s.nrows(), sim.s.ncols(), target.display());
        }
        Command::Ablation => {
            if cfg.finetune.task != TaskKind::Segmentation {
                bail!("ablation needs finetune.task = \"segmentation\"");
            }
            let m = manifest(&cfg);
            let clips = store::load_split_clips(&m, Split::Train)?;
            let seg_train = store::load_split_samples(&m, Split::Train, TaskKind::Segmentation)?;
            let seg_test = store::load_split_samples(&m, Split::Test, TaskKind::Segmentation)?;
            let table = run_ablation(
                &cfg.ablation,
                &cfg.model_config(),
                &cfg.pretrain,
                &cfg.finetune,
                &clips,
                &seg_train,
                &seg_test,
            )?;
            write_text(&out.dir.join("ablation.md"), &table.to_table())?;
            write_text(&out.dir.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
            print!("{}", table.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
