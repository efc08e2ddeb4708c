use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cyclemae"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// Small but complete run configuration rooted in `dir`.
fn write_config(dir: &Path, extra_pretrain: &str, extra_finetune: &str) -> PathBuf {
    let extra_pretrain = if extra_pretrain.contains("epochs") {
        extra_pretrain.to_string()
    } else {
        format!("epochs = 2\n{extra_pretrain}")
    };
    let extra_finetune = if extra_finetune.contains("epochs") {
        extra_finetune.to_string()
    } else {
        format!("epochs = 20\n{extra_finetune}")
    };
    let text = format!(
        r#"
[data]
n_clips = 10
frames = 16
height = 32
width = 32
periods = [4, 8]
noise_level = 0.05
seed = 3
val_fraction = 0.1
test_fraction = 0.3
dir = "{data}"

[model]
patch_h = 8
patch_w = 8
patch_t = 4
embed_dim = 8
enc_depth = 1
enc_heads = 2
dec_width = 8
dec_depth = 1
dec_heads = 2
proj_depth = 1
proj_heads = 2
proj_dim = 8
mlp_ratio = 2

[pretrain]
batch_size = 4
learning_rate = 0.001
warmup_steps = 2
{extra_pretrain}

[finetune]
{extra_finetune}

[ablation]
mask_ratios = [0.5, 0.75]
patch_sizes = [[8, 8, 4], [16, 16, 4]]
base_patch = [8, 8, 4]
base_ratio = 0.75

[output]
dir = "{out}"
"#,
        data = dir.join("data").display(),
        out = dir.join("run").display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        assert!(run(&["gen-data", "-c", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]).status.success());
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10 * 3 + 1);
    for name in names {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn seed_override_changes_the_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["gen-data", "-c", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(run(&["gen-data", "-c", cfg.to_str().unwrap(), "--seed", "99", "--out", b.to_str().unwrap()]).status.success());
    let first = |d: &Path| std::fs::read(d.join("clip_00000.clip")).unwrap();
    assert_ne!(first(&a), first(&b));
}

fn log_records(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn ablation_switch_zeroes_the_contrastive_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "enable_contrastive = false", "");
    let c = cfg.to_str().unwrap();
    assert!(run(&["gen-data", "-c", c]).status.success());
    assert!(run(&["pretrain", "-c", c]).status.success());
    let records = log_records(&tmp.path().join("run/train_log.jsonl"));
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r["l_c"] == 0.0 && r["triplet_count"] == 0));

    let cfg = write_config(tmp.path(), "", "");
    assert!(run(&["pretrain", "-c", cfg.to_str().unwrap()]).status.success());
    let records = log_records(&tmp.path().join("run/train_log.jsonl"));
    assert!(records.iter().any(|r| r["triplet_count"].as_u64().unwrap() > 0));
    assert!(tmp.path().join("run/final.ckpt").exists());
}

#[test]
fn pretrain_rerun_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "");
    let c = cfg.to_str().unwrap();
    assert!(run(&["gen-data", "-c", c]).status.success());
    assert!(run(&["pretrain", "-c", c]).status.success());
    let first = std::fs::read(tmp.path().join("run/final.ckpt")).unwrap();
    let first_log = std::fs::read(tmp.path().join("run/train_log.jsonl")).unwrap();
    assert!(run(&["pretrain", "-c", c]).status.success());
    assert_eq!(first, std::fs::read(tmp.path().join("run/final.ckpt")).unwrap());
    assert_eq!(first_log, std::fs::read(tmp.path().join("run/train_log.jsonl")).unwrap());
}

#[test]
fn evaluate_reproduces_the_finetune_report() {
    let tmp = tempfile::tempdir().unwrap();
    for (task, extra) in [("classification", ""), ("segmentation", "task = \"segmentation\"\nn_classes = 1")] {
        let cfg = write_config(tmp.path(), "", extra);
        let c = cfg.to_str().unwrap();
        assert!(run(&["gen-data", "-c", c]).status.success());
        assert!(run(&["pretrain", "-c", c]).status.success());
        assert!(run(&["finetune", "-c", c]).status.success(), "{task}");
        let out = run(&["evaluate", "-c", c]);
        assert!(out.status.success(), "{task}");
        let emitted: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/report.json")).unwrap()).unwrap();
        let recomputed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(emitted, recomputed, "{task}");
        assert_eq!(emitted["task"], task);
    }
}

#[test]
fn inspect_sim_writes_a_symmetric_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "");
    let c = cfg.to_str().unwrap();
    assert!(run(&["gen-data", "-c", c]).status.success());
    assert!(run(&["pretrain", "-c", c]).status.success());
    let out = tmp.path().join("sim.csv");
    let ckpt = tmp.path().join("run/final.ckpt");
    let clip = tmp.path().join("data/clip_00001.clip");
    for extra in [&[][..], &["--mask-ratio", "0.5", "--mask-seed", "4"][..]] {
        let mut args = vec![
            "inspect-sim",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--clip",
            clip.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        assert!(run(&args).status.success());
        let text = std::fs::read_to_string(&out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# n_t=4"));
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(rows.len(), 4);
        for i in 0..4 {
            assert_eq!(rows[i][i], 0.0);
            for j in 0..4 {
                assert_eq!(rows[i][j], rows[j][i]);
            }
        }
    }
}

#[test]
fn ablation_command_reports_every_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "epochs = 1", "task = \"segmentation\"\nn_classes = 1\nepochs = 2");
    let c = cfg.to_str().unwrap();
    assert!(run(&["gen-data", "-c", c]).status.success());
    let out = run(&["ablation", "-c", c]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Patch Size | mDice"));
    assert!(table.contains("8x8x4 | ") && table.contains("16x16x4 | "));
    assert!(table.contains("Ratio | mDice"));
    assert!(table.contains("50% | ") && table.contains("75% | "));
    assert!(tmp.path().join("run/ablation.md").exists());
}

#[test]
fn invalid_configs_exit_nonzero_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    for (text, key) in [
        ("[pretrain]\nbatch_size = 0\n", "pretrain.batch_size"),
        ("[pretrain]\nlearnin_rate = 1.0\n", "learnin_rate"),
        ("[finetune]\nlabel_fraction = 2.0\n", "finetune.label_fraction"),
        ("[data]\nperiods = [64]\n", "data.periods"),
    ] {
        std::fs::write(&bad, text).unwrap();
        let out = bin().args(["gen-data", "-c", bad.to_str().unwrap()]).output().unwrap();
        assert!(!out.status.success(), "{text}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{err}");
    }
    assert!(!bin().arg("train-everything").output().unwrap().status.success());
}

#[test]
fn missing_period_annotation_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "");
    let c = cfg.to_str().unwrap();
    assert!(run(&["gen-data", "-c", c]).status.success());
    let meta = tmp.path().join("data/clip_00002.meta");
    let text = std::fs::read_to_string(&meta).unwrap();
    let stripped: String = text.lines().filter(|l| !l.starts_with("period_hint")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&meta, stripped).unwrap();
    let out = bin().args(["pretrain", "-c", c]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip_00002"));
}
