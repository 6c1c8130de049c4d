use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmim_cli::commands::LOCK_FILE;
use cmim_cli::{cmd_ablate, ExperimentConfig};

const TINY: &str = r#"
task = "classification"
seed = 1

[data]
train_fraction = 0.5
val_fraction = 0.25

[data.synthetic]
num_samples = 32
image_size = 16

[classifier]
fused_local_dim = 4
bilinear_rank = 2
fused_global_dim = 4
critic_hidden = 4

[classifier.image]
input_size = 16
width = 4
stages = 2

[classifier.text]
embed_dim = 4
width = 4
blocks = 1

[train]
learning_rate = 0.003
batch_size = 8
max_epochs = 2
patience = 5
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn cmim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("max_epochs = 2", "max_epoch = 2"));
    let out = cmim(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_epoch"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = cmim(&["train", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(cmim(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--seed", seed]));
        let manifest = fs::read(out.join("manifest.jsonl")).unwrap();
        let mut files: Vec<PathBuf> = fs::read_dir(out.join("data/train"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        assert!(!files.is_empty());
        let payloads: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        (manifest, payloads)
    };
    let a = run("a", "3");
    let b = run("b", "3");
    let c = run("c", "4");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let text = String::from_utf8(a.0).unwrap();
    assert_eq!(text.lines().count(), 32);
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let stdout = ok(cmim(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]));
    assert!(stdout.contains("best epoch"));
    for f in ["best.ckpt", "metrics.csv", "resolved_config.toml", "run.log"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(LOCK_FILE).exists());
    let resolved = ExperimentConfig::from_toml(&fs::read_to_string(out.join("resolved_config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.seed, 7);
    assert_eq!(resolved.train.seed, 7);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,modality_subset,metric_name,value\n"));

    let stdout = ok(cmim(&["eval", "--config", s(&cfg), "--out", s(&out), "--seed", "7", "--modalities", "image"]));
    assert!(stdout.contains("image"));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.starts_with("subset,metric,value,n\nimage,AUC,"));

    ok(cmim(&["eval", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]));
    let first = fs::read(out.join("report.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let subsets: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(subsets, ["image", "text"]);
    ok(cmim(&["eval", "--config", s(&cfg), "--out", s(&out), "--seed", "7"]));
    assert_eq!(fs::read(out.join("report.csv")).unwrap(), first);

    let bad = cmim(&["eval", "--config", s(&cfg), "--out", s(&out), "--modalities", "audio"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("busy");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(LOCK_FILE), "1").unwrap();
    let res = cmim(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains(LOCK_FILE));
}

#[test]
fn ablation_with_mi_off_shows_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[train.weights]\nlambda_ll = 0.0\nlambda_lg = 0.0\nlambda_gg = 0.0\n");
    let cfg = ExperimentConfig::load(&write_config(dir.path(), &text))
        .unwrap()
        .resolve(None, Some(dir.path().join("ab")))
        .unwrap();
    let summary = cmd_ablate(&cfg).unwrap();
    assert_eq!(summary.comparison.names, ["cmim", "baseline"]);
    let csv = fs::read_to_string(&summary.csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("subset,metric,cmim,baseline,delta_baseline"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in &summary.comparison.rows {
        assert_eq!(row.deltas, [0.0]);
    }
    for arm in ["cmim", "baseline"] {
        for f in ["best.ckpt", "metrics.csv", "report.csv", "resolved_config.toml"] {
            assert!(cfg.out.join(arm).join(f).exists(), "{arm}/{f}");
        }
    }
}
