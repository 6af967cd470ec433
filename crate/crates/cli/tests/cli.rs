use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const SMOKE: &str = "\
[dataset]
n_windows = 64

[model]
hidden = 8
output_dim = 8
adapter_width = 2
layers = [1, 1, 1]

[training]
epochs = 2
batch_size = 16

[training.probe]
max_epochs = 300
";

fn mbsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbsl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn smoke_config(dir: &Path) -> PathBuf {
    let path = dir.join("smoke.toml");
    fs::write(&path, SMOKE).unwrap();
    path
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["generate", "group", "pretrain", "probe", "ablate", "all"] {
        let o = mbsl(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn generate_is_reproducible_and_echoes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = mbsl(&["generate", "--n-windows", "40", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(echoed["n_windows"], 40);
    let names: Vec<String> = tree_bytes(&a.join("dataset")).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["acc.bin", "labels.bin", "manifest.json", "ppg.bin", "spo2.bin"]);
    assert!(mbsl(&["generate", "--n-windows", "40", "--out", b.to_str().unwrap()])
        .status
        .success());
    assert_eq!(tree_bytes(&a.join("dataset")), tree_bytes(&b.join("dataset")));
}

#[test]
fn invalid_spec_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "[dataset]\nmodalities = [{ name = \"a\", channels = 0, kind = \"trend\", amplitude_range = [0.0, 1.0] }]\n",
    )
    .unwrap();
    let o = mbsl(&[
        "-c",
        cfg.to_str().unwrap(),
        "generate",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("modalities[0].channels"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[training]\nlearning_rate = 0.1\n").unwrap();
    let o = mbsl(&[
        "-c",
        cfg.to_str().unwrap(),
        "generate",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn grouping_recovers_planted_groups() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(mbsl(&["generate", "--n-windows", "60", "--out", out]).status.success());
    let data = dir.path().join("dataset");
    let o = mbsl(&["group", "--data", data.to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = read_json(&dir.path().join("grouping.json"));
    assert_eq!(g["groups"], serde_json::json!([[0, 1], [2]]));
    assert_eq!(g["modalities"], serde_json::json!(["ppg", "acc", "spo2"]));
    assert!(g["points"].as_array().unwrap().len() > 3);

    let o = mbsl(&[
        "group",
        "--data",
        data.to_str().unwrap(),
        "--variant",
        "full",
        "--method",
        "pca",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        read_json(&dir.path().join("grouping.json"))["groups"]
            .as_array()
            .unwrap()
            .len(),
        3
    );

    let o = mbsl(&[
        "group",
        "--data",
        data.to_str().unwrap(),
        "--threshold",
        "inf",
        "--out",
        out,
    ]);
    assert!(o.status.success());
    assert_eq!(
        read_json(&dir.path().join("grouping.json"))["groups"],
        serde_json::json!([[0, 1, 2]])
    );
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = dir.path().join("nope");
    let o = mbsl(&["group", "--data", missing.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = mbsl(&["probe", "--out", out]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint"));
    let o = mbsl(&["-c", missing.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.status.success());
    let o = mbsl(&["ablate", "--variants", "full,bogus", "--out", out]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn pretrain_probe_smoke_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let o = mbsl(&["-c", cfg, "pretrain", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mbsl(&["-c", cfg, "probe", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 60);

    let report = read_json(&a.join("pretrain/report.json"));
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 6);
    assert!(report["metrics"]["test"]["mae"].as_f64().unwrap().is_finite());
    let csv = fs::read_to_string(a.join("pretrain/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let probe = read_json(&a.join("probe.json"));
    assert_eq!(probe["metrics"]["test"], report["metrics"]["test"]);

    assert!(mbsl(&["-c", cfg, "pretrain", "--out", b.to_str().unwrap()])
        .status
        .success());
    assert_eq!(
        tree_bytes(&a.join("pretrain/checkpoint")),
        tree_bytes(&b.join("pretrain/checkpoint"))
    );
}

#[test]
fn json_config_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"dataset": {"n_windows": 48}, "training": {"epochs": 3}, "model": {"hidden": 8, "output_dim": 8, "layers": [1, 1, 1]}}"#).unwrap();
    let o = mbsl(&[
        "-c",
        cfg.to_str().unwrap(),
        "pretrain",
        "--epochs",
        "1",
        "--max-steps",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("pretrain/report.json"));
    assert_eq!(report["config"]["training"]["epochs"], 1);
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 1);
}

#[test]
fn ablation_table_has_eleven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().to_str().unwrap();
    let o = mbsl(&[
        "-c",
        cfg.to_str().unwrap(),
        "ablate",
        "--epochs",
        "1",
        "--jobs",
        "2",
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read_json(&dir.path().join("ablation/table.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 11);
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names[0], "full");
    assert!(names.contains(&"wo_img") && names.contains(&"plain_tcn"));
    assert!(dir.path().join("ablation/wo_img.loss.csv").is_file());
}
