use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixstyle_cli::read_projection_csv;
use mixstyle_core::backbone::{Backbone, BackboneSpec};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

const TINY: &str = r#"
[dataset]
classes = 3
train_per_cell = 4
test_per_cell = 3
image_size = [3, 16, 16]
seed = 2

[model]
widths = [4, 4, 8, 8]

[train]
epochs = 1
batch_size = 8
seed = 1

[ablation]
n_seeds = 1
targets = [0]
"#;

fn mixstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixstyle")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let (cfg, data) = (cfg.to_str().unwrap().to_string(), data.to_str().unwrap().to_string());
    ok(&mixstyle(&["gen", "--config", &cfg, "--out", &data]));
    (cfg, data)
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_writes_every_split_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let stdout = ok(&mixstyle(&["gen", "--out", out.to_str().unwrap(), "--seed", "5"]));
        assert!(stdout.trim_end().ends_with("manifest.json"));
    }
    let files = read_all(&a);
    assert_eq!(files.len(), 9);
    for split in ["train", "test"] {
        assert_eq!(files.iter().filter(|(n, _)| n.ends_with(&format!("_{split}.mxds"))).count(), 4);
    }
    assert_eq!(files, read_all(&b));
    let manifest = String::from_utf8(files.iter().find(|(n, _)| n == "manifest.json").unwrap().1.clone()).unwrap();
    assert!(manifest.contains("seed = 5"), "effective config is embedded");
}

#[test]
fn invalid_class_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[dataset]\nclasses = 1\n").unwrap();
    let out = mixstyle(&["gen", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("K ≥ 2"));
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn unknown_keys_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = mixstyle(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let missing = dir.path().join("no-data");
    let out = mixstyle(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-data"));
}

#[test]
fn train_twice_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let runs: Vec<_> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = dir.path().join(r);
            let stdout = ok(&mixstyle(&[
                "train", "--config", &cfg, "--data", &data, "--seed", "1", "--out", out.to_str().unwrap(),
            ]));
            (stdout, read_all(&out))
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let report: serde_json::Value = serde_json::from_str(&runs[0].0).unwrap();
    assert_eq!(report["report"]["seed"], 1);
    assert_eq!(report["effective_config"]["model"]["widths"][2], 8);
    assert_eq!(runs[0].1.len(), 2);
}

#[test]
fn placement_ablation_has_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let out = dir.path().join("abl");
    let csv = ok(&mixstyle(&[
        "ablate", "--config", &cfg, "--data", &data, "--out", out.to_str().unwrap(), "--jobs", "2",
    ]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("config_id,target_domain,mean_acc,std_acc,n_seeds"));
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap().split('-').next().unwrap()).collect();
    assert_eq!(labels, ["res1", "res12", "res123", "res1234", "res14", "res23"]);
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap(), csv);
    assert!(!csv.contains('\r'));
}

#[test]
fn diag_of_an_untrained_model_emits_all_projections() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let spec = BackboneSpec::new(3, [4, 4, 8, 8], 3).unwrap();
    let ckpt = dir.path().join("untrained.ckpt");
    Backbone::<f32>::init(spec, &mut ChaCha8Rng::seed_from_u64(0)).save(&ckpt, "").unwrap();
    let out = dir.path().join("diag");
    let listed = ok(&mixstyle(&[
        "diag", "--config", &cfg, "--data", &data, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]));
    assert_eq!(listed.lines().count(), 8);
    let n = 4 * 3 * 3;
    for k in 1..=4 {
        for kind in ["style", "features"] {
            let rows = read_projection_csv(&out.join(format!("{kind}_res{k}.csv"))).unwrap();
            assert_eq!(rows.len(), n);
        }
    }

    let missing = mixstyle(&[
        "diag", "--config", &cfg, "--data", &data, "--checkpoint", "/nonexistent/model.ckpt", "--out", out.to_str().unwrap(),
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/model.ckpt"));
}
