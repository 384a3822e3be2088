//! Drives the `latent-vqa` binary and checks files and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use latent_vqa::config::ModelConfig;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-vqa")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn gen(dir: &Path, seed: &str) -> Output {
    bin(&[
        "gen-data", "--out", dir.to_str().unwrap(), "--seed", seed,
        "--organs", "2", "--diseases", "2", "--train", "6", "--val", "4", "--test", "4", "--image-size", "8",
    ])
}

fn tiny_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let cfg = ModelConfig {
        epochs,
        ..ModelConfig::tiny()
    };
    let p = dir.join(format!("tiny{epochs}.toml"));
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    assert_eq!(code(&gen(&a, "9")), 0);
    assert_eq!(code(&gen(&b, "9")), 0);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "graph.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let bad = bin(&["gen-data", "--out", s(&root.path().join("c")), "--train", "0"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
}

#[test]
fn train_then_eval() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let out = root.path().join("run");
    assert_eq!(code(&gen(&data, "1")), 0);
    let cfg = tiny_config(root.path(), 2);

    let t = bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--seed", "3", "--sequential"]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert!(out.join("checkpoint.json").is_file());

    let e = bin(&["eval", "--checkpoint", s(&out), "--data", s(&data), "--split", "test"]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let r: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    for k in ["open_acc", "closed_acc", "overall_acc", "n_open", "n_closed"] {
        assert!(r.get(k).is_some(), "missing {k}");
    }
    assert_eq!(r["n_open"].as_u64().unwrap() + r["n_closed"].as_u64().unwrap(), 4);

    // The checkpoint was trained with seed 3; the config file still says 7.
    let mismatch = bin(&["eval", "--checkpoint", s(&out), "--data", s(&data), "--config", s(&cfg)]);
    assert_eq!(code(&mismatch), 1);

    let unknown_split = bin(&["eval", "--checkpoint", s(&out), "--data", s(&data), "--split", "dev"]);
    assert_eq!(code(&unknown_split), 1);

    let corrupt = root.path().join("corrupt.json");
    let text = std::fs::read_to_string(out.join("checkpoint.json")).unwrap();
    std::fs::write(&corrupt, &text[..text.len() / 2]).unwrap();
    assert_eq!(code(&bin(&["eval", "--checkpoint", s(&corrupt), "--data", s(&data)])), 1);

    let tampered = root.path().join("tampered.json");
    std::fs::write(&tampered, text.replacen("\"d\":8", "\"d\":16", 1)).unwrap();
    assert_eq!(code(&bin(&["eval", "--checkpoint", s(&tampered), "--data", s(&data)])), 1);
}

#[test]
fn train_rejects_bad_inputs() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    assert_eq!(code(&gen(&data, "1")), 0);
    let out = s(&root.path().join("run")).to_string();

    let missing = bin(&["train", "--data", s(&root.path().join("nowhere")), "--out", &out]);
    assert_eq!(code(&missing), 1);

    let bad_cfg = root.path().join("bad.toml");
    std::fs::write(&bad_cfg, "d = 10\nheads = 4\n").unwrap();
    assert_eq!(code(&bin(&["train", "--config", s(&bad_cfg), "--data", s(&data), "--out", &out])), 1);

    std::fs::write(&bad_cfg, "depth = 3\n").unwrap();
    assert_eq!(code(&bin(&["train", "--config", s(&bad_cfg), "--data", s(&data), "--out", &out])), 1);

    // Default patch size 8 fits, but 3 does not divide 8x8 images.
    std::fs::write(&bad_cfg, "patch_size = 3\nepochs = 1\n").unwrap();
    assert_eq!(code(&bin(&["train", "--config", s(&bad_cfg), "--data", s(&data), "--out", &out])), 1);
}

#[test]
fn gradcheck_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let report = root.path().join("gc.json");
    let ok = bin(&["gradcheck", "--sequential", "--out", s(&report)]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-5);

    // Central differences are never exact, so a zero tolerance must fail.
    assert_eq!(code(&bin(&["gradcheck", "--sequential", "--tol", "0"])), 2);
    assert_eq!(code(&bin(&["gradcheck", "--tol", "-1"])), 1);

    let big = root.path().join("big.toml");
    std::fs::write(&big, ModelConfig::default().to_toml()).unwrap();
    assert_eq!(code(&bin(&["gradcheck", "--config", s(&big)])), 1);
}

#[test]
fn ablate_rejects_unknown_axis() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    assert_eq!(code(&gen(&data, "1")), 0);
    let o = bin(&["ablate", "--axis", "depth", "--data", s(&data), "--out", s(&root.path().join("abl"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("depth"));
}

#[test]
fn ablate_single_axis_writes_csv() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    assert_eq!(code(&gen(&data, "1")), 0);
    let cfg = tiny_config(root.path(), 1);
    let out = root.path().join("abl");
    let o = bin(&[
        "ablate", "--axis", "fusion_order", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--sequential",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("ablation_fusion_order.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "fusion_order,open_acc,closed_acc,overall_acc,n_params,config_hash");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("I>L>MM,") && lines[2].starts_with("L>I>MM,"));
}

#[test]
fn usage_errors_are_validation_errors() {
    assert_eq!(code(&bin(&["frobnicate"])), 1);
    assert_eq!(code(&bin(&["train"])), 1);
    assert_eq!(code(&bin(&["gradcheck", "--tol", "abc"])), 1);
    assert_eq!(code(&bin(&["--help"])), 0);
}
