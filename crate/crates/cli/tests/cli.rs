//! Drives the `mvcorr` binary through every stage on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "image_size=16",
    "--set", "n_views=4",
    "--set", "match_eps=0.1",
    "--set", "widths=4,4,4,4",
    "--set", "dim=4",
    "--set", "n_pairs=16",
    "--set", "pretrain.iterations=3",
    "--set", "pretrain.batch_size=1",
    "--set", "finetune.iterations=3",
    "--set", "finetune.batch_size=1",
];

fn mvcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvcorr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mvcorr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

fn synth(dir: &Path) {
    ok(&["synth", "--family", "furniture", "--n", "6", "--split", "2,2,2", "--seed", "3", "--out", path(dir)]);
}

#[test]
fn synth_writes_shapes_manifest_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("provenance.json").exists());
    let dirs = fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 6);
    assert!(data.join("shape_000/mesh.obj").exists());
    assert!(data.join("shape_000/labels.txt").exists());
}

#[test]
fn render_is_cached_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let mesh = data.join("shape_000/mesh.obj");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&with_tiny(&["render", "--in", path(&mesh), "--out", path(&a), "--dump-matches", "0,1"]));
    let first = fs::read(a.join("view_000.mvdc")).unwrap();
    let stamp = fs::metadata(a.join("view_000.mvdc")).unwrap().modified().unwrap();
    ok(&with_tiny(&["render", "--in", path(&mesh), "--out", path(&a)]));
    assert_eq!(fs::metadata(a.join("view_000.mvdc")).unwrap().modified().unwrap(), stamp, "cache was rewritten");
    ok(&with_tiny(&["render", "--in", path(&mesh), "--out", path(&b)]));
    for i in 0..4 {
        let name = format!("view_{i:03}.mvdc");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    assert_eq!(first, fs::read(b.join("view_000.mvdc")).unwrap());
    assert!(a.join("matches_000_001.bin").exists());
    assert!(a.join("view_000.png").exists());
    assert!(a.join("provenance.json").exists());
}

#[test]
fn unknown_config_key_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "image_size = 16\nnot_a_key = 3\n").unwrap();
    let out = mvcorr(&["render", "--config", path(&cfg), "--in", "missing.obj", "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not_a_key"), "{err}");
    assert!(err.contains("stage=render"), "{err}");
}

#[test]
fn keys_and_help_document_every_default() {
    let keys = String::from_utf8(ok(&["keys"]).stdout).unwrap();
    let help = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for (key, _) in mvcorr_train::config::KEYS {
        assert!(keys.contains(key), "keys output misses {key}");
        assert!(help.contains(key), "--help misses {key}");
    }
    assert!(keys.contains("[default: 0.07]"));
}

#[test]
fn stages_chain_and_leave_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = t.join("data");
    synth(&data);
    let (pre, fine, pred) = (t.join("pre"), t.join("fine"), t.join("pred"));
    ok(&with_tiny(&["pretrain", "--data", path(&data), "--out", path(&pre)]));
    assert!(pre.join("pretrain.ckpt").exists());
    assert!(pre.join("pretrain_loss.csv").exists());
    let init = pre.join("pretrain.ckpt");
    ok(&with_tiny(&[
        "finetune", "--data", path(&data), "--init", path(&init), "--protocol", "k=1,v=2,seed=5", "--out", path(&fine),
    ]));
    let run = fine.join("seed_5");
    assert!(run.join("finetune.ckpt").exists());
    assert!(run.join("selection.json").exists());
    ok(&with_tiny(&["infer", "--data", path(&data), "--ckpt", path(&run.join("finetune.ckpt")), "--out", path(&pred)]));
    let report = t.join("report.csv");
    ok(&["eval", "--pred", path(&pred), "--gt", path(&data), "--out", path(&report)]);
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("category,stat,value\n"), "{csv}");
    assert!(csv.contains("furniture,seed=5,"), "{csv}");
    for dir in [&pre, &run, &pred] {
        let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("provenance.json")).unwrap()).unwrap();
        assert!(prov["config_hash"].as_str().unwrap().len() == 64);
        assert!(prov["version"].as_str().unwrap().contains("mvcorr"));
    }
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(pred.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 5);

    let missing = mvcorr(&["infer", "--data", path(&data), "--ckpt", path(&t.join("nope.ckpt")), "--out", path(&pred)]);
    assert!(!missing.status.success());
}
