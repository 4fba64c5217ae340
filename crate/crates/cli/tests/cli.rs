use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diffeat::extraction::{FeatureRecord, FeatureStore};
use ndarray::Array3;

fn diffeat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffeat")).args(args).output().unwrap()
}

fn stdout(args: &[&str]) -> String {
    let out = diffeat(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn filter_sdxl_reports_the_reduction_last() {
    let text = stdout(&["filter", "--model", "sdxl"]);
    assert_eq!(text.trim_end().lines().last(), Some("63 candidates retained (78% reduction)"));
    assert_eq!(text.lines().filter(|l| l.starts_with("up-level")).count(), 63);
    let sd15 = stdout(&["filter", "--model", "sd15"]);
    assert!(sd15.trim_end().ends_with("33 candidates retained (78% reduction)"));
}

#[test]
fn catalog_sd15_lists_late_self_attention_keys() {
    let text = stdout(&["catalog", "--model", "sd15"]);
    assert!(text.lines().any(|l| l == "up-level3-repeat0-vit-block0-self-k"));
}

#[test]
fn unknown_model_and_missing_store_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let store = store.to_str().unwrap();
    for args in [
        vec!["catalog", "--model", "sd99"],
        vec!["extract", "--model", "sdxl", "--dataset", "synthetic:simple", "--store", store],
        vec!["extract", "--dataset", "elsewhere:x", "--store", store],
        vec!["visualize", "--feature", "up-level1-repeat1-res-out", "--sample", "x", "--store", store],
    ] {
        let out = diffeat(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "), "{args:?}");
    }
}

#[test]
fn constant_activation_renders_uniform_gray() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::open(dir.path().join("store")).unwrap();
    let id = "up-level1-repeat1-res-out".parse().unwrap();
    store.write(&FeatureRecord::new("toy", id, "still", Array3::from_elem((6, 8, 8), 0.25)).unwrap()).unwrap();
    let out = dir.path().join("out");
    let printed = stdout(&[
        "visualize",
        "--feature",
        "up-level1-repeat1-res-out",
        "--sample",
        "still",
        "--store",
        dir.path().join("store").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let path = Path::new(printed.trim());
    assert!(path.starts_with(&out));
    let img = image::open(path).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (8, 8));
    assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
}

fn pipeline(root: &Path) -> (String, String) {
    let store = root.join("store");
    let out = root.join("out");
    let probe = root.join("probe.toml");
    fs::write(&probe, "ensemble_size = 1\nhidden = [8]\nepochs = 1\nbatch_size = 256\nlearning_rate = 0.01\n").unwrap();
    let (store, out, probe) = (store.to_str().unwrap(), out.to_str().unwrap(), probe.to_str().unwrap());
    for name in ["synthetic:simple", "synthetic:complex"] {
        stdout(&["extract", "--dataset", name, "--images", "6", "--store", store, "--out", out, "--workers", "2"]);
    }
    stdout(&[
        "compare", "--dataset", "synthetic:simple", "--dataset", "synthetic:complex", "--images", "6", "--store", store,
        "--probe-config", probe, "--seed", "5", "--out", out,
    ]);
    let read = |f: &str| fs::read_to_string(root.join("out").join(f)).unwrap();
    (read("ranking-toy.txt"), read("ranking-toy.json"))
}

#[test]
fn compare_reports_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    assert_eq!(first, pipeline(b.path()));
    assert!(first.0.contains("seed=5"));
    let files: Vec<String> = fs::read_dir(a.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files.len(), 3, "{files:?}");
}
