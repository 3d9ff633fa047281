//! Runs the `foodgan` binary on small toy data.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
batch_size = 8
fid_interval = 1000
fid_samples = 16
pfid_patches = 16

[generator]
z_dim = 8
w_dim = 16
embed_dim = 4
channels = 8
blocks = 2
fourier_features = 8
fourier_max_freq = 16.0
out_size = 16

[discriminator]
channels = 8
feature_dim = 16
in_size = 16
"#;

fn foodgan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foodgan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = foodgan(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// make-toy → global → patch → eval, all with relative paths inside `dir`.
fn pipeline(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(dir, &["make-toy", "--kind", "fine-texture", "--out", "data", "--per-class", "24", "--hr-per-class", "12", "--seed", "3"]);
    ok(dir, &["train", "--manifest", "data/manifest.jsonl", "--stage", "global", "--mode", "single", "--class", "burger",
        "--config", "tiny.toml", "--iterations", "6", "--seed", "5", "--out", "global"]);
    ok(dir, &["train", "--manifest", "data/manifest.jsonl", "--stage", "patch", "--mode", "single", "--class", "burger",
        "--config", "tiny.toml", "--iterations", "4", "--seed", "6", "--teacher", "global/checkpoint.ckpt",
        "--set", "teacher_weight=2.0", "--out", "patch"]);
    ok(dir, &["eval-pfid", "--ckpt", "patch/checkpoint.ckpt", "--manifest", "data/manifest.jsonl", "--patches", "40",
        "--seed", "1", "--out", "reports/pfid.json"]);
    ok(dir, &["eval-fid", "--ckpt", "global/checkpoint.ckpt", "--manifest", "data/manifest.jsonl", "--n", "40",
        "--seed", "1", "--out", "reports/fid.json"]);
}

#[test]
fn pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["reports/pfid.json", "reports/fid.json", "global/checkpoint.ckpt", "patch/checkpoint.ckpt", "patch/summary.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("reports/pfid.json")).unwrap()).unwrap();
    assert_eq!(report["metric"], "pfid");
    assert!(report["value"].as_f64().unwrap() >= 0.0);
    assert!(report["config_digest"].is_string());
    assert!(report["spec_digest"].is_string());
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("patch/summary.json")).unwrap()).unwrap();
    let config = std::fs::read_to_string(a.path().join("patch/config.toml")).unwrap();
    assert!(config.starts_with(&format!("# config_digest = \"{}\"", summary["config_digest"].as_str().unwrap())));
    assert_eq!(report["config_digest"], summary["config_digest"]);
    let log = std::fs::read_to_string(a.path().join("patch/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.lines().next().unwrap().contains(summary["config_digest"].as_str().unwrap()));

    // Generation: file names carry seed, index and class.
    ok(a.path(), &["generate", "--ckpt", "global/checkpoint.ckpt", "--n", "3", "--seed", "9", "--out", "gen"]);
    let mut names: Vec<String> = std::fs::read_dir(a.path().join("gen"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["s9_i00000_burger.png", "s9_i00001_burger.png", "s9_i00002_burger.png"]);
    ok(a.path(), &["generate", "--ckpt", "global/checkpoint.ckpt", "--n", "0", "--out", "empty"]);
    assert_eq!(std::fs::read_dir(a.path().join("empty")).unwrap().count(), 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&foodgan(d, &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&foodgan(d, &["frobnicate"])), 2);
    assert_eq!(code(&foodgan(d, &["eval-fid", "--ckpt", "missing.ckpt", "--manifest", "missing.jsonl"])), 3);
    assert_eq!(code(&foodgan(d, &["prepare-data", "--root", "nowhere", "--classes", "a", "--out", "m.jsonl"])), 3);

    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["make-toy", "--kind", "two-shapes", "--out", "data", "--per-class", "10"]);
    let bad_cfg = foodgan(d, &["train", "--manifest", "data/manifest.jsonl", "--config", "tiny.toml", "--set", "lr_g=-1.0", "--out", "x"]);
    assert_eq!(code(&bad_cfg), 2);
    let diverged = foodgan(
        d,
        &["train", "--manifest", "data/manifest.jsonl", "--config", "tiny.toml", "--iterations", "20",
          "--set", "lr_g=1e200", "--set", "lr_d=1e200", "--out", "div"],
    );
    assert_eq!(code(&diverged), 4, "{}", String::from_utf8_lossy(&diverged.stderr));
    let no_class = foodgan(d, &["train", "--manifest", "data/manifest.jsonl", "--mode", "single", "--out", "y"]);
    assert_eq!(code(&no_class), 2);
}

#[test]
fn prepare_data_reads_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["make-toy", "--kind", "three-foods", "--out", "foods", "--per-class", "4", "--hr-per-class", "2", "--lr-size", "8"]);
    let out = ok(d, &["prepare-data", "--root", "foods", "--classes", "hamburger,pizza,spring_rolls", "--lr-size", "8",
        "--hr-min-side", "16", "--layout", "lr=LR", "--layout", "hr=HR", "--out", "m.jsonl"]);
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!((summary["lr"].as_u64(), summary["hr"].as_u64()), (Some(12), Some(6)));
    assert_eq!(std::fs::read_to_string(d.join("m.jsonl")).unwrap().lines().count(), 19);
    // A higher HR threshold rejects every HR image.
    let out = ok(d, &["prepare-data", "--root", "foods", "--classes", "hamburger,pizza,spring_rolls", "--lr-size", "8",
        "--hr-min-side", "4096", "--layout", "lr=LR", "--layout", "hr=HR", "--out", "m2.jsonl"]);
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!((summary["hr"].as_u64(), summary["rejected_too_small"].as_u64()), (Some(0), Some(6)));
}

#[test]
fn augment_arms_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["make-toy", "--kind", "three-foods", "--out", "foods", "--per-class", "8", "--hr-per-class", "8", "--lr-size", "8", "--seed", "2"]);
    // A synthetic pool laid out as class folders under syn/.
    for class in ["hamburger", "pizza", "spring_rolls"] {
        let src = d.join("foods/lr").join(class);
        let dst = d.join("pool/syn").join(class);
        std::fs::create_dir_all(&dst).unwrap();
        for e in std::fs::read_dir(&src).unwrap() {
            let e = e.unwrap();
            std::fs::copy(e.path(), dst.join(e.file_name())).unwrap();
        }
    }
    ok(d, &["prepare-data", "--root", "pool", "--classes", "hamburger,pizza,spring_rolls", "--lr-size", "8",
        "--layout", "syn=SYNTHETIC", "--out", "syn.jsonl"]);
    std::fs::write(d.join("aug.toml"), "[classifier]\nwidth = 4\ninput_size = 8\nepochs = 3\n\n[sizes]\nreal_block = 12\ntest = 12\n").unwrap();
    for arm in ["1", "2", "3"] {
        ok(d, &["augment", "--arm", arm, "--seed", "4", "--manifest", "foods/manifest.jsonl", "--synthetic", "syn.jsonl",
            "--config", "aug.toml", "--out", "aug"]);
    }
    let r1: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("aug/report_arm1_seed4.json")).unwrap()).unwrap();
    let r2: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("aug/report_arm2_seed4.json")).unwrap()).unwrap();
    assert_eq!(r1["test_digest"], r2["test_digest"]);
    assert_eq!(r2["n_synthetic"], 12);
    ok(d, &["augment", "compare", "aug/report_arm3_seed4.json", "aug/report_arm1_seed4.json", "aug/report_arm2_seed4.json",
        "--out", "cmp.csv"]);
    let csv = std::fs::read_to_string(d.join("cmp.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "arm,test_acc,hamburger,pizza,spring_rolls");
    assert!(lines[1].starts_with("REAL_200,") && lines[3].starts_with("REAL_400,"));
    let short = foodgan(d, &["augment", "--arm", "3", "--manifest", "foods/manifest.jsonl", "--config", "aug.toml",
        "--set", "sizes.real_block=60"]);
    assert_eq!(code(&short), 3);
    assert!(String::from_utf8_lossy(&short.stderr).contains("short by"));
}
