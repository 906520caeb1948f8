use std::path::Path;
use std::process::{Command, Output};

fn vnca(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vnca"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = vnca(args, dir);
    assert!(out.status.success(), "vnca {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = "[model]\nhidden_dim = 8\n[train]\nepochs = 2\nn_range = [1, 2]\nrender_size = 32\n\
    [extractor]\nwidth_divisor = 16\n[data]\nstyle = \"data/exemplar.png\"\nstyle_size = 32\ndensity_dir = \"data\"\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&["generate", "--out", "data", "--frames", "0..3", "--size", "8", "--exemplar-size", "32"], dir.path());
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn train_inspect_stylize_render() {
    let dir = workspace();
    let root = dir.path();
    assert!(ok(&["train", "--config", "run.toml", "--out", "run", "--dry-run"], root).contains("config ok"));
    assert!(!root.join("run").exists());

    ok(&["train", "--config", "run.toml", "--out", "run"], root);
    let log = std::fs::read_to_string(root.join("run/run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let info = ok(&["inspect", "--checkpoint", "run/checkpoint.json"], root);
    assert!(info.contains("C=12"));
    assert!(info.contains("hidden_dim=8"));
    assert!(info.contains("fire_rate=0.5"));

    let summary = ok(
        &[
            "stylize", "--checkpoint", "run/checkpoint.json", "--density-dir", "data", "--frames", "0..=2", "--steps-per-frame",
            "2", "--burn-in", "2", "--poses", "2", "--size", "16", "--out", "styl",
        ],
        root,
    );
    assert!(summary.contains("stylized 3 frames"), "{summary}");
    assert!(root.join("styl/frame_0002_view_01.png").exists());
    assert!(root.join("styl/stylized_0000.vnv").exists());

    ok(
        &[
            "render", "--density", "data/density_0001.vnv", "--stylized", "styl/stylized_0001.vnv", "--poses", "0,90:15",
            "--size", "16", "--out", "views",
        ],
        root,
    );
    assert!(std::fs::read_dir(root.join("views")).unwrap().count() >= 2);
}

#[test]
fn resume_continues_epoch_count() {
    let dir = workspace();
    let root = dir.path();
    ok(&["train", "--config", "run.toml", "--out", "run"], root);
    ok(&["train", "--config", "run.toml", "--out", "run", "--resume", "--epochs", "4"], root);
    let info = ok(&["inspect", "--checkpoint", "run/checkpoint.json"], root);
    assert!(info.contains("epochs=4"), "{info}");
    let log = std::fs::read_to_string(root.join("run/run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn stylize_rejects_other_volume_shape() {
    let dir = workspace();
    let root = dir.path();
    ok(&["train", "--config", "run.toml", "--out", "run"], root);
    ok(&["generate", "--out", "big", "--frames", "0..2", "--size", "10", "--exemplar-size", "32"], root);
    let out = vnca(
        &["stylize", "--checkpoint", "run/checkpoint.json", "--density-dir", "big", "--frames", "0..2", "--out", "s", "--dry-run"],
        root,
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("8x8x8") && err.contains("10x10x10"), "{err}");
}

#[test]
fn bad_arguments_fail() {
    let dir = workspace();
    let root = dir.path();
    assert!(!vnca(&["train", "--config", "missing.toml", "--out", "x"], root).status.success());
    assert!(!vnca(&["stylize", "--checkpoint", "nope.json", "--density-dir", "data", "--frames", "3..1", "--out", "x"], root)
        .status
        .success());
    std::fs::write(root.join("bad.toml"), "[train]\nepochs = 2\nbogus = 1\n").unwrap();
    let out = vnca(&["train", "--config", "bad.toml", "--out", "x", "--dry-run"], root);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
