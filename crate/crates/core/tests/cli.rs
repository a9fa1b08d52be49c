use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drfuse"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = drfuse(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    drfuse(dir, args).status.code().expect("exit code")
}

#[test]
fn stage_verbs_on_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--counts", "10,6,12,6,6", "--size", "48", "--seed", "2", "--out", "data"]);
    let out = ok(d, &["prepare", "--root", "data", "--corpus", "idrid", "--out", "prepared.txt"]);
    assert!(out.contains("[10, 6, 12, 6, 6]"), "{out}");
    ok(d, &["merge", "prepared.txt", "--out", "merged.txt"]);
    let out = ok(d, &["balance", "--manifest", "merged.txt", "--k", "3", "--feature-size", "32", "--seed", "1", "--out", "bal"]);
    assert!(out.contains("[10, 8, 12, 8, 8]"), "{out}");
    ok(d, &["enhance", "--manifest", "bal/balanced.txt", "--grid", "4x4", "--size", "32", "--out", "enh"]);
    assert!(fs::read_to_string(d.join("enh/contrast.csv")).unwrap().lines().count() > 40);
    ok(d, &["split", "--manifest", "enh/enhanced.txt", "--ratios", "0.6,0.2,0.2", "--seed", "3", "--out", "split.txt"]);
    fs::write(d.join("train.toml"), "[train]\nepochs = 1\nbatch_size = 8\nlearning_rate = 1e-3\n").unwrap();
    let args = [
        "train", "--config", "train.toml", "--manifest", "split.txt", "--model", "vgg16", "--width-divisor", "16", "--size", "32",
        "--out", "ckpt",
    ];
    ok(d, &args);
    for f in ["ckpt/model.toml", "ckpt/weights.bin", "ckpt/history.csv", "ckpt/loss.png"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let out = ok(d, &["evaluate", "--checkpoint", "ckpt", "--manifest", "split.txt", "--report", "rep"]);
    assert!(out.contains("auc"), "{out}");
    let csv = fs::read_to_string(d.join("rep/metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n") && csv.contains("accuracy,"));
    assert!(d.join("rep/confusion.csv").is_file() && d.join("rep/roc.png").is_file());

    let img = fs::read_dir(d.join("data/Severe")).unwrap().next().unwrap().unwrap().path();
    let img = img.to_str().unwrap();
    let out = ok(d, &["explain", "--checkpoint", "ckpt", "--image", img, "--method", "gradcam", "--class", "Severe", "--out", "xai"]);
    assert!(out.contains("predicted"), "{out}");
    let names: Vec<String> = fs::read_dir(d.join("xai")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(names.iter().any(|n| n.ends_with("_grid.png")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with("_grid.json")), "{names:?}");
    assert!(names.len() >= 4, "{names:?}");

    assert_eq!(code(d, &["explain", "--checkpoint", "ckpt", "--image", img, "--layer", "nope", "--out", "xai"]), 1);
    assert_eq!(code(d, &["explain", "--checkpoint", "ckpt", "--image", img, "--method", "lime", "--out", "xai"]), 1);
}

#[test]
fn config_driven_run_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--counts", "8,8,8,8,8", "--size", "48", "--out", "data"]);
    let cfg = r#"
seed = 4
output = "run"

[[corpus]]
id = "synthetic"
root = "data"

[smote]
k = 3
feature_size = 32

[clahe]
size = 32
grid = "4x4"

[[model]]
name = "vgg16"
width_divisor = 16

[train]
batch_size = 8
epochs = 1

[xai]
methods = ["gradcam"]
"#;
    fs::write(d.join("run.toml"), cfg).unwrap();
    let out = ok(d, &["--config", "run.toml", "split"]);
    assert!(out.contains("split"), "{out}");
    assert!(!d.join("run/checkpoints/vgg16").exists());
    let out = ok(d, &["--config", "run.toml", "run"]);
    assert!(out.contains("vgg16: accuracy"), "{out}");
    assert!(d.join("run/reports/summary.md").is_file());

    // --out moves the run elsewhere
    ok(d, &["--config", "run.toml", "--out", "other", "merge"]);
    assert!(d.join("other/manifests/merged.txt").is_file());

    assert_eq!(code(d, &["run"]), 1);
    assert_eq!(code(d, &["--config", "missing.toml", "run"]), 1);
    assert_eq!(code(d, &["bogus"]), 1);
    assert_eq!(code(d, &["--help"]), 0);
    fs::write(d.join("bad.toml"), cfg.replace("root = \"data\"", "root = \"nowhere\"")).unwrap();
    assert_eq!(code(d, &["--config", "bad.toml", "run"]), 1);

    // a class too small to split is a stage failure
    ok(d, &["synth", "--counts", "6,2,6,6,6", "--size", "48", "--out", "tiny"]);
    let failing = cfg.replace("root = \"data\"", "root = \"tiny\"").replace("output = \"run\"", "output = \"run2\"")
        + "\n[smote]\nenabled = false\n";
    let failing = failing.replacen("[smote]\nk = 3\nfeature_size = 32\n", "", 1);
    fs::write(d.join("fail.toml"), failing).unwrap();
    assert_eq!(code(d, &["--config", "fail.toml", "run"]), 2);
    assert!(fs::read_to_string(d.join("run2/reports/run.json")).unwrap().contains("\"failure\""));
}
