use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
[model]
kind = "twlc"
k = 2
m = 2
t = 4
snr1_db = 8.0
snr2_db = 8.0
steps = 40
eval_every = 20
val_episodes = 500
calib_episodes = 1000
batch = 64
[model.arch]
hidden = 8
head_hidden = 8
[eval]
min_trials = 2000
max_trials = 2000
seed = 4
[ood]
snr1_db = 8.0
snr2_db = [4.0, 12.0]
"#;

fn twoway(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twoway")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn flops_table() {
    let out = twoway(&["flops"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("model,k,m,t,encode,decode,total"));
    let models: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["twlc", "twbaf", "twrnn"]);
}

#[test]
fn flops_rejects_bad_dimensions() {
    let out = twoway(&["flops", "--m", "4"]);
    assert!(!out.status.success());
}

#[test]
fn train_then_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out_dir = out_dir.to_str().unwrap();

    let eval = twoway(&["eval", "--config", &config, "--out", out_dir]);
    assert!(!eval.status.success());
    assert!(text(&eval.stderr).contains("does not exist"));

    let train = twoway(&["train", "--config", &config, "--out", out_dir]);
    assert!(train.status.success(), "{}", text(&train.stderr));
    assert!(dir.path().join("out/tiny.ckpt").exists());
    assert!(dir.path().join("out/tiny_curve.csv").exists());

    let eval = twoway(&["eval", "--config", &config, "--out", out_dir, "--workers", "2"]);
    assert!(eval.status.success(), "{}", text(&eval.stderr));
    assert!(text(&eval.stdout).contains("trials=2000"));
    let csv = std::fs::read_to_string(dir.path().join("out/tiny_eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let sweep = twoway(&["ood-sweep", "--config", &config, "--out", out_dir]);
    assert!(sweep.status.success(), "{}", text(&sweep.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/tiny_ood.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let changed = twoway(&["eval", "--config", &config, "--out", out_dir, "--seed", "99"]);
    assert!(!changed.status.success());
}

#[test]
fn polar_baseline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = twoway(&["polar-baseline", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(out_dir.join("tiny_polar.csv").exists());
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\n[model]\nkind = \"nope\"\n").unwrap();
    let out = twoway(&["run", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("bad.toml"));
}
