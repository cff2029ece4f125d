use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn selrcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selrcn")).args(args).output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn synth(dir: &Path, name: &str, samples: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let o = selrcn(&[
        "synth-gen",
        "--out",
        out.to_str().unwrap(),
        "--samples",
        &samples.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out.join("manifest.csv")
}

#[test]
fn gradcheck_passes_on_tiny_preset() {
    let o = selrcn(&["gradcheck", "--preset", "tiny", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let value: f64 = out.trim().strip_prefix("max relative error ").unwrap().parse().unwrap();
    assert!(value < 1e-4);
}

#[test]
fn train_without_manifest_is_a_usage_error() {
    let o = selrcn(&["train"]);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    assert!(err.contains("--manifest") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = selrcn(&["train", "--manifest", "m.csv", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("--bogus"));
    assert_eq!(selrcn(&["train", "--manifest", "m.csv", "--squeeze-axis", "spatial"]).status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let o = selrcn(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["train", "eval", "ablate", "gradcheck", "synth-gen", "features"] {
        assert!(text(&o.stdout).contains(sub));
    }
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let o = selrcn(&["train", "--manifest", "/nonexistent/m.csv", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("/nonexistent/m.csv"));
}

#[test]
fn train_eval_and_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "data", 8, 1);
    let (m, ckpt, metrics) = (manifest.to_str().unwrap(), dir.path().join("a.ckpt"), dir.path().join("m.csv"));
    let common = ["--lr", "1e-3", "--batch", "4", "--hidden", "8", "--seed", "3"];
    let mut args = vec!["train", "--manifest", m, "--eval-manifest", m, "--epochs", "1"];
    args.extend(common);
    args.extend(["--checkpoint", ckpt.to_str().unwrap(), "--out", metrics.to_str().unwrap()]);
    let o = selrcn(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,eval_acc");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,") && !lines[1].ends_with(','));

    let resumed = dir.path().join("b.ckpt");
    let o = selrcn(&[
        "train", "--manifest", m, "--resume", ckpt.to_str().unwrap(), "--epochs", "2",
        "--checkpoint", resumed.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let rows = text(&o.stdout);
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().nth(1).unwrap().starts_with("2,"));

    let o = selrcn(&["eval", "--manifest", m, "--checkpoint", resumed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let table = text(&o.stdout);
    assert_eq!(table.lines().next(), Some("class,videos,accuracy"));
    assert_eq!(table.lines().count(), 5);

    let o = selrcn(&["eval", "--manifest", m, "--checkpoint", dir.path().join("none").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "data", 4, 2);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"SELR\x01\x00\x00\x00garbage").unwrap();
    let o = selrcn(&["eval", "--manifest", manifest.to_str().unwrap(), "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("offset"));
}

#[test]
fn se_ablation_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "data", 4, 4);
    let out = dir.path().join("ablation.csv");
    let o = selrcn(&[
        "ablate", "--axes", "se", "--manifest", manifest.to_str().unwrap(), "--epochs", "1", "--hidden", "8",
        "--lr", "1e-3", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "se_spatial,se_temporal,layers,hidden,eval_acc");
    let prefixes: Vec<&str> = lines[1..].iter().map(|l| &l[..l.find(",2,").unwrap()]).collect();
    assert_eq!(prefixes, ["off,off", "on,off", "off,on", "on,on"]);
}

#[test]
fn features_csv_is_frames_by_channels() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "data", 2, 5);
    let o = selrcn(&["features", "--manifest", manifest.to_str().unwrap(), "--video", "1"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let rows: Vec<Vec<f64>> =
        out.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.len() == 64 && r.iter().all(|v| v.is_finite())));

    let o = selrcn(&["features", "--manifest", manifest.to_str().unwrap(), "--video", "5"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn synth_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 3, 9);
    let b = synth(dir.path(), "b", 3, 9);
    assert_eq!(fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap());
    let frame = |m: &Path| fs::read(m.parent().unwrap().join("video_00002/frame_000004.ppm")).unwrap();
    assert_eq!(frame(&a), frame(&b));
}
