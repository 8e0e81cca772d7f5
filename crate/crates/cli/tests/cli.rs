use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn claw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_claw")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = claw(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, size: usize) -> PathBuf {
    let data = dir.join("data");
    let (count, size) = (count.to_string(), size.to_string());
    // small images need thinner vessels than the default width range
    ok(&["synth", "--out", p(&data), "--count", &count, "--size", &size, "--seed", "1", "--set", "synth_width_max=3"]);
    data
}

// the toy preset takes 32² input
const TOY_TRAIN: &[&str] = &["--preset", "toy", "--epochs", "1", "--batch-size", "2"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TOY_TRAIN);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn synth_writes_pairs_and_spec() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1, 64);
    assert!(data.join("images/synth_1_0.png").is_file());
    assert!(data.join("masks/synth_1_0.png").is_file());
    let spec = fs::read_to_string(data.join("spec.txt")).unwrap();
    assert!(spec.lines().any(|l| l == "synth_size=64"), "{spec}");
}

#[test]
fn synth_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (synth(a.path(), 2, 48), synth(b.path(), 2, 48));
    for rel in ["images/synth_1_0.png", "masks/synth_1_1.png", "spec.txt"] {
        assert_eq!(fs::read(da.join(rel)).unwrap(), fs::read(db.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn train_smoke_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5, 64);
    let out = dir.path().join("run");
    let o = train(&data, &out, &["--size", "64", "--depth", "2"]);
    for f in ["model.ckpt", "history.csv", "report.csv", "report.json", "run.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("step,loss"));
    assert_eq!(history.lines().count(), 1 + 2, "4 training samples in batches of 2");
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("image,miou,dice,aver_hd"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("Dice="));
}

#[test]
fn repeated_training_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5, 32);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a, &["--seed", "4"]);
    train(&data, &b, &["--seed", "4"]);
    for f in ["model.ckpt", "history.csv", "report.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5, 32);
    let out = dir.path().join("run");
    train(&data, &out, &["--lr", "0", "--save-init"]);
    assert_eq!(fs::read(out.join("init.ckpt")).unwrap(), fs::read(out.join("model.ckpt")).unwrap());
}

#[test]
fn eval_and_predict_use_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5, 32);
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let ckpt = run.join("model.ckpt");

    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&ev), "--split", "test"]);
    // same split seed, so this scores the image the training run held out
    assert_eq!(fs::read(ev.join("report.csv")).unwrap(), fs::read(run.join("report.csv")).unwrap());

    let image = data.join("images/synth_1_0.png");
    let all = dir.path().join("all.png");
    let none = dir.path().join("none.png");
    let prob = dir.path().join("prob.png");
    let args = |out: &Path, t: &str| -> Vec<String> {
        ["predict", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(out), "--threshold", t]
            .map(String::from)
            .to_vec()
    };
    let run_args = |v: Vec<String>| ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    let mut a0 = args(&all, "0");
    a0.extend(["--prob".to_string(), p(&prob).to_string()]);
    run_args(a0);
    run_args(args(&none, "1"));
    let count = |path: &Path| {
        let mask = claw_unet::data::load_mask(path).unwrap();
        (mask.count(), mask.height() * mask.width())
    };
    let (fg, total) = count(&all);
    assert_eq!(fg, total);
    assert_eq!(count(&none).0, 0);
    // IHDR bit depth byte
    assert_eq!(fs::read(&prob).unwrap()[24], 16);
}

#[test]
fn predict_rejects_wrong_extent() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5, 32);
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let big = synth(&dir.path().join("big"), 1, 64);
    let out = claw(&[
        "predict",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--image",
        p(&big.join("images/synth_1_0.png")),
        "--out",
        p(&dir.path().join("m.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let o = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("step 1e-3"), "{text}");
    assert!(text.contains("PASS"));
    let bad = claw(&["gradcheck", "--break-gradients"]);
    assert_eq!(bad.status.code(), Some(3));
    assert_eq!(stderr(&bad).lines().count(), 1);
    assert!(stderr(&bad).starts_with("error:"));
}

#[test]
fn ablate_writes_table_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5, 32);
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--data", p(&data), "--out", p(&out), "--variants", "unet,claw_res_att"];
    args.extend_from_slice(TOY_TRAIN);
    ok(&args);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,miou,dice,aver_hd,best_flags");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("unet,") && lines[2].starts_with("claw_res_att,"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let counts: Vec<u64> =
        json["rows"].as_array().unwrap().iter().map(|r| r["trainable_params"].as_u64().unwrap()).collect();
    assert!(counts[0] < counts[1], "{counts:?}");
}

#[test]
fn ablate_rejects_unknown_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = claw(&["ablate", "--data", p(dir.path()), "--out", p(dir.path()), "--variants", "unet,resunet"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn usage_errors_exit_one_with_single_line() {
    for args in [
        &["train", "--set", "epochz=3"][..],
        &["train", "--set", "novalue"],
        &["frobnicate"],
        &["synth", "--count", "many"],
        &["gradcheck", "--mode", "sideways"],
    ] {
        let out = claw(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = stderr(&out);
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error:"), "{err}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# synth settings\nsynth_size = 40\ncount = 3\n").unwrap();
    let data = dir.path().join("d");
    ok(&["synth", "--config", p(&cfg), "--out", p(&data), "--count", "2"]);
    let n = fs::read_dir(data.join("images")).unwrap().count();
    assert_eq!(n, 2);
    let spec = fs::read_to_string(data.join("spec.txt")).unwrap();
    assert!(spec.contains("40"), "{spec}");
}

#[test]
fn eval_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5, 32);
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("images")).unwrap();
    fs::create_dir_all(empty.join("masks")).unwrap();
    let out = claw(&["eval", "--checkpoint", p(&run.join("model.ckpt")), "--data", p(&empty), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error:"));
}
