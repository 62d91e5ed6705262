use std::path::Path;
use std::process::{Command, Output};

fn kdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("KDC_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn data_gen(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&kdc(&["data-gen", "--count", "12", "--size", "16", "--seed", "4", "--out", data.to_str().unwrap()]));
    data.to_str().unwrap().to_string()
}

fn train(data: &str, out: &Path, stage: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--stage", stage, "--dataset", data, "--epochs", "2", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kdc(&args)
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_gen(dir.path());
    assert!(Path::new(&data).join("manifest.json").exists());
    let run = dir.path().join("teacher");
    ok(&train(&data, &run, "teacher", &[]));
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(run.join("config.json").exists());
    assert!(run.join("masks/mask.json").exists());
    let best = run.join("checkpoints/teacher_best.ckpt");
    assert!(best.exists());

    let student_run = dir.path().join("at");
    let teacher_arg = ["--teacher-ckpt", best.to_str().unwrap()];
    ok(&train(&data, &student_run, "at", &teacher_arg));
    let at = student_run.join("checkpoints/at_best.ckpt");
    let kd_run = dir.path().join("kd");
    let mut kd_args = teacher_arg.to_vec();
    kd_args.extend(["--init-ckpt", at.to_str().unwrap()]);
    ok(&train(&data, &kd_run, "kd", &kd_args));

    let eval_dir = dir.path().join("eval");
    let kd = kd_run.join("checkpoints/kd_best.ckpt");
    ok(&kdc(&[
        "eval",
        "--ckpt",
        best.to_str().unwrap(),
        "--ckpt",
        kd.to_str().unwrap(),
        "--dataset",
        &data,
        "--out",
        eval_dir.to_str().unwrap(),
    ]));
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,"));
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    assert!(eval_dir.join("metrics.json").exists());
    assert!(eval_dir.join("qualitative.png").exists());
}

#[test]
fn acceleration_one_samples_every_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    ok(&kdc(&["mask-gen", "--width", "32", "--acc", "1", "--out", path.to_str().unwrap()]));
    let mask: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(mask["lines"].as_str().unwrap(), "1".repeat(32));
}

#[test]
fn repeated_runs_write_identical_losses() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_gen(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&train(&data, &a, "student", &["--seed", "3"]));
    ok(&train(&data, &b, "student", &["--seed", "3"]));
    let read = |d: &Path| std::fs::read(d.join("losses.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = data_gen(dir.path());
    let out = dir.path().join("x");

    let missing = train(&data, &out, "kd", &["--error-json"]);
    assert_eq!(missing.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["kind"], "usage");
    assert!(err["message"].as_str().unwrap().contains("teacher_checkpoint"));

    assert_eq!(train(&data, &out, "bogus", &[]).status.code(), Some(2));
    assert_eq!(kdc(&["train", "--stage", "teacher", "--no-such-flag"]).status.code(), Some(2));
    let flag = kdc(&["train", "--stage", "teacher", "--no-such-flag", "--error-json"]);
    assert_eq!(flag.status.code(), Some(2));
    assert!(serde_json::from_slice::<serde_json::Value>(&flag.stderr).is_ok());

    let absent = dir.path().join("nowhere");
    let bad_data = train(absent.to_str().unwrap(), &out, "teacher", &["--error-json"]);
    assert_eq!(bad_data.status.code(), Some(4));

    let wild = train(&data, &out, "teacher", &["--lr", "1e30"]);
    assert_eq!(wild.status.code(), Some(3), "{}", String::from_utf8_lossy(&wild.stderr));
    assert_eq!(kdc(&["mask-gen", "--width", "16", "--acc", "0.5", "--out", "m.json"]).status.code(), Some(2));
}
