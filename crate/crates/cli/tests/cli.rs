use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgan"))
        .args(args)
        .env_remove("MFGAN_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--experiment", "syn2", "--outer-steps", "6", "--inner-steps", "1", "--batch-size", "16",
    "--eval-every", "3", "--checkpoint-every", "3", "--eval-samples", "50", "--gen-hidden", "8,8",
    "--disc-hidden", "8", "--quiet",
];

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    args.extend_from_slice(extra);
    mfgan(&args)
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = train_small(&out, &["--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "gen.ckpt", "disc.ckpt", "samples_t0.csv", "samples_t1.csv", "effective_config"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let samples = fs::read_to_string(out.join("samples_t1.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("x1,x2"));
    assert_eq!(samples.lines().count(), 51);
    assert!(out.join("checkpoints/step_000006/state.bin").exists());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_small(&a, &["--seed", "3"]).status.success());
    assert!(train_small(&b, &["--seed", "3"]).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_small(&a, &["--seed", "5"]).status.success());
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--out", b.to_str().unwrap()]);
    let o = Command::new(env!("CARGO_BIN_EXE_mfgan"))
        .args(&args)
        .env("MFGAN_SEED", "5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("gen.ckpt")).unwrap(), fs::read(b.join("gen.ckpt")).unwrap());
}

#[test]
fn effective_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(train_small(&a, &["--seed", "9", "--lr-gen", "0.001"]).status.success());
    let b = dir.path().join("b");
    let cfg = a.join("effective_config");
    let o = mfgan(&["train", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("gen.ckpt")).unwrap(), fs::read(b.join("gen.ckpt")).unwrap());
}

#[test]
fn resume_flag_continues_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_small(&a, &["--seed", "4"]).status.success());
    assert!(train_small(&b, &["--seed", "4", "--outer-steps", "3"]).status.success());
    let ck = b.join("checkpoints/step_000003");
    let o = train_small(&b, &["--seed", "4", "--resume", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("gen.ckpt")).unwrap(), fs::read(b.join("gen.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn mnist_without_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let o = mfgan(&["train", "--experiment", "mnist", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:missing_dataset:"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "experiment = syn2\nlearning_rate = 0.1\n").unwrap();
    let o = mfgan(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error:config:"), "{err}");
    assert!(err.contains("learning_rate") && err.contains("outer_steps"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn bad_flag_is_a_usage_error() {
    let o = mfgan(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:usage:"));
}

#[test]
fn sample_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert!(train_small(&run, &[]).status.success());
    let ckpt = run.join("gen.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let empty = dir.path().join("empty.csv");
    let o = mfgan(&["sample", "--checkpoint", ckpt, "--count", "0", "--out", empty.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&empty).unwrap(), "x1,x2\n");

    let pts = dir.path().join("pts.csv");
    let o = mfgan(&["sample", "--checkpoint", ckpt, "--t", "0.5", "--count", "20", "--out", pts.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&pts).unwrap().lines().count(), 21);

    let o = mfgan(&["sample", "--checkpoint", ckpt, "--t", "1.2", "--out", pts.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:precondition:"), "{}", stderr(&o));

    let disc = run.join("disc.ckpt");
    let o = mfgan(&["sample", "--checkpoint", disc.to_str().unwrap(), "--out", pts.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:checkpoint:"), "{}", stderr(&o));

    // Architecture that does not match the checkpoint.
    let o = mfgan(&["sample", "--checkpoint", ckpt, "--experiment", "syn3", "--out", pts.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:checkpoint:"), "{}", stderr(&o));
}

#[test]
fn eval_prints_moment_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    assert!(train_small(&run, &[]).status.success());
    let ckpt = run.join("gen.ckpt");
    let o = mfgan(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--experiment", "syn2",
        "--gen-hidden", "8,8", "--disc-hidden", "8", "--samples", "500",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mean_err,cov_err,w2"));
    let vals: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    assert!(vals.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn verify_passes_and_catches_corruption() {
    let o = mfgan(&["verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    for suite in ["gradcheck", "legendre", "adam", "w2"] {
        assert!(table.contains(suite), "{table}");
    }

    let o = mfgan(&["verify", "--suite", "legendre", "--corrupt-exponent", "0.05"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error:verify:") && err.contains("legendre"), "{err}");
}
