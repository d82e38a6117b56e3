use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn punet(args: &[&str], out: &Path, seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_punet"));
    cmd.args(args).arg("--out").arg(out).env_remove("PUNET_SEED");
    if let Some(s) = seed_env {
        cmd.env("PUNET_SEED", s);
    }
    cmd.output().expect("spawn punet")
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn small_spec(dir: &Path) -> std::path::PathBuf {
    let mut spec = punet_spec();
    spec["subjects"] = 6.into();
    spec["slices_per_subject"] = 2.into();
    let p = dir.join("spec.json");
    std::fs::write(&p, spec.to_string()).unwrap();
    p
}

fn punet_spec() -> Value {
    let tmp = tempfile::tempdir().unwrap();
    let out = punet(&["generate-data"], tmp.path(), None);
    assert!(out.status.success());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("meta.json")).unwrap()).unwrap();
    meta["spec"].clone()
}

#[test]
fn gradcheck_single_op_succeeds_and_records_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = punet(&["gradcheck", "--op", "focal_loss"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = run_json(tmp.path());
    assert_eq!(run["command"], "gradcheck");
    assert_eq!(run["status"], "ok");
    assert!(run["config_hash"].is_string());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 1);
}

#[test]
fn unknown_op_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = punet(&["gradcheck", "--op", "nope"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(2));
    let run = run_json(tmp.path());
    assert_eq!(run["exit_code"], 2);
    assert!(run["error"].as_str().unwrap().contains("nope"));
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = punet(&["--config", cfg.to_str().unwrap(), "gradcheck", "--op", "add"], tmp.path(), None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_precedence_env_over_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    punet(&["--seed", "5", "gradcheck", "--op", "add"], &a, None);
    punet(&["--seed", "5", "gradcheck", "--op", "add"], &b, Some("11"));
    assert_eq!(run_json(&a)["seeds"]["config"], 5);
    assert_eq!(run_json(&b)["seeds"]["config"], 11);
    assert_ne!(run_json(&a)["config_hash"], run_json(&b)["config_hash"]);
}

#[test]
fn invalid_scheme_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let data = tmp.path().join("data");
    assert!(punet(&["generate-data", "--spec", spec.to_str().unwrap()], &data, None).status.success());
    let out = punet(
        &["ablate", "--data", data.to_str().unwrap(), "--checkpoint", "missing", "--schemes", "prompt,bogus"],
        &tmp.path().join("abl"),
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn pretrain_adapt_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let data = tmp.path().join("data");
    let p1 = tmp.path().join("p1");
    let p2 = tmp.path().join("p2");
    let ev = tmp.path().join("eval");
    let ok = |o: Output| assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    ok(punet(&["generate-data", "--spec", spec.to_str().unwrap()], &data, None));
    ok(punet(&["pretrain", "--data", data.to_str().unwrap(), "--steps", "2"], &p1, None));
    assert!(p1.join("checkpoint/manifest.json").exists());
    assert!(p1.join("losses.csv").exists());
    let ckpt = p1.join("checkpoint");
    ok(punet(
        &["adapt", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--scheme", "prompt", "--steps", "2"],
        &p2,
        None,
    ));
    assert!(p2.join("prompts/manifest.json").exists());
    // Prompts installed onto the P1 checkpoint reproduce the adapted model's predictions.
    let eval = |checkpoint: &Path, prompts: Option<&Path>, out: &Path| {
        let mut args = vec!["eval", "--data", data.to_str().unwrap(), "--checkpoint", checkpoint.to_str().unwrap(), "--scheme", "prompt"];
        if let Some(p) = prompts {
            args.extend(["--prompts", p.to_str().unwrap()]);
        }
        ok(punet(&args, out, None));
        std::fs::read_to_string(out.join("report.csv")).unwrap()
    };
    let full = eval(&p2.join("checkpoint"), None, &ev.join("full"));
    let installed = eval(&ckpt, Some(&p2.join("prompts")), &ev.join("installed"));
    assert_eq!(full, installed);
    let header = full.lines().next().unwrap();
    assert!(header.contains("subject") && header.contains("class"));
    // one row per subject × class
    let rows = full.lines().count() - 1;
    assert_eq!(rows % 3, 0);
    assert!(rows > 0);
}

#[test]
fn mismatched_architecture_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let data = tmp.path().join("data");
    assert!(punet(&["generate-data", "--spec", spec.to_str().unwrap()], &data, None).status.success());
    let p1 = tmp.path().join("p1");
    assert!(punet(&["pretrain", "--data", data.to_str().unwrap(), "--variant", "random"], &p1, None).status.success());
    let mut cfg: Value = run_json(&p1)["config"].clone();
    cfg["heads"] = 2.into();
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = punet(
        &[
            "--config",
            cfg_path.to_str().unwrap(),
            "adapt",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            p1.join("checkpoint").to_str().unwrap(),
            "--steps",
            "1",
        ],
        &tmp.path().join("p2"),
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("heads"));
}
