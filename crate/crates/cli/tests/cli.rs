use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn srn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srn")).args(args).output().expect("running srn")
}

fn ok_json(args: &[&str]) -> Value {
    let out = srn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn ok_json_owned(args: &[String]) -> Value {
    ok_json(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes_follow_the_contract() {
    assert_eq!(srn(&["--help"]).status.code(), Some(0));
    assert_eq!(srn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(srn(&["gen", "--out", "x", "--image-size", "48"]).status.code(), Some(1));
    assert_eq!(srn(&["train", "--model", "transformer", "--data", "d", "--checkpoint", "c"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = srn(&["eval", "--checkpoint", p(&missing), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gen_is_reproducible_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let v = ok_json(&["gen", "--out", p(&a), "--count", "30", "--image-size", "32", "--seed", "9", "--json"]);
    assert_eq!(v["count"], 30);
    assert_eq!(v["image_size"], 32);
    srn(&["gen", "--out", p(&b), "--count", "30", "--image-size", "32", "--seed", "9"]);
    assert_eq!(fs::read(a.join("images.bin")).unwrap(), fs::read(b.join("images.bin")).unwrap());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let bad = srn(&["gen", "--out", p(&a), "--min-circles", "4", "--max-circles", "2"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_then_inspect_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, ckpt) = (d.join("data"), d.join("m.ckpt"));
    let small = ["--image-size", "32", "--set-size", "4", "--elem-dim", "8", "--seed", "3"];
    let with = |rest: &[&str]| -> Vec<String> {
        rest.iter().chain(&small).chain(&["--json"]).map(|s| s.to_string()).collect()
    };

    ok_json_owned(&with(&["gen", "--out", p(&data), "--count", "40"]));
    let v = ok_json_owned(&with(&[
        "train", "--data", p(&data), "--checkpoint", p(&ckpt), "--model", "srn", "--epochs", "2",
        "--batch-size", "8", "--width-divisor", "8", "--inner-steps", "2",
    ]));
    assert_eq!(v["epochs"], 2);
    assert!(v["final_val_loss"].as_f64().unwrap().is_finite());
    let log = fs::read_to_string(d.join("m.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let e: Value = serde_json::from_str(line).unwrap();
        assert!(e["train_loss"].as_f64().unwrap() >= 0.0);
    }

    let report = d.join("report.json");
    let csv_path = d.join("images.csv");
    let v = ok_json_owned(&with(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "all", "--report", p(&report), "--csv",
        p(&csv_path),
    ]));
    assert!(v["mse"].as_f64().unwrap() >= 0.0);
    let full: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["images"].as_array().unwrap().len(), 40);
    assert_eq!(fs::read_to_string(&csv_path).unwrap().lines().count(), 41);

    let panels = d.join("panels");
    let v = ok_json_owned(&with(&["decompose", "--checkpoint", p(&ckpt), "--data", p(&data), "--index", "0", "--out", p(&panels)]));
    assert_eq!(v["activity"].as_array().unwrap().len(), 4);
    for f in ["input.ppm", "recon.ppm", "grid.ppm", "slot_00.ppm", "slot_03.ppm"] {
        assert!(fs::read(panels.join(f)).unwrap().starts_with(b"P6\n"), "{f}");
    }
    let oob = srn(&["decompose", "--checkpoint", p(&ckpt), "--data", p(&data), "--index", "40", "--out", p(&panels)]);
    assert_eq!(oob.status.code(), Some(2));

    let trace = d.join("trace.csv");
    let v = ok_json_owned(&with(&["interpolate", "--checkpoint", p(&ckpt), "--frames", "5", "--out", p(&trace)]));
    assert_eq!(v["frames"], 5);
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 6);

    let latents = d.join("latents.csv");
    ok_json_owned(&with(&["export-latents", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&latents)]));
    let text = fs::read_to_string(&latents).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), 7 + 8);
}

#[test]
fn gradcheck_reports_every_check_passing() {
    let v = ok_json(&["gradcheck", "--json"]);
    assert_eq!(v["passed"], true);
    let checks = v["checks"].as_array().unwrap();
    assert!(checks.len() >= 25);
    assert!(checks.iter().all(|c| c["passed"] == true && c["coordinates"].as_u64().unwrap() > 0));
}
