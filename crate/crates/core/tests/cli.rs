use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cilseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cilseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_plan_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = cilseg(&[
        "synth",
        "--out",
        path(&data),
        "--seed",
        "4",
        "--scans-per-group",
        "12",
        "--points-per-scan",
        "40",
        "--validation-scans",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    let plan = tmp.path().join("plan");
    let out = cilseg(&["plan", "--data", path(&data), "--scenario", "disjoint", "--out", path(&plan)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for k in 0..3 {
        assert!(plan.join(format!("step{k}.json")).exists());
    }
    assert!(plan.join("plan_summary.csv").exists());

    let spec = tmp.path().join("spec.json");
    let text = format!(
        r#"{{
  "name": "inpaint",
  "scenario": "disjoint",
  "strategy": {{ "kind": "FINE_TUNE" }},
  "train": {{ "epochs_per_class": 1 }},
  "data": {{ "kind": "synthetic", "dir": {:?} }}
}}"#,
        path(&data)
    );
    fs::write(&spec, text).unwrap();
    let run = tmp.path().join("run");
    let out = cilseg(&[
        "train",
        "--spec",
        path(&spec),
        "--out",
        path(&run),
        "--strategy",
        "self_inpaint",
        "--tau1",
        "0.1",
        "--tau2",
        "0.5",
        "--seed",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = fs::read_to_string(run.join("spec.json")).unwrap();
    assert!(echo.contains("SELF_INPAINT") && echo.contains("0.1"));
    assert!(run.join("labels/step2.ip.json").exists());

    let report_path = tmp.path().join("eval.json");
    let out = cilseg(&[
        "eval",
        "--checkpoint",
        path(&run.join("step2.ckpt.json")),
        "--data",
        path(&data),
        "--scenario",
        "disjoint",
        "--step",
        "2",
        "--out",
        path(&report_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let trained: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("step2_report.json")).unwrap()).unwrap();
    assert_eq!(eval["confusion"], trained["confusion"]);
    assert_eq!(eval["miou"], trained["miou"]);

    let tables = tmp.path().join("tables");
    let out = cilseg(&["report", path(&run), "--out", path(&tables)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("run") && stdout.contains("mIoU_0,1,2"));
    assert!(tables.join("summary.csv").exists() && tables.join("per_class.md").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // missing dataset directory
    let out = cilseg(&[
        "plan",
        "--data",
        path(&tmp.path().join("nope")),
        "--scenario",
        "sequential",
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // malformed spec
    let spec = tmp.path().join("bad.json");
    fs::write(&spec, "{ \"name\": 1 }").unwrap();
    let out = cilseg(&["train", "--spec", path(&spec), "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    // inpainting needs background labels
    let data = tmp.path().join("data");
    assert!(cilseg(&["synth", "--out", path(&data), "--scans-per-group", "3", "--points-per-scan", "20"])
        .status
        .success());
    let text = format!(
        r#"{{ "name": "x", "scenario": "sequential", "strategy": {{ "kind": "FINE_TUNE" }},
            "data": {{ "kind": "synthetic", "dir": {:?} }} }}"#,
        path(&data)
    );
    fs::write(&spec, text).unwrap();
    let out = cilseg(&["train", "--spec", path(&spec), "--out", path(tmp.path()), "--strategy", "self_inpaint"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cilseg(&["train", "--spec", path(&spec), "--out", path(tmp.path()), "--lambda", "2"]);
    assert_eq!(out.status.code(), Some(2));

    // unknown subcommand is a usage error
    assert_eq!(cilseg(&["frobnicate"]).status.code(), Some(2));
}
