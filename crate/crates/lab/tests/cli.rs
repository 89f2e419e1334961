use std::path::Path;
use std::process::Command;

use pclab::record::read_jsonl;

fn pclab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pclab"));
    c.env("PCLAB_WORKERS", "2");
    c
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(
        &cfg,
        "experiment = tiny\n\
         preset = mean-field\n\
         kinds = resnet\n\
         widths = 8, 16, 32\n\
         depths = 2, 4\n\
         algorithm = pc_closed_form\n\
         optimizer = gd\n\
         eta0 = 0.01\n\
         steps = 2\n\
         seeds = 0, 1\n\
         metrics = loss, rescaling\n\
         toy_samples = 6\n\
         toy_dim = 5\n",
    )
    .unwrap();
    cfg
}

#[test]
fn sweep_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let stem = dir.path().join("run");
    let out = pclab()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&stem)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let jsonl = stem.with_extension("jsonl");
    let records = read_jsonl(&jsonl).unwrap();
    // 6 grid points, 2 seeds, 3 logged steps, 3 metrics each
    assert_eq!(records.len(), 6 * 2 * 3 * 3);
    let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), records.len() + 1);

    let fit = pclab()
        .arg("fit")
        .arg("--in")
        .arg(&jsonl)
        .args(["--x", "depth/width", "--y", "rescaling_minus_one"])
        .output()
        .unwrap();
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    assert!(v["slope"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "experiment = x\nwidths = nope\n").unwrap();
    let out = pclab().args(["sweep", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn figure_list_and_unknown_id() {
    let out = pclab().args(["figure", "list"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("fig3"));
    let out = pclab().args(["figure", "fig99"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn verify_single_check() {
    let out = pclab().args(["verify", "--only", "1"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS] C1"));
    let out = pclab().args(["verify", "--only", "10"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
