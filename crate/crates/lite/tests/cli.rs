//! Exit-code and output contract of the `lite` binary.

use std::process::Command;

fn lite() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lite"))
}

#[test]
fn help_exits_zero() {
    let out = lite().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn usage_error_exits_one() {
    let out = lite().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flops_prints_json_and_exits_zero() {
    let out = lite()
        .args(["flops", "--p-ratio", "0.5", "--include-selector"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["total"].as_u64().unwrap() > 0);
    assert!(v["selector"].as_u64().unwrap() > 0);
    assert_eq!(v["p_ratio"].as_f64().unwrap(), 0.5);
}

#[test]
fn flops_rejects_bad_ratio_with_exit_one() {
    let out = lite().args(["flops", "--p-ratio", "1.5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_without_artifacts_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = lite()
        .args(["--out", dir.path().to_str().unwrap(), "sweep"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("missing artifact"), "{msg}");
}

#[test]
fn malformed_config_exits_one_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"model\": []}").unwrap();
    let out = lite()
        .args(["--config", cfg.to_str().unwrap(), "flops"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cfg.json"));
}

#[test]
fn example_config_loads_and_matches_defaults() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");
    let out = lite().args(["--config", cfg, "flops"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let with_cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let out = lite().arg("flops").output().unwrap();
    let default: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(with_cfg, default);
}
