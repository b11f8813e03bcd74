//! End-to-end checks of the binary: exit codes, artifact layout, and the
//! resolved-config record.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn laso(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laso"))
        .args(args)
        .output()
        .expect("spawning the binary")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn malformed_config_is_a_clean_failure() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out = laso(&[
        "gen",
        "--out",
        dir.path().join("x.lbnk").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("parsing config"), "{}", stderr(&out));
}

#[test]
fn missing_input_file_is_a_clean_failure() {
    let dir = tempdir().unwrap();
    let out = laso(&[
        "train",
        "--bank",
        dir.path().join("absent.lbnk").to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent.lbnk"), "{}", stderr(&out));
}

#[test]
fn bad_expression_is_a_clean_failure() {
    let dir = tempdir().unwrap();
    let bank = dir.path().join("bank.lbnk");
    gen_small(&bank);
    let out = laso(&["compose", "frob(1,2)", "--bank", bank.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("frob"), "{}", stderr(&out));
}

fn gen_small(bank: &Path) {
    let out = laso(&[
        "gen",
        "--out",
        bank.to_str().unwrap(),
        "--d",
        "8",
        "--l",
        "4",
        "--seen-count",
        "3",
        "--n",
        "80",
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn gen_writes_bank_and_resolved_config() {
    let dir = tempdir().unwrap();
    let bank = dir.path().join("bank.lbnk");
    gen_small(&bank);
    assert!(bank.is_file());

    let cfg_text = std::fs::read_to_string(dir.path().join("bank.lbnk.config.json")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&cfg_text).unwrap();
    assert_eq!(cfg["command"], "gen");
    assert_eq!(cfg["config"]["d"], 8);
    assert_eq!(cfg["config"]["seed"], 5);
}

#[test]
fn flag_overrides_beat_config_file() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("gen.json");
    std::fs::write(&cfg, r#"{"d": 8, "l": 4, "seen_count": 3, "n": 80, "seed": 5}"#).unwrap();
    let bank = dir.path().join("bank.lbnk");
    let out = laso(&[
        "gen",
        "--out",
        bank.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let text = std::fs::read_to_string(dir.path().join("bank.lbnk.config.json")).unwrap();
    let resolved: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(resolved["config"]["seed"], 11);
    assert_eq!(resolved["config"]["d"], 8);
}

#[test]
fn gradcheck_smoke_passes() {
    let out = laso(&["gradcheck", "--instances", "1", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("all passed"), "{text}");
}
