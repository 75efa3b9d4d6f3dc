mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

use common::*;

fn twin(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_twin"));
    for a in args {
        cmd.arg(a);
    }
    cmd.env("RUST_LOG", "warn").output().unwrap()
}

fn replay(registry: &Path, journal: &Path, out: &Path) -> Output {
    twin(&[&"replay", &"--registry", &registry, &"--journal", &journal, &"--out", &out])
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_fixtures() {
    for name in ["prostate", "glioma", "survival_conflict", "survival_ok"] {
        let o = twin(&[&"validate", &fixture(&format!("{name}.registry.json"))]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stdout(&o));
        assert!(stdout(&o).starts_with("OK"));
    }
}

#[test]
fn validate_lists_every_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let doc = json!({
        "attributes": [{"id": "risk", "value_kind": "probability", "fusion": {"mode": "weighted_average"}}],
        "models": [
            {"id": "risk_calc", "kind": "logistic", "inputs": [{"attr": "psa_density"}], "outputs": ["risk"]},
            {"id": "other", "kind": "logistic", "inputs": [{"attr": "volume"}], "outputs": ["risk"]}
        ]
    });
    std::fs::write(&path, doc.to_string()).unwrap();
    let o = twin(&[&"validate", &path]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    assert!(out.contains("psa_density") && out.contains("volume"), "{out}");
    assert!(out.lines().filter(|l| l.starts_with("error:")).count() >= 2, "{out}");
}

#[test]
fn replay_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = replay(&fixture("prostate.registry.json"), &fixture("prostate.journal.json"), &dir.path().join("p"));
    assert_eq!(o.status.code(), Some(0));
    let snap: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("p/snapshot.json")).unwrap()).unwrap();
    let high_gs = snap["nodes"].as_array().unwrap().iter().find(|n| n["id"] == "high_gs").unwrap();
    let models: Vec<&str> =
        high_gs["provenance"].as_array().unwrap().iter().filter_map(|s| s.as_str()?.strip_prefix("model:")).collect();
    assert_eq!(models.len(), 3);
    let reports: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("p/reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 6);

    let o = replay(&fixture("survival_conflict.registry.json"), &fixture("survival.journal.json"), &dir.path().join("c"));
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("conflict"));

    // Journal naming an attribute the registry does not declare.
    let o = replay(&fixture("prostate.registry.json"), &fixture("glioma.journal.json"), &dir.path().join("x"));
    assert_eq!(o.status.code(), Some(2));

    let o = replay(&dir.path().join("missing.json"), &fixture("prostate.journal.json"), &dir.path().join("y"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn empty_journal_gives_unknown_twin() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("empty.json");
    std::fs::write(&journal, json!({"patient": "nobody", "events": []}).to_string()).unwrap();
    let o = replay(&fixture("prostate.registry.json"), &journal, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0));
    let snap: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/snapshot.json")).unwrap()).unwrap();
    let attrs: Vec<_> = snap["nodes"].as_array().unwrap().iter().filter(|n| n["kind"] == "attribute").collect();
    assert_eq!(attrs.len(), 9);
    assert!(attrs.iter().all(|n| n["status"] == "unknown" && n.get("value").is_none()));
}

#[test]
fn retrain_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(replay(&fixture("prostate.registry.json"), &fixture("prostate.journal.json"), &out).status.code(), Some(0));
    let store = out.join("store");
    let o = twin(&[&"retrain", &"--store", &store]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("registry version 2"));
    assert!(store.join("registry/v2.json").is_file());

    // Nothing labeled in a fresh store.
    let fresh = dir.path().join("fresh");
    std::fs::create_dir_all(&fresh).unwrap();
    let o = twin(&[&"retrain", &"--store", &fresh]);
    assert_eq!(o.status.code(), Some(1));
}
