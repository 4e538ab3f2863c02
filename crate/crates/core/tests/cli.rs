use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn disgorge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disgorge"))
        .current_dir(dir)
        .env_remove("DISGORGE_WORKSPACE")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = disgorge(dir, args);
    assert!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn trained(dir: &Path) {
    ok(dir, &["synth", "--output", "data.csv", "--num-samples", "200", "--seed", "4"]);
    ok(dir, &["-w", "ws", "ingest", "--input", "data.csv"]);
    ok(dir, &["-w", "ws", "shard", "--strategy", "uniform", "--num-shards", "4", "--seed", "42"]);
    ok(dir, &["-w", "ws", "train", "--kind", "logistic", "--epochs", "5", "--seed", "1"]);
}

#[test]
fn disgorge_then_certify() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let out = ok(dir, &["-w", "ws", "disgorge", "--scope", "sample:s7", "--mode", "exact-retrain", "--format", "json"]);
    let cert: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(cert["request_id"], "req-1");
    assert_eq!(cert["kind"], "deterministic");
    assert!(dir.join("ws/certificates/req-1.json").exists());
    let log = fs::read_to_string(dir.join("ws/audit.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().nth(1).unwrap().contains("\"request_id\":\"req-1\""));
    ok(dir, &["-w", "ws", "certify", "req-1", "--verify"]);
    ok(dir, &["-w", "ws", "certify", "--certificate", "ws/certificates/req-1.json", "--verify"]);
    let shown = ok(dir, &["-w", "ws", "certify", "req-1"]);
    assert_eq!(shown, fs::read_to_string(dir.join("ws/certificates/req-1.json")).unwrap());
    assert!(ok(dir, &["-w", "ws", "audit", "--verify"]).contains("audit log verified"));
}

#[test]
fn tampering_exits_with_verification_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    ok(dir, &["-w", "ws", "disgorge", "--scope", "sample:s3", "--mode", "exact-retrain"]);
    let path = dir.join("ws/certificates/req-1.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"s3\"", "\"s4\"");
    fs::write(&path, text).unwrap();
    let out = disgorge(dir, &["-w", "ws", "certify", "req-1", "--verify"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("EVIDENCE_MISMATCH"));

    let log = dir.join("ws/audit.log");
    let mut bytes = fs::read(&log).unwrap();
    let i = bytes.len() / 2;
    bytes[i] ^= 0x01;
    fs::write(&log, bytes).unwrap();
    assert_eq!(code(&disgorge(dir, &["-w", "ws", "audit", "--verify"])), 3);
}

#[test]
fn account_matches_reference_value() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(tmp.path(), &["account", "--sigma", "1", "--steps", "1", "--delta", "1e-5"]);
    assert!(text.contains("epsilon=5.298"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&ok(
        tmp.path(),
        &["account", "--sigma", "1", "--steps", "1", "--delta", "1e-5", "--group-size", "20", "--format", "json"],
    ))
    .unwrap();
    assert!((json["epsilon"].as_f64().unwrap() - 5.298).abs() < 1e-3);
    assert_eq!(json["group"]["guarantee"]["status"], "vacuous");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        &["shard", "--strategy", "uniform"][..],
        &["disgorge", "--scope", "nonsense", "--mode", "instant"],
        &["disgorge", "--scope", "sample:s1", "--mode", "teleport"],
        &["certify"],
        &["frobnicate"],
        &["synth", "--anisotropy", "0.5"],
    ] {
        let out = disgorge(dir, args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn operational_errors_exit_1_with_named_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = disgorge(dir, &["-w", "missing", "shard", "--num-shards", "2"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no workspace"));

    trained(dir);
    let out = disgorge(dir, &["-w", "ws", "disgorge", "--scope", "sample:s1", "--mode", "instant"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot serve"));
    let out = disgorge(dir, &["-w", "ws", "disgorge", "--scope", "sample:nobody", "--mode", "exact-retrain"]);
    assert_eq!(code(&out), 1);

    ok(dir, &["-w", "ws", "disgorge", "--scope", "sample:s1", "--mode", "exact-retrain", "--request-id", "a"]);
    let out = disgorge(dir, &["-w", "ws", "disgorge", "--scope", "sample:s2", "--mode", "exact-retrain", "--request-id", "a"]);
    assert_eq!(code(&out), 1);
    let out = disgorge(dir, &["-w", "ws", "shard", "--num-shards", "2"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
}

#[test]
fn locked_workspace_exits_4_but_reads_proceed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    fs::write(dir.join("ws/.lock"), "").unwrap();
    let out = disgorge(dir, &["-w", "ws", "disgorge", "--scope", "sample:s1", "--mode", "exact-retrain"]);
    assert_eq!(code(&out), 4);
    ok(dir, &["-w", "ws", "evaluate", "--input", "data.csv"]);
    ok(dir, &["-w", "ws", "audit"]);
}

#[test]
fn workspace_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--output", "data.csv", "--num-samples", "40"]);
    let out = Command::new(env!("CARGO_BIN_EXE_disgorge"))
        .current_dir(dir)
        .env("DISGORGE_WORKSPACE", dir.join("envws"))
        .args(["ingest", "--input", "data.csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("envws/workspace.json").exists());
}

#[test]
fn shard_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth", "--output", "data.csv", "--num-samples", "100"]);
    ok(dir, &["-w", "ws", "ingest", "--input", "data.csv"]);
    let args = ["-w", "ws", "shard", "--strategy", "uniform", "--num-shards", "5", "--seed", "42"];
    ok(dir, &args);
    let first = (fs::read(dir.join("ws/plan.csv")).unwrap(), fs::read(dir.join("ws/plan.csv.meta.json")).unwrap());
    ok(dir, &args);
    let second = (fs::read(dir.join("ws/plan.csv")).unwrap(), fs::read(dir.join("ws/plan.csv.meta.json")).unwrap());
    assert_eq!(first, second);
    let csv = ok(dir, &["-w", "ws", "--format", "csv", "shard", "--num-shards", "5", "--seed", "42"]);
    assert_eq!(csv.as_bytes(), &first.0[..]);
}

#[test]
fn filter_predict_pareto_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    fs::write(dir.join("cand.csv"), "sample_id,f0,f1,f2,f3,f4,f5,f6,f7\nc1,100,100,100,100,100,100,100,100\n").unwrap();
    let head: String = fs::read_to_string(dir.join("data.csv")).unwrap().lines().take(2).collect::<Vec<_>>().join("\n");
    fs::write(dir.join("dup.csv"), head + "\n").unwrap();
    let report = ok(dir, &["-w", "ws", "filter", "--candidates", "cand.csv", "--epsilon", "1"]);
    assert!(report.starts_with("candidate_id,verdict,dmin,nearest_id\nc1,ACCEPT,"), "{report}");
    assert!(report.contains("# summary: candidates=1 accepted=1 rejected=0"));
    let report = ok(dir, &["-w", "ws", "filter", "--candidates", "dup.csv", "--epsilon", "1", "--distance", "perceptual"]);
    assert!(report.contains(",REJECT,0,"), "{report}");
    ok(dir, &["-w", "ws/models", "filter", "--candidates", "dup.csv", "--protected", "data.csv", "--epsilon", "1", "--distance", "conceptual", "--psi-model", "ws/models/shard-000.json"]);

    let pred = ok(dir, &["-w", "ws", "predict", "--input", "cand.csv"]);
    assert!(pred.starts_with("sample_id,label,p0,p1,p2,p3,contributors\nc1,"));
    let sweep = ok(dir, &["pareto", "--input", "data.csv", "--seeds", "0", "--shard-counts", "1,2", "--kinds", "ncm,ridge", "--plot-output", "plot.dat"]);
    assert!(sweep.starts_with("label,S,strategy,kind,norm_cost,test_error,err_std,latency_members,on_frontier\n"));
    assert_eq!(sweep.lines().count(), 5);
    assert!(fs::read_to_string(dir.join("plot.dat")).unwrap().starts_with("# norm_cost test_error\n"));
}

#[test]
fn dp_train_and_attest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let out = ok(dir, &["-w", "ws", "dp-train", "--sigma", "4", "--steps", "16", "--seed", "2", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["privacy"]["steps_consumed"], 16);
    let cert = ok(dir, &["-w", "ws", "disgorge", "--scope", "sample:s1,s2", "--mode", "dp-attestation", "--format", "json"]);
    let cert: serde_json::Value = serde_json::from_str(&cert).unwrap();
    assert_eq!(cert["kind"], "probabilistic");
    assert_eq!(cert["evidence"]["dp"]["group_size"], 2);
    ok(dir, &["-w", "ws", "certify", "req-1", "--verify"]);
}
