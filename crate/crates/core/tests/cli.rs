//! End-to-end runs of the `dbrd` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dbrd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbrd"))
        .args(args)
        .current_dir(dir)
        .env_remove("DBRD_EMBED_ENDPOINT")
        .env_remove("DBRD_CLASSIFY_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dbrd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).expect("stderr is one JSON object")
}

fn prepare(dir: &Path) {
    ok(dir, &["synth", "--clusters", "60", "--mean-size", "3", "--seed", "7", "--out", "corpus.jsonl"]);
    ok(dir, &["cluster", "--corpus", "corpus.jsonl", "--out", "clusters.json"]);
    ok(dir, &["split", "--clusters", "clusters.json", "--seed", "1", "--out", "manifest.json"]);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(dir.path(), &["synth", "--clusters", "50", "--mean-size", "3", "--seed", "7"]);
    let b = ok(dir.path(), &["synth", "--clusters", "50", "--mean-size", "3", "--seed", "7"]);
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    let c = ok(dir.path(), &["synth", "--clusters", "50", "--mean-size", "3", "--seed", "8"]);
    assert_ne!(a.stdout, c.stdout);
    for line in a.stdout.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        let v: Value = serde_json::from_slice(line).unwrap();
        assert!(v["bug_id"].is_string() && v["title"].is_string());
    }
}

#[test]
fn missing_manifest_exits_2_and_names_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dbrd(dir.path(), &["run-cascade", "--manifest", "nope.json", "--seed", "1", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["flag"], "--manifest");
    assert!(err["error"]["message"].as_str().unwrap().contains("--manifest"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dbrd(dir.path(), &["synth", "--seed", "1", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let out = dbrd(dir.path(), &["split", "--clusters", "c.json", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("--seed"));

    let out = dbrd(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(dbrd(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_corpus_is_a_schema_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        "{\"bug_id\":\"1\",\"title\":\"a\",\"description\":\"b\"}\n{\"title\":\"no id\"}\n",
    )
    .unwrap();
    let out = dbrd(dir.path(), &["ingest", "--corpus", "bad.jsonl", "--out", "c.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "schema");
    assert!(err["error"]["message"].as_str().unwrap().contains("line 2"));
}

#[test]
fn csv_ingest_with_custom_columns() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.csv"),
        "id,summary,body,master\n1,\"Crash, on save\",details here,\n2,Crash saving,\"more, details\",1\n",
    )
    .unwrap();
    let out = ok(
        dir.path(),
        &[
            "ingest", "--corpus", "c.csv", "--format", "csv", "--id-column", "id", "--title-column", "summary",
            "--description-column", "body", "--dup-column", "master", "--out", "c.jsonl",
        ],
    );
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["stats"]["dup_pairs"], 1);
    assert!(dir.path().join("c.jsonl.config.json").exists());
}

#[test]
fn full_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(d, &["train-projection", "--manifest", "manifest.json", "--seed", "1", "--epochs", "2", "--dim-out", "32", "--out", "proj.json"]);
    ok(d, &["train-classifier", "--manifest", "manifest.json", "--seed", "1", "--epochs", "50", "--out", "clf.json"]);
    ok(d, &["eval-retrieval", "--manifest", "manifest.json", "--out", "r.csv"]);
    ok(d, &["eval-retrieval", "--manifest", "manifest.json", "--backend", "projection", "--projection", "proj.json", "--out", "rp.csv"]);
    ok(d, &[
        "eval-classification", "--manifest", "manifest.json", "--classifier-model", "clf.json",
        "--classifiers", "logistic,similarity,oracle", "--out", "c.csv",
    ]);
    let retrieval = fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(retrieval.starts_with("backend,split,k,recall,precision,queries\n"));
    assert_eq!(retrieval.lines().count(), 7);
    let classification = fs::read_to_string(d.join("c.csv")).unwrap();
    assert!(classification.lines().any(|l| l.starts_with("oracle,test,1,1,1,1,")));

    for method in ["retrieval", "classification", "cascade"] {
        let out = format!("s_{method}.json");
        ok(d, &[
            "run-cascade", "--manifest", "manifest.json", "--method", method, "--k", "100", "--seed", "3",
            "--classifier-model", "clf.json", "--out", &out,
        ]);
        let s: Value = serde_json::from_slice(&fs::read(d.join(&out)).unwrap()).unwrap();
        assert_eq!(s["ledger"], s["predicted"], "{method}");
        assert!(s["config"]["seed"].is_u64() && s["config_checksum"].is_string());
        assert!(s["timing"]["phases_ms"].is_object());
    }
    ok(d, &["report", "--inputs", "s_retrieval.json", "s_classification.json", "s_cascade.json", "--out", "report.csv"]);
    let mut rdr = csv::Reader::from_path(d.join("report.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["method", "k", "precision", "recall", "f1", "accuracy", "wall_clock_ms", "embed_calls", "pair_classifications"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3 * 7);
    for r in rows.iter().filter(|r| &r[0] == "retrieval") {
        assert_eq!(&r[8], "0");
    }
    let class: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[0] == "classification").collect();
    for r in &class {
        assert_eq!((&r[2], &r[3], &r[5]), (&class[0][2], &class[0][3], &class[0][5]));
    }
    assert!(d.join("report.csv.config.json").exists());

    // a run with a different seed cannot be merged
    ok(d, &["run-cascade", "--manifest", "manifest.json", "--method", "retrieval", "--k", "10", "--seed", "4", "--out", "other.json"]);
    let out = dbrd(d, &["report", "--inputs", "s_cascade.json", "other.json", "--out", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("conflict"));
}

#[test]
fn all_vs_all_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(d, &[
        "run-cascade", "--manifest", "manifest.json", "--mode", "all-vs-all", "--k", "3", "--seed", "1",
        "--classifier", "oracle", "--out", "ava.json",
    ]);
    let s: Value = serde_json::from_slice(&fs::read(d.join("ava.json")).unwrap()).unwrap();
    let m = s["database"].as_u64().unwrap();
    assert_eq!(s["ledger"]["embed_calls"].as_u64().unwrap(), m);
    assert_eq!(s["ledger"]["pair_classifications"].as_u64().unwrap(), 3 * m);
    for row in s["metrics"].as_array().unwrap() {
        assert_eq!(row["confusion"]["fp"], 0);
    }
}

#[test]
fn service_backend_needs_an_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let out = dbrd(d, &["eval-retrieval", "--manifest", "manifest.json", "--backend", "service", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["flag"], "--embed-endpoint");

    // the environment supplies the endpoint; nothing listens there
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let out = Command::new(env!("CARGO_BIN_EXE_dbrd"))
        .args(["eval-retrieval", "--manifest", "manifest.json", "--backend", "service", "--retries", "0", "--out", "r.csv"])
        .current_dir(d)
        .env("DBRD_EMBED_ENDPOINT", &url)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "service");
}
