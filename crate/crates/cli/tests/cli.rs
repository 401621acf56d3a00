use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jury_core::jury::stub::{StubResponse, StubServer};
use jury_core::model::{ingest_records, serialize_records, SCHEMA_VERSION};
use jury_core::synth::{fixture, replay_handler, FIXTURE_AUTH_ENV, FIXTURE_SEED};

fn jury(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jury"))
        .args(args)
        .env(FIXTURE_AUTH_ENV, "test-key")
        .output()
        .expect("binary runs")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_summarises_corpus() {
    let out = jury(&["ingest", "--corpus", arg(&fixtures().join("judged_corpus.jsonl"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["cases"], 63);
    assert_eq!(summary["evaluators"].as_array().unwrap().len(), 5);
}

#[test]
fn report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("report.toml");
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let o = jury(&["--config", arg(&config), "--out-dir", arg(&out_dir), "report", "--n-resamples", "200"]);
        assert!(o.status.success(), "{}", stderr(&o));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    for sub in ["tables", "plots"] {
        let mut names: Vec<_> = fs::read_dir(a.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() >= 7, "{sub}: {names:?}");
        for n in names {
            assert_eq!(fs::read(a.join(sub).join(&n)).unwrap(), fs::read(b.join(sub).join(&n)).unwrap(), "{n:?}");
        }
    }
    assert_eq!(fs::read(a.join("metadata.json")).unwrap(), fs::read(b.join("metadata.json")).unwrap());
    let offsets = fs::read_to_string(a.join("tables/offset_rmse.csv")).unwrap();
    assert!(offsets.starts_with("evaluator,dimension,n,offset,"));
}

#[test]
fn rerun_replaces_previous_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir_all(&out_dir).unwrap();
    fs::write(out_dir.join("stale.txt"), "old").unwrap();
    let corpus = fixtures().join("judged_corpus.jsonl");
    let o = jury(&["--out-dir", arg(&out_dir), "stability", "--corpus", arg(&corpus)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out_dir.join("stale.txt").exists());
    assert!(out_dir.join("tables/stability.csv").exists());
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn calibrate_writes_maps() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("cal");
    let corpus = fixtures().join("judged_corpus.jsonl");
    let o = jury(&["--out-dir", arg(&out_dir), "--seed", "9", "calibrate", "--corpus", arg(&corpus), "--folds", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let maps: Vec<_> = fs::read_dir(out_dir.join("calibration")).unwrap().collect();
    // 3 judges x {Dx, DDx, Safety}; the ward answers carry no reasoning
    assert_eq!(maps.len(), 9);
    assert!(out_dir.join("tables/calibration_effect.md").exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "schema_version = \"1\"\nseed = 1\n").unwrap();
    let o = jury(&["--config", arg(&cfg), "report"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("corpus"), "{}", stderr(&o));

    fs::write(&cfg, "schema_version = \"1\"\ncorpus = \"x.jsonl\"\n[calibration]\nfolds = 1\n").unwrap();
    let o = jury(&["--config", arg(&cfg), "report"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("calibration.folds"), "{}", stderr(&o));
}

#[test]
fn unsupported_schema_version_is_rejected() {
    let o = jury(&["--schema-version", "9", "ingest", "--corpus", arg(&fixtures().join("corpus.jsonl"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schema version"));
}

#[test]
fn judge_reproduces_fixture_records() {
    let fx = fixture(FIXTURE_SEED);
    let server = StubServer::start(replay_handler(fx.judges.clone(), &fx.replies)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("jury.toml");
    fs::write(&spec, toml::to_string(&fx.run_spec(&server.url(""))).unwrap()).unwrap();
    let out = dir.path().join("judged.jsonl");
    let o = jury(&[
        "judge",
        "--spec",
        arg(&spec),
        "--tasks",
        arg(&fixtures().join("tasks.jsonl")),
        "--out",
        arg(&out),
        "--fail-on-error",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = ingest_records(&out, SCHEMA_VERSION).unwrap();
    assert_eq!(serialize_records(&records), serialize_records(&fx.judge_records));
    assert!(dir.path().join("judged.audit.jsonl").exists());
}

#[test]
fn judge_failures_set_exit_code() {
    let fx = fixture(FIXTURE_SEED);
    let server = StubServer::start(|_: &_| StubResponse::status(500)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("jury.toml");
    fs::write(&spec, toml::to_string(&fx.run_spec(&server.url(""))).unwrap()).unwrap();
    let tasks = dir.path().join("tasks.jsonl");
    let first: String = fs::read_to_string(fixtures().join("tasks.jsonl")).unwrap().lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(&tasks, first).unwrap();
    let out = dir.path().join("judged.jsonl");
    let o = jury(&["judge", "--spec", arg(&spec), "--tasks", arg(&tasks), "--out", arg(&out), "--fail-on-error"]);
    assert!(!o.status.success());
    let failures = fs::read_to_string(dir.path().join("judged.failures.jsonl")).unwrap();
    assert_eq!(failures.lines().count(), 2 * 3);
}
