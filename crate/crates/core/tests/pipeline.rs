use std::path::Path;

use jury_core::jury::stub::StubServer;
use jury_core::report::{run_pipeline, write_bundle, ReportConfig, TableFormat};
use jury_core::synth::{fixture, replay_handler, FIXTURE_AUTH_ENV, FIXTURE_SEED};
use jury_core::EvaluatorId;

fn bundled_config() -> ReportConfig {
    ReportConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/report.toml")).unwrap()
}

#[test]
fn bundled_files_match_generator() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    for (name, text) in fixture(FIXTURE_SEED).files() {
        let on_disk = std::fs::read_to_string(dir.join(name)).unwrap();
        assert!(on_disk == text, "fixtures/{name} is stale; rerun the write_fixture example");
    }
}

#[test]
fn bundled_report_has_every_table() {
    let mut cfg = bundled_config();
    cfg.bootstrap.n_resamples = 200;
    let bundle = run_pipeline(&cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    write_bundle(&bundle, &out.path().join("report"), &cfg.report.formats).unwrap();
    print!("{}", std::fs::read_to_string(out.path().join("report/report.md")).unwrap());
    for name in [
        "offset_rmse",
        "agreement",
        "inter_score_correlations",
        "severe_errors",
        "severe_exceedance",
        "severe_overlap",
        "stability",
        "ward_disagreement",
        "ward_disagreement_fit",
        "calibration_effect",
        "win_rates",
        "ranking",
        "ranking_agreement",
        "same_provider_bias",
    ] {
        assert!(bundle.table(name).is_some(), "missing {name}; omitted: {:?}", bundle.metadata.omitted);
        assert!(out.path().join(format!("report/tables/{name}.csv")).exists());
    }
    // 3 judges + jury + re-score panel (no reasoning scores)
    assert_eq!(bundle.table("offset_rmse").unwrap().rows.len(), 4 * 4 + 3);
}

#[test]
fn judge_stage_reproduces_fixture_records() {
    std::env::set_var(FIXTURE_AUTH_ENV, "test-key");
    let fx = fixture(FIXTURE_SEED);
    let dir = tempfile::tempdir().unwrap();
    fx.write_files(dir.path()).unwrap();
    let server = StubServer::start(replay_handler(fx.judges.clone(), &fx.replies)).unwrap();
    std::fs::write(dir.path().join("jury.toml"), toml::to_string(&fx.run_spec(&server.url(""))).unwrap()).unwrap();
    let text = format!(
        "schema_version = \"1\"\ncorpus = \"corpus.jsonl\"\nseed = 3\nrescore = \"rescore-panel\"\n\
         [bootstrap]\nn_resamples = 100\n\
         [judge]\nspec = \"jury.toml\"\ntasks = \"tasks.jsonl\"\naudit_log = \"audit.jsonl\"\n\
         [report]\nward_agent = \"{}\"\n",
        fx.ward_agent
    );
    std::fs::write(dir.path().join("report.toml"), text).unwrap();
    let cfg = ReportConfig::load(dir.path().join("report.toml")).unwrap();
    let bundle = run_pipeline(&cfg).unwrap();
    let produced = &bundle.files["records/judge_records.jsonl"];
    let expected = jury_core::model::serialize_records(&fx.judge_records);
    for (i, (a, b)) in produced.lines().zip(expected.lines()).enumerate() {
        assert_eq!(a, b, "record {i}");
    }
    assert_eq!(produced.lines().count(), expected.lines().count());
    assert_eq!(bundle.metadata.judge_failures, 0);
    let hits = server.hits();
    // resume from the audit log: nothing new is requested
    let again = run_pipeline(&cfg).unwrap();
    assert_eq!(server.hits(), hits);
    assert_eq!(again.tables, bundle.tables);
    assert!(bundle.metadata.jury.contains(&EvaluatorId::judge("o3", "openai").to_string()));
    let _ = TableFormat::Csv;
}
