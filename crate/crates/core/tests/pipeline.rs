mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use common::{http, post};
use prefcritic::critic::CriticSource;
use prefcritic::io::read_records;
use prefcritic::pipeline::{
    digest_paths, run_all, run_stage, CriticBackend, EntryStatus, LabelRecord, Manifest, PipelineConfig,
    PipelineError, RunOptions, Stage, LABEL_SCHEMA, LABEL_VERSION,
};
use prefcritic::reward::PreferenceDataset;
use prefcritic::service::QueryView;

fn small(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml_str(
        r#"
        tasks = ["reach"]
        seed = 3
        [collect]
        trajectories = 12
        [label]
        pairs = 30
        [reward_model]
        epochs = 2
        ensemble_size = 2
        hidden = [16]
        [policy]
        budget = 600
        seeds = [0]
        eval_every = 300
        eval_episodes = 2
        [policy.agent]
        seed_steps = 200
        batch_size = 32
        [evaluate]
        test_trajectories = 6
        test_pairs = 20
        return_trajectories = 6
        "#,
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Every file under `dir` except the manifest, with its digest.
fn snapshot(dir: &Path) -> BTreeMap<String, String> {
    digest_paths(dir, &[dir.to_path_buf()])
        .unwrap()
        .into_iter()
        .filter(|d| d.path != "manifest.json")
        .map(|d| (d.path, d.sha256))
        .collect()
}

fn opts() -> RunOptions {
    RunOptions::default()
}

#[test]
fn full_run_then_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = run_all(&cfg, &opts()).unwrap();
    assert_eq!(out.iter().map(|o| o.entry.stage).collect::<Vec<_>>(), Stage::ALL.to_vec());
    assert!(out.iter().all(|o| !o.skipped()));

    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!(m.entries.len(), 5);
    for (e, s) in m.entries.iter().zip(Stage::ALL) {
        assert_eq!(e.stage, s);
        assert_eq!(e.status, EntryStatus::Completed);
        assert_eq!(e.config_hash, cfg.config_hash(s));
        assert!(!e.outputs.is_empty());
        assert!(e.duration_ms >= 0.0);
    }
    assert!(m.entries[0].inputs.is_empty());
    assert_eq!(m.entries[1].inputs, m.entries[0].outputs);

    let before = snapshot(dir.path());
    let again = run_all(&cfg, &opts()).unwrap();
    assert!(again.iter().all(|o| o.skipped()));
    assert_eq!(snapshot(dir.path()), before);
    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!(m.entries.len(), 10);
    assert!(m.entries[5..].iter().all(|e| e.status == EntryStatus::Skipped));
}

#[test]
fn forced_rerun_reproduces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_all(&cfg, &opts()).unwrap();
    let first = snapshot(dir.path());
    run_all(&cfg, &RunOptions { force: true }).unwrap();
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn changing_policy_config_reruns_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    run_all(&cfg, &opts()).unwrap();
    cfg.policy.eval_episodes = 3;
    let out = run_all(&cfg, &opts()).unwrap();
    let skipped: Vec<bool> = out.iter().map(|o| o.skipped()).collect();
    assert_eq!(skipped, vec![true, true, true, false, false]);
}

#[test]
fn tampered_output_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_stage(Stage::Collect, &cfg, &opts()).unwrap();
    let before = snapshot(dir.path());
    std::fs::write(dir.path().join("collect/reach.jsonl"), "garbage").unwrap();
    let out = run_stage(Stage::Collect, &cfg, &opts()).unwrap();
    assert!(!out.skipped());
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn missing_upstream_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let err = run_stage(Stage::Label, &cfg, &opts()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("run stage `collect` first"), "{err}");
    assert!(!dir.path().join("label").exists());
}

fn dead_endpoint() -> String {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    format!("http://127.0.0.1:{port}/critic")
}

#[test]
fn failed_remote_labeling_leaves_artifacts_intact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    run_stage(Stage::Collect, &cfg, &opts()).unwrap();
    run_stage(Stage::Label, &cfg, &opts()).unwrap();
    let before = snapshot(dir.path());
    let manifest_before = Manifest::load(dir.path()).unwrap();

    cfg.label.backend = CriticBackend::Remote;
    cfg.label.remote.endpoint = dead_endpoint();
    cfg.label.remote.max_retries = 1;
    cfg.label.remote.backoff_ms = 1;
    let err = run_stage(Stage::Label, &cfg, &opts()).unwrap_err();
    assert!(matches!(err, PipelineError::StageFailed { stage: Stage::Label, .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert_eq!(snapshot(dir.path()), before);
    assert_eq!(Manifest::load(dir.path()).unwrap(), manifest_before);
    assert!(!dir.path().join(".staging-label").exists());
}

#[test]
fn remote_failures_fall_back_to_scripted() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.label.pairs = 5;
    cfg.label.backend = CriticBackend::Remote;
    cfg.label.fallback = Some(CriticBackend::Scripted);
    cfg.label.remote.endpoint = dead_endpoint();
    cfg.label.remote.max_retries = 0;
    run_stage(Stage::Collect, &cfg, &opts()).unwrap();
    run_stage(Stage::Label, &cfg, &opts()).unwrap();
    let recs: Vec<LabelRecord> =
        read_records(&dir.path().join("label/reach/verdicts.jsonl"), LABEL_SCHEMA, LABEL_VERSION).unwrap();
    assert_eq!(recs.len(), 5);
    assert!(recs.iter().all(|r| r.source == CriticSource::Scripted));
}

#[test]
fn human_backend_waits_for_labels_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.label.pairs = 4;
    cfg.label.backend = CriticBackend::Human;
    cfg.label.human_timeout_s = 30;
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    cfg.service.port = port;
    run_stage(Stage::Collect, &cfg, &opts()).unwrap();

    let base = format!("http://127.0.0.1:{port}");
    let labeler = std::thread::spawn(move || {
        let agent = http();
        let mut done = 0;
        let deadline = std::time::Instant::now() + Duration::from_secs(20);
        while done < 4 && std::time::Instant::now() < deadline {
            let Ok(mut r) = agent.get(&format!("{base}/api/queries/next")).call() else {
                std::thread::sleep(Duration::from_millis(20));
                continue;
            };
            if r.status().as_u16() != 200 {
                std::thread::sleep(Duration::from_millis(20));
                continue;
            }
            let view: QueryView = serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap();
            let url = format!("{base}/api/queries/{}/label", view.id);
            assert_eq!(post(&agent, &url, r#"{"label": 1}"#).0, 200);
            done += 1;
        }
        // the stage shuts its service down once the last label lands
        assert_eq!(done, 4);
    });
    run_stage(Stage::Label, &cfg, &opts()).unwrap();
    labeler.join().unwrap();
    let ds = PreferenceDataset::load(&dir.path().join("label/reach/preferences.jsonl")).unwrap();
    assert_eq!(ds.items.len(), 4);
    assert!(ds.items.iter().all(|i| i.y == [1.0, 0.0] && i.source == CriticSource::Human));
}

#[test]
fn shipped_default_config_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg, PipelineConfig::default());
}
