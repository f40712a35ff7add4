//! Stage orchestration for the full loop: collect, label, train_rm,
//! train_policy, evaluate.
//!
//! Every stage writes into its own directory under `out_dir` (built in a
//! staging directory and swapped in only on success) and appends an entry to
//! `out_dir/manifest.json`. A stage whose config hash and input digests match
//! its last completed entry, and whose outputs are untouched, is skipped.
//!
//! Layout:
//!
//! ```text
//! collect/<task>.jsonl
//! label/<task>/preferences.jsonl, label/<task>/verdicts.jsonl,
//!   label/instructions.jsonl, label/stats.json
//! rm/<task>/manifest.json, rm/<task>/member-<i>.ckpt, rm/<task>/training_log.json
//! policy/<task>/metrics.csv, policy/<task>/checkpoints/..
//! eval/accuracy*.csv, eval/<task>/*.csv
//! queue/                      (human critic store)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{self, AgentConfig, PolicyTrainConfig, RewardSource};
use crate::critic::dataset::{build_queries, DatasetStats, InstructionDataset};
use crate::critic::remote::remote_verdicts;
use crate::critic::{
    compose_instruction_record, ground_truth_label, scripted_verdict, CriticError, CriticSource, CriticVerdict,
    GroundTruthRule, HumanQueue, Label, PreferenceQuery, QueueError, RemoteConfig,
};
use crate::env::{TaskKind, TaskSpec};
use crate::eval::{self, EvalReport, ModelAccuracy, ReturnSource};
use crate::expert::collect_mixed_quality;
use crate::io;
use crate::reward::{train_reward_model, PreferenceDataset, PreferenceItem, RewardEnsemble, RmTrainConfig};
use crate::service::{self, AppState};
use crate::trajectory::{load_trajectories, save_trajectories, PairSampling, Trajectory, SEGMENT_LENGTH};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "prefcritic.manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}` needs `{missing}`; run stage `{run_first}` first")]
    UpstreamMissing {
        stage: Stage,
        run_first: Stage,
        missing: PathBuf,
    },
    #[error("stage `{stage}` failed: {message}")]
    StageFailed { stage: Stage, message: String },
}

impl PipelineError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::UpstreamMissing { .. } => 3,
            PipelineError::StageFailed { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Collect,
    Label,
    TrainRm,
    TrainPolicy,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Collect,
        Stage::Label,
        Stage::TrainRm,
        Stage::TrainPolicy,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Label => "label",
            Stage::TrainRm => "train_rm",
            Stage::TrainPolicy => "train_policy",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Output directory relative to `out_dir`.
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Label => "label",
            Stage::TrainRm => "rm",
            Stage::TrainPolicy => "policy",
            Stage::Evaluate => "eval",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticBackend {
    Scripted,
    Remote,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Mixed-quality trajectories per task.
    pub trajectories: usize,
    /// Shorter episodes (early successes) are dropped.
    pub min_length: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            min_length: SEGMENT_LENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub backend: CriticBackend,
    /// Preference pairs per task.
    pub pairs: usize,
    pub segment_length: usize,
    pub tie_epsilon: f64,
    /// Backend used for queries the remote critic could not answer.
    pub fallback: Option<CriticBackend>,
    pub remote: RemoteConfig,
    /// How long the label stage waits for human labels.
    pub human_timeout_s: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            backend: CriticBackend::Scripted,
            pairs: 1500,
            segment_length: SEGMENT_LENGTH,
            tie_epsilon: GroundTruthRule::default().tie_epsilon,
            fallback: None,
            remote: RemoteConfig::default(),
            human_timeout_s: 3600,
        }
    }
}

impl LabelConfig {
    pub fn rule(&self) -> GroundTruthRule {
        GroundTruthRule {
            tie_epsilon: self.tie_epsilon,
        }
    }

    pub fn sampling(&self) -> PairSampling {
        PairSampling {
            segment_length: self.segment_length,
            ..PairSampling::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyStageConfig {
    /// One learning curve set per source; `reward_model` uses the task's RM.
    pub reward_sources: Vec<RewardSource>,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Keep agent checkpoints at every evaluation step.
    pub checkpoints: bool,
    pub agent: AgentConfig,
}

impl Default for PolicyStageConfig {
    fn default() -> Self {
        let p = PolicyTrainConfig::default();
        Self {
            reward_sources: vec![RewardSource::RewardModel, RewardSource::EnvSparse],
            budget: p.budget,
            seeds: p.seeds,
            eval_every: p.eval_every,
            eval_episodes: p.eval_episodes,
            checkpoints: false,
            agent: AgentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Fresh trajectories per task for held-out preference accuracy.
    pub test_trajectories: usize,
    pub test_pairs: usize,
    /// Mixed-quality trajectories per task for the return distributions.
    pub return_trajectories: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            test_trajectories: 100,
            test_pairs: 1000,
            return_trajectories: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Directory with the built UI bundle, served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub lease_s: u64,
    /// Required in the `x-label-token` header when set.
    pub token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            ui_dir: None,
            lease_s: crate::critic::human::DEFAULT_LEASE.as_secs(),
            token: None,
        }
    }
}

impl ServiceConfig {
    pub fn addr(&self) -> String {
        format!("{}:{}", self.bind, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tasks: Vec<TaskKind>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub collect: CollectConfig,
    pub label: LabelConfig,
    pub reward_model: RmTrainConfig,
    pub policy: PolicyStageConfig,
    pub evaluate: EvaluateConfig,
    pub service: ServiceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::Reach],
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            collect: CollectConfig::default(),
            label: LabelConfig::default(),
            reward_model: RmTrainConfig::default(),
            policy: PolicyStageConfig::default(),
            evaluate: EvaluateConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the global seed and the policy seed list.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.policy.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.tasks.is_empty() {
            return bad("tasks must name at least one task".into());
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return bad("tasks contains duplicates".into());
        }
        if self.collect.trajectories < 2 {
            return bad("collect.trajectories must be at least 2".into());
        }
        if self.label.segment_length == 0 || self.collect.min_length < self.label.segment_length {
            return bad("collect.min_length must be at least label.segment_length (and both > 0)".into());
        }
        if !(self.label.tie_epsilon >= 0.0 && self.label.tie_epsilon.is_finite()) {
            return bad("label.tie_epsilon must be a non-negative number".into());
        }
        let uses_remote =
            self.label.backend == CriticBackend::Remote || self.label.fallback == Some(CriticBackend::Remote);
        if uses_remote && self.label.remote.endpoint.trim().is_empty() {
            return bad("label.remote.endpoint is required for the remote backend".into());
        }
        if self.label.fallback.is_some() && self.label.backend != CriticBackend::Remote {
            return bad("label.fallback only applies to the remote backend".into());
        }
        if self.label.fallback == Some(CriticBackend::Remote) {
            return bad("label.fallback cannot be remote".into());
        }
        self.reward_model
            .validate()
            .map_err(|e| PipelineError::Config(format!("reward_model: {e}")))?;
        self.policy
            .agent
            .validate()
            .map_err(|e| PipelineError::Config(format!("policy.agent: {e}")))?;
        if self.policy.seeds.is_empty() {
            return bad("policy.seeds must not be empty".into());
        }
        if self.policy.reward_sources.is_empty() {
            return bad("policy.reward_sources must not be empty".into());
        }
        if self.policy.eval_episodes == 0 {
            return bad("policy.eval_episodes must be at least 1".into());
        }
        if self.evaluate.test_trajectories < 2 || self.evaluate.return_trajectories == 0 {
            return bad("evaluate needs at least 2 test trajectories and 1 return trajectory".into());
        }
        if let Some(dir) = &self.service.ui_dir {
            if !dir.is_dir() {
                return bad(format!("service.ui_dir `{}` is not a directory", dir.display()));
            }
        }
        Ok(())
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(stage.dir_name())
    }

    pub fn queue_dir(&self) -> PathBuf {
        self.out_dir.join("queue")
    }

    /// The subset of the config a stage depends on, hashed into its entry.
    fn stage_section(&self, stage: Stage) -> serde_json::Value {
        use serde_json::json;
        match stage {
            Stage::Collect => json!({"tasks": self.tasks, "seed": self.seed, "collect": self.collect}),
            Stage::Label => json!({
                "tasks": self.tasks,
                "seed": self.seed,
                "backend": self.label.backend,
                "pairs": self.label.pairs,
                "segment_length": self.label.segment_length,
                "tie_epsilon": self.label.tie_epsilon,
                "fallback": self.label.fallback,
                "endpoint": if self.label.backend == CriticBackend::Remote {
                    Some(&self.label.remote.endpoint)
                } else {
                    None
                },
            }),
            Stage::TrainRm => json!({"tasks": self.tasks, "reward_model": self.reward_model}),
            Stage::TrainPolicy => json!({"tasks": self.tasks, "policy": self.policy}),
            Stage::Evaluate => json!({
                "tasks": self.tasks,
                "seed": self.seed,
                "evaluate": self.evaluate,
                "min_length": self.collect.min_length,
                "segment_length": self.label.segment_length,
                "tie_epsilon": self.label.tie_epsilon,
            }),
        }
    }

    pub fn config_hash(&self, stage: Stage) -> String {
        let body = serde_json::json!({"stage": stage.name(), "config": self.stage_section(stage)});
        hex::encode(Sha256::digest(serde_json::to_vec(&body).expect("json")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    /// Path relative to `out_dir`, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Completed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: Stage,
    pub status: EntryStatus,
    pub config_hash: String,
    pub inputs: Vec<ArtifactDigest>,
    pub outputs: Vec<ArtifactDigest>,
    pub started_at_ms: u64,
    pub duration_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
            entries: Vec::new(),
        }
    }
}

impl Manifest {
    /// Reads `out_dir/manifest.json`; a missing file is an empty manifest.
    pub fn load(out_dir: &Path) -> Result<Self, PipelineError> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(PipelineError::Config(format!("reading {}: {e}", path.display()))),
        };
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if m.schema != MANIFEST_SCHEMA || m.version > MANIFEST_VERSION {
            return Err(PipelineError::Config(format!(
                "{}: unsupported manifest {} v{}",
                path.display(),
                m.schema,
                m.version
            )));
        }
        Ok(m)
    }

    fn save(&self, out_dir: &Path) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        io::write_atomic(&out_dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn last_completed(&self, stage: Stage) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.stage == stage && e.status == EntryStatus::Completed)
    }
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Digests of every file under `paths` (files or directories), sorted by path.
pub fn digest_paths(out_dir: &Path, paths: &[PathBuf]) -> std::io::Result<Vec<ArtifactDigest>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            collect_files(p, &mut files)?;
        } else {
            files.push(p.clone());
        }
    }
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(out_dir).unwrap_or(&f);
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        out.insert(key, sha256_file(&f)?);
    }
    Ok(out
        .into_iter()
        .map(|(path, sha256)| ArtifactDigest { path, sha256 })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub entry: ManifestEntry,
}

impl StageOutcome {
    pub fn skipped(&self) -> bool {
        self.entry.status == EntryStatus::Skipped
    }
}

/// Options that change how a stage runs but not what it produces.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Rerun even when the manifest says the stage is up to date.
    pub force: bool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn trajectories_path(cfg: &PipelineConfig, task: TaskKind) -> PathBuf {
    cfg.stage_dir(Stage::Collect).join(format!("{}.jsonl", task.name()))
}

fn preferences_path(cfg: &PipelineConfig, task: TaskKind) -> PathBuf {
    cfg.stage_dir(Stage::Label).join(task.name()).join("preferences.jsonl")
}

fn rm_dir(cfg: &PipelineConfig, task: TaskKind) -> PathBuf {
    cfg.stage_dir(Stage::TrainRm).join(task.name())
}

fn metrics_path(cfg: &PipelineConfig, task: TaskKind) -> PathBuf {
    cfg.stage_dir(Stage::TrainPolicy).join(task.name()).join("metrics.csv")
}

fn needs_rm_for_policy(cfg: &PipelineConfig) -> bool {
    cfg.policy.reward_sources.contains(&RewardSource::RewardModel)
}

/// Upstream artifacts a stage reads, paired with the stage producing them.
fn required_inputs(cfg: &PipelineConfig, stage: Stage) -> Vec<(Stage, PathBuf)> {
    let mut out = Vec::new();
    for &task in &cfg.tasks {
        match stage {
            Stage::Collect => {}
            Stage::Label => out.push((Stage::Collect, trajectories_path(cfg, task))),
            Stage::TrainRm => out.push((Stage::Label, preferences_path(cfg, task))),
            Stage::TrainPolicy => {
                if needs_rm_for_policy(cfg) {
                    out.push((Stage::TrainRm, rm_dir(cfg, task)));
                }
            }
            Stage::Evaluate => {
                out.push((Stage::TrainRm, rm_dir(cfg, task)));
                out.push((Stage::TrainPolicy, metrics_path(cfg, task)));
            }
        }
    }
    out
}

fn fail(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::StageFailed { stage, message }
}

/// Runs one stage, skipping it when the manifest shows it is up to date.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, opts: &RunOptions) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let inputs = required_inputs(cfg, stage);
    for (producer, path) in &inputs {
        if !path.exists() {
            return Err(PipelineError::UpstreamMissing {
                stage,
                run_first: *producer,
                missing: path.clone(),
            });
        }
    }
    let f = fail(stage);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| f(format!("creating {}: {e}", cfg.out_dir.display())))?;
    let input_paths: Vec<PathBuf> = inputs.iter().map(|(_, p)| p.clone()).collect();
    let input_digests = digest_paths(&cfg.out_dir, &input_paths).map_err(|e| f(format!("hashing inputs: {e}")))?;
    let hash = cfg.config_hash(stage);
    let mut manifest = Manifest::load(&cfg.out_dir)?;
    let out_dir = cfg.stage_dir(stage);
    let started_at_ms = now_ms();
    let started = Instant::now();

    if !opts.force {
        if let Some(prev) = manifest.last_completed(stage) {
            let current = if out_dir.is_dir() {
                digest_paths(&cfg.out_dir, std::slice::from_ref(&out_dir)).ok()
            } else {
                None
            };
            if prev.config_hash == hash && prev.inputs == input_digests && current.as_ref() == Some(&prev.outputs) {
                tracing::info!(stage = %stage, "up to date, skipping");
                let entry = ManifestEntry {
                    stage,
                    status: EntryStatus::Skipped,
                    config_hash: hash,
                    inputs: input_digests,
                    outputs: prev.outputs.clone(),
                    started_at_ms,
                    duration_ms: started.elapsed().as_secs_f64() * 1e3,
                    note: Some("unchanged config and inputs".into()),
                };
                manifest.entries.push(entry.clone());
                manifest.save(&cfg.out_dir).map_err(|e| f(format!("writing manifest: {e}")))?;
                return Ok(StageOutcome { entry });
            }
        }
    }

    tracing::info!(stage = %stage, "running");
    let staging = cfg.out_dir.join(format!(".staging-{}", stage.dir_name()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| f(format!("clearing {}: {e}", staging.display())))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| f(format!("creating {}: {e}", staging.display())))?;
    let note = match execute(stage, cfg, &staging) {
        Ok(note) => note,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if out_dir.exists() {
        std::fs::remove_dir_all(&out_dir).map_err(|e| f(format!("replacing {}: {e}", out_dir.display())))?;
    }
    std::fs::rename(&staging, &out_dir).map_err(|e| f(format!("publishing {}: {e}", out_dir.display())))?;
    let outputs = digest_paths(&cfg.out_dir, std::slice::from_ref(&out_dir))
        .map_err(|e| f(format!("hashing outputs: {e}")))?;
    let entry = ManifestEntry {
        stage,
        status: EntryStatus::Completed,
        config_hash: hash,
        inputs: input_digests,
        outputs,
        started_at_ms,
        duration_ms: started.elapsed().as_secs_f64() * 1e3,
        note,
    };
    manifest.entries.push(entry.clone());
    manifest.save(&cfg.out_dir).map_err(|e| f(format!("writing manifest: {e}")))?;
    Ok(StageOutcome { entry })
}

/// Runs every stage in order, stopping at the first failure.
pub fn run_all(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<StageOutcome>, PipelineError> {
    Stage::ALL.into_iter().map(|s| run_stage(s, cfg, opts)).collect()
}

fn execute(stage: Stage, cfg: &PipelineConfig, dir: &Path) -> Result<Option<String>, PipelineError> {
    match stage {
        Stage::Collect => stage_collect(cfg, dir),
        Stage::Label => stage_label(cfg, dir),
        Stage::TrainRm => stage_train_rm(cfg, dir),
        Stage::TrainPolicy => stage_train_policy(cfg, dir),
        Stage::Evaluate => stage_evaluate(cfg, dir),
    }
}

fn task_seed(seed: u64, task: TaskKind, salt: u64) -> u64 {
    let k = TaskKind::ALL.iter().position(|&t| t == task).unwrap_or(0) as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k + 1).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ salt
}

const SALT_COLLECT: u64 = 0x11;
const SALT_PAIRS: u64 = 0x22;
const SALT_TEST: u64 = 0x33;
const SALT_RETURNS: u64 = 0x44;

fn stage_collect(cfg: &PipelineConfig, dir: &Path) -> Result<Option<String>, PipelineError> {
    let f = fail(Stage::Collect);
    let mut counts = Vec::new();
    for &task in &cfg.tasks {
        let spec = TaskSpec::new(task);
        let trajs = collect_mixed_quality(
            spec,
            cfg.collect.trajectories,
            cfg.collect.min_length,
            task_seed(cfg.seed, task, SALT_COLLECT),
        );
        let successes = trajs.iter().filter(|t| t.success()).count();
        save_trajectories(&dir.join(format!("{}.jsonl", task.name())), &trajs).map_err(|e| f(e.to_string()))?;
        counts.push(format!("{task}: {} trajectories, {successes} successful", trajs.len()));
    }
    Ok(Some(counts.join("; ")))
}

/// One line of `label/<task>/verdicts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub query_id: String,
    pub label: Label,
    pub source: CriticSource,
    pub retries: u32,
    pub analysis: String,
}

impl From<&CriticVerdict> for LabelRecord {
    fn from(v: &CriticVerdict) -> Self {
        Self {
            query_id: v.query_id.clone(),
            label: v.label,
            source: v.source,
            retries: v.retries,
            analysis: v.analysis.clone(),
        }
    }
}

pub const LABEL_SCHEMA: &str = "prefcritic.labels";
pub const LABEL_VERSION: u32 = 1;

fn load_task_trajectories(cfg: &PipelineConfig, task: TaskKind, stage: Stage) -> Result<Vec<Trajectory>, PipelineError> {
    load_trajectories(&trajectories_path(cfg, task)).map_err(|e| PipelineError::StageFailed {
        stage,
        message: format!("{}: {e}", trajectories_path(cfg, task).display()),
    })
}

fn label_human(cfg: &PipelineConfig, queries: &[PreferenceQuery]) -> Result<Vec<CriticVerdict>, PipelineError> {
    let f = fail(Stage::Label);
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let queue = HumanQueue::open(&cfg.queue_dir())
        .map_err(|e| f(e.to_string()))?
        .with_lease(Duration::from_secs(cfg.service.lease_s));
    let queue = Arc::new(queue);
    for q in queries {
        match queue.enqueue(q.clone()) {
            Ok(()) | Err(QueueError::DuplicateQuery(_)) => {}
            Err(e) => return Err(f(e.to_string())),
        }
    }
    let state = AppState {
        queue: queue.clone(),
        token: cfg.service.token.clone(),
    };
    let handle = service::spawn_service(&cfg.service.addr(), state, cfg.service.ui_dir.clone())
        .map_err(|e| f(format!("starting label service on {}: {e}", cfg.service.addr())))?;
    tracing::info!(url = %handle.base_url(), queries = queries.len(), "waiting for human labels");
    let deadline = Instant::now() + Duration::from_secs(cfg.label.human_timeout_s);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let left = deadline.saturating_duration_since(Instant::now());
        out.push(queue.await_label(&q.id, left).map_err(|e| f(e.to_string()))?);
    }
    handle.stop();
    Ok(out)
}

fn label_queries(cfg: &PipelineConfig, queries: &[PreferenceQuery]) -> Result<Vec<CriticVerdict>, PipelineError> {
    let f = fail(Stage::Label);
    let rule = cfg.label.rule();
    let scripted = |qs: &[PreferenceQuery]| -> Result<Vec<CriticVerdict>, PipelineError> {
        qs.iter()
            .map(|q| scripted_verdict(q, &rule).map_err(|e| f(e.to_string())))
            .collect()
    };
    match cfg.label.backend {
        CriticBackend::Scripted => scripted(queries),
        CriticBackend::Human => label_human(cfg, queries),
        CriticBackend::Remote => {
            let results = remote_verdicts(queries, &cfg.label.remote);
            let mut verdicts: Vec<Option<CriticVerdict>> = Vec::with_capacity(queries.len());
            let mut rerouted = Vec::new();
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok(v) => verdicts.push(Some(v)),
                    Err(e @ CriticError::VerdictUnavailable { .. }) => match cfg.label.fallback {
                        Some(_) => {
                            tracing::warn!(query = %queries[i].id, "rerouting: {e}");
                            rerouted.push(i);
                            verdicts.push(None);
                        }
                        None => return Err(f(format!("query `{}`: {e}", queries[i].id))),
                    },
                    Err(e) => return Err(f(format!("query `{}`: {e}", queries[i].id))),
                }
            }
            if !rerouted.is_empty() {
                let qs: Vec<PreferenceQuery> = rerouted.iter().map(|&i| queries[i].clone()).collect();
                let vs = match cfg.label.fallback {
                    Some(CriticBackend::Human) => label_human(cfg, &qs)?,
                    _ => scripted(&qs)?,
                };
                for (i, v) in rerouted.into_iter().zip(vs) {
                    verdicts[i] = Some(v);
                }
            }
            Ok(verdicts.into_iter().map(|v| v.expect("every query labeled")).collect())
        }
    }
}

fn stage_label(cfg: &PipelineConfig, dir: &Path) -> Result<Option<String>, PipelineError> {
    let f = fail(Stage::Label);
    let mut records = Vec::new();
    let mut stats = DatasetStats::default();
    for &task in &cfg.tasks {
        let spec = TaskSpec::new(task);
        let trajs = load_task_trajectories(cfg, task, Stage::Label)?;
        let seed = task_seed(cfg.seed, task, SALT_PAIRS);
        let queries = build_queries(&spec, &trajs, cfg.label.pairs, cfg.label.sampling(), seed, task.name())
            .map_err(|e| f(e.to_string()))?;
        let verdicts = label_queries(cfg, &queries)?;
        let mut items = Vec::with_capacity(queries.len());
        let mut labels = Vec::with_capacity(queries.len());
        for (j, (q, v)) in queries.iter().zip(&verdicts).enumerate() {
            items.push(PreferenceItem::from_verdict(q, v));
            labels.push(v.label);
            records.push(compose_instruction_record(q, v, seed ^ (j as u64).rotate_left(17)).map_err(|e| f(e.to_string()))?);
        }
        stats.add(task.name(), &labels);
        let tdir = dir.join(task.name());
        PreferenceDataset { items }
            .save(&tdir.join("preferences.jsonl"))
            .map_err(|e| f(e.to_string()))?;
        let lrecs: Vec<LabelRecord> = verdicts.iter().map(LabelRecord::from).collect();
        io::write_records(&tdir.join("verdicts.jsonl"), LABEL_SCHEMA, LABEL_VERSION, &lrecs)
            .map_err(|e| f(e.to_string()))?;
    }
    let ds = InstructionDataset { records, stats };
    ds.write(&dir.join("instructions.jsonl")).map_err(|e| f(e.to_string()))?;
    let stats_json = serde_json::to_vec_pretty(&ds.stats).expect("stats serialize");
    io::write_atomic(&dir.join("stats.json"), &stats_json).map_err(|e| f(e.to_string()))?;
    Ok(Some(format!(
        "{} labels, tie fraction {:.3}",
        ds.stats.records, ds.stats.tie_fraction
    )))
}

fn stage_train_rm(cfg: &PipelineConfig, dir: &Path) -> Result<Option<String>, PipelineError> {
    let f = fail(Stage::TrainRm);
    let mut notes = Vec::new();
    for &task in &cfg.tasks {
        let ds = PreferenceDataset::load(&preferences_path(cfg, task)).map_err(|e| f(e.to_string()))?;
        let (ens, log) = train_reward_model(&ds, &cfg.reward_model).map_err(|e| f(format!("{task}: {e}")))?;
        let tdir = dir.join(task.name());
        ens.save(&tdir).map_err(|e| f(e.to_string()))?;
        let log_json = serde_json::to_vec_pretty(&log).expect("log serializes");
        io::write_atomic(&tdir.join("training_log.json"), &log_json).map_err(|e| f(e.to_string()))?;
        notes.push(match log.holdout_accuracy {
            Some(a) => format!("{task}: holdout accuracy {a:.3}"),
            None => format!("{task}: no holdout"),
        });
    }
    Ok(Some(notes.join("; ")))
}

fn load_rm(cfg: &PipelineConfig, task: TaskKind, stage: Stage) -> Result<RewardEnsemble, PipelineError> {
    RewardEnsemble::load(&rm_dir(cfg, task)).map_err(|e| PipelineError::StageFailed {
        stage,
        message: format!("{}: {e}", rm_dir(cfg, task).display()),
    })
}

fn stage_train_policy(cfg: &PipelineConfig, dir: &Path) -> Result<Option<String>, PipelineError> {
    let f = fail(Stage::TrainPolicy);
    let mut notes = Vec::new();
    for &task in &cfg.tasks {
        let rm = if needs_rm_for_policy(cfg) {
            Some(load_rm(cfg, task, Stage::TrainPolicy)?)
        } else {
            None
        };
        let tdir = dir.join(task.name());
        let mut rows = Vec::new();
        for &source in &cfg.policy.reward_sources {
            let pcfg = PolicyTrainConfig {
                spec: TaskSpec::new(task),
                reward_source: source,
                budget: cfg.policy.budget,
                seeds: cfg.policy.seeds.clone(),
                eval_every: cfg.policy.eval_every,
                eval_episodes: cfg.policy.eval_episodes,
                agent: cfg.policy.agent.clone(),
                checkpoint_dir: cfg
                    .policy
                    .checkpoints
                    .then(|| tdir.join("checkpoints").join(source.name())),
            };
            let r = agent::train_policy(&pcfg, rm.as_ref()).map_err(|e| f(format!("{task}/{source}: {e}")))?;
            let last = r.iter().filter(|m| m.step == r.last().map_or(0, |l| l.step));
            let finals: Vec<f64> = last.map(|m| m.success_rate).collect();
            let (mean, _) = eval::mean_stderr(&finals);
            notes.push(format!("{task}/{source}: final success {mean:.2}"));
            rows.extend(r);
        }
        agent::write_metric_log(&tdir.join("metrics.csv"), &rows).map_err(|e| f(e.to_string()))?;
    }
    Ok(Some(notes.join("; ")))
}

/// Label the RM predicts for a pair: the segment with the larger predicted
/// return, tie only on exact equality.
pub fn rm_label(rm: &RewardEnsemble, q: &PreferenceQuery) -> Label {
    let a = rm.segment_return(&q.seg_a);
    let b = rm.segment_return(&q.seg_b);
    if a > b {
        Label::First
    } else if b > a {
        Label::Second
    } else {
        Label::Tie
    }
}

fn push_accuracy(
    model: &mut ModelAccuracy,
    split: String,
    pred: &[Label],
    truth: &[Label],
) -> Result<(), PipelineError> {
    match eval::label_accuracy(&split, pred, truth) {
        Ok(r) => {
            model.reports.push(r);
            Ok(())
        }
        Err(eval::EvalError::NoComparablePairs) => Ok(()),
        Err(e) => Err(fail(Stage::Evaluate)(e.to_string())),
    }
}

fn stage_evaluate(cfg: &PipelineConfig, dir: &Path) -> Result<Option<String>, PipelineError> {
    let f = fail(Stage::Evaluate);
    let rule = cfg.label.rule();
    let mut scripted_model = ModelAccuracy {
        model: "scripted_critic".into(),
        reports: Vec::new(),
    };
    let mut rm_model = ModelAccuracy {
        model: "reward_model".into(),
        reports: Vec::new(),
    };
    for &task in &cfg.tasks {
        let spec = TaskSpec::new(task);
        let rm = load_rm(cfg, task, Stage::Evaluate)?;
        let test = collect_mixed_quality(
            spec,
            cfg.evaluate.test_trajectories,
            cfg.collect.min_length,
            task_seed(cfg.seed, task, SALT_TEST),
        );
        let queries = build_queries(
            &spec,
            &test,
            cfg.evaluate.test_pairs,
            cfg.label.sampling(),
            task_seed(cfg.seed, task, SALT_TEST ^ SALT_PAIRS),
            &format!("test-{}", task.name()),
        )
        .map_err(|e| f(e.to_string()))?;
        let mut truth = Vec::with_capacity(queries.len());
        let mut scripted = Vec::with_capacity(queries.len());
        let mut rm_pred = Vec::with_capacity(queries.len());
        let mut hard = Vec::with_capacity(queries.len());
        for q in &queries {
            truth.push(ground_truth_label(&q.seg_a, &q.seg_b, &rule).map_err(|e| f(e.to_string()))?.label);
            scripted.push(scripted_verdict(q, &rule).map_err(|e| f(e.to_string()))?.label);
            rm_pred.push(rm_label(&rm, q));
            hard.push(eval::is_hard_pair(&q.seg_a, &q.seg_b, &rule).map_err(|e| f(e.to_string()))?);
        }
        let pick = |v: &[Label]| -> Vec<Label> { v.iter().zip(&hard).filter(|(_, h)| **h).map(|(l, _)| *l).collect() };
        let test_split = format!("{}/test", task.name());
        let hard_split = format!("{}/hard", task.name());
        push_accuracy(&mut scripted_model, test_split.clone(), &scripted, &truth)?;
        push_accuracy(&mut scripted_model, hard_split.clone(), &pick(&scripted), &pick(&truth))?;
        push_accuracy(&mut rm_model, test_split, &rm_pred, &truth)?;
        push_accuracy(&mut rm_model, hard_split, &pick(&rm_pred), &pick(&truth))?;

        let rows = agent::read_metric_log(&metrics_path(cfg, task)).map_err(|e| f(e.to_string()))?;
        let curves = eval::success_rate_curve(&rows).map_err(|e| f(e.to_string()))?;
        let return_trajs = collect_mixed_quality(
            spec,
            cfg.evaluate.return_trajectories,
            cfg.collect.min_length,
            task_seed(cfg.seed, task, SALT_RETURNS),
        );
        let returns = eval::return_distribution(
            &return_trajs,
            &[ReturnSource::Expert, ReturnSource::Rm, ReturnSource::Sparse],
            Some(&rm),
        )
        .map_err(|e| f(e.to_string()))?;
        let task_report = EvalReport {
            accuracy: Vec::new(),
            curves,
            returns,
        };
        eval::emit_report(&task_report, &dir.join(task.name())).map_err(|e| f(e.to_string()))?;
    }
    let summary = rm_model
        .reports
        .iter()
        .map(|r| format!("rm {} {:.3}", r.split, r.accuracy))
        .collect::<Vec<_>>()
        .join("; ");
    let report = EvalReport {
        accuracy: vec![scripted_model, rm_model],
        curves: Vec::new(),
        returns: Vec::new(),
    };
    eval::emit_report(&report, dir).map_err(|e| f(e.to_string()))?;
    Ok(Some(summary))
}
