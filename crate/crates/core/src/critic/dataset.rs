//! Instruction-following dataset generation with the scripted critic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prompt::{compose_instruction_record, InstructionRecord};
use super::scripted::{scripted_verdict, GroundTruthRule};
use super::{CriticError, Label, PreferenceQuery};
use crate::env::TaskSpec;
use crate::io::{self, RecordFileError};
use crate::trajectory::{sample_segment_pairs, PairSampling, Trajectory};

pub const INSTRUCTION_SCHEMA: &str = "prefcritic.instructions";
pub const INSTRUCTION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub pairs_per_task: usize,
    pub sampling: PairSampling,
    pub rule: GroundTruthRule,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            pairs_per_task: 1500,
            sampling: PairSampling::default(),
            rule: GroundTruthRule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLabelStats {
    pub task: String,
    pub records: usize,
    /// Counts indexed by label value (tie, first, second).
    pub label_counts: [usize; 3],
    pub tie_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub per_task: Vec<TaskLabelStats>,
    pub records: usize,
    pub label_counts: [usize; 3],
    pub tie_fraction: f64,
}

impl DatasetStats {
    pub fn add(&mut self, task: &str, labels: &[Label]) {
        let mut t = TaskLabelStats {
            task: task.to_string(),
            records: labels.len(),
            ..Default::default()
        };
        for l in labels {
            t.label_counts[l.as_u8() as usize] += 1;
            self.label_counts[l.as_u8() as usize] += 1;
        }
        t.tie_fraction = fraction(t.label_counts[0], t.records);
        self.records += labels.len();
        self.tie_fraction = fraction(self.label_counts[0], self.records);
        self.per_task.push(t);
    }
}

fn fraction(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionDataset {
    pub records: Vec<InstructionRecord>,
    pub stats: DatasetStats,
}

impl InstructionDataset {
    pub fn encode(&self) -> Result<Vec<u8>, RecordFileError> {
        io::encode_records(INSTRUCTION_SCHEMA, INSTRUCTION_VERSION, &self.records)
    }

    /// Writes `<path>` (records) atomically.
    pub fn write(&self, path: &Path) -> Result<(), RecordFileError> {
        io::write_atomic(path, &self.encode()?)?;
        Ok(())
    }
}

pub fn load_instruction_records(path: &Path) -> Result<Vec<InstructionRecord>, RecordFileError> {
    io::read_records(path, INSTRUCTION_SCHEMA, INSTRUCTION_VERSION)
}

fn task_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Samples `n` same-task segment pairs and wraps them as queries with
/// deterministic ids `<prefix>-<j>` and a zero timestamp.
pub fn build_queries(
    spec: &TaskSpec,
    trajs: &[Trajectory],
    n: usize,
    sampling: PairSampling,
    seed: u64,
    prefix: &str,
) -> Result<Vec<PreferenceQuery>, CriticError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let insufficient = |reason: String| CriticError::InsufficientTrajectories {
        task: spec.task.name().to_string(),
        reason,
    };
    if let Some(t) = trajs.iter().find(|t| t.task.task != spec.task) {
        return Err(insufficient(format!("trajectory `{}` belongs to task {}", t.id, t.task.task)));
    }
    let pairs = sample_segment_pairs(trajs, n, sampling, seed).map_err(|e| insufficient(e.to_string()))?;
    pairs
        .into_iter()
        .enumerate()
        .map(|(j, (a, b))| {
            let mut q = PreferenceQuery::new(format!("{prefix}-{j:05}"), a, b)?;
            q.created_at_ms = 0;
            Ok(q)
        })
        .collect()
}

/// Generates `pairs_per_task` records for every task entry. Entries may
/// repeat a task kind (e.g. variants with different dynamics).
pub fn generate_dataset(
    tasks: &[(TaskSpec, Vec<Trajectory>)],
    cfg: &DatasetConfig,
) -> Result<InstructionDataset, CriticError> {
    let mut records = Vec::with_capacity(tasks.len() * cfg.pairs_per_task);
    let mut stats = DatasetStats::default();
    for (i, (spec, trajs)) in tasks.iter().enumerate() {
        let seed = task_seed(cfg.seed, i);
        let prefix = format!("{}-{i:02}", spec.task.name());
        let queries = build_queries(spec, trajs, cfg.pairs_per_task, cfg.sampling, seed, &prefix)?;
        let mut labels = Vec::with_capacity(queries.len());
        for (j, q) in queries.iter().enumerate() {
            let v = scripted_verdict(q, &cfg.rule)?;
            labels.push(v.label);
            records.push(compose_instruction_record(q, &v, seed ^ (j as u64).rotate_left(17))?);
        }
        stats.add(spec.task.name(), &labels);
    }
    Ok(InstructionDataset { records, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskKind;
    use crate::expert::collect_mixed_quality;

    #[test]
    fn zero_pairs_gives_empty_dataset() {
        let spec = TaskSpec::new(TaskKind::Reach);
        let cfg = DatasetConfig {
            pairs_per_task: 0,
            ..Default::default()
        };
        let ds = generate_dataset(&[(spec, Vec::new())], &cfg).unwrap();
        assert!(ds.records.is_empty());
        assert_eq!(ds.stats.records, 0);
        assert_eq!(ds.stats.label_counts, [0, 0, 0]);
        assert_eq!(ds.stats.tie_fraction, 0.0);
    }

    #[test]
    fn insufficient_trajectories_names_task() {
        let spec = TaskSpec::new(TaskKind::DrawerOpen);
        let trajs = collect_mixed_quality(spec, 1, 32, 0);
        let err = generate_dataset(&[(spec, trajs)], &DatasetConfig::default()).unwrap_err();
        match err {
            CriticError::InsufficientTrajectories { task, .. } => assert_eq!(task, "drawer_open"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn counts_and_stats() {
        let tasks: Vec<_> = TaskKind::ALL
            .into_iter()
            .map(|k| {
                let spec = TaskSpec::new(k);
                (spec, collect_mixed_quality(spec, 6, 32, 1))
            })
            .collect();
        let cfg = DatasetConfig {
            pairs_per_task: 40,
            ..Default::default()
        };
        let ds = generate_dataset(&tasks, &cfg).unwrap();
        assert_eq!(ds.records.len(), 120);
        assert_eq!(ds.stats.records, 120);
        assert_eq!(ds.stats.per_task.len(), 3);
        assert_eq!(ds.stats.label_counts.iter().sum::<usize>(), 120);
        assert_eq!(ds.encode().unwrap(), generate_dataset(&tasks, &cfg).unwrap().encode().unwrap());
    }
}
