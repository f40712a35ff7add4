//! Preference critics and the instruction-following dataset generator.
//!
//! Three interchangeable label sources produce a [`CriticVerdict`] for a
//! [`PreferenceQuery`]:
//!
//! - [`scripted`]: a rule over privileged simulator information,
//! - [`remote`]: an HTTP client for an external multimodal model,
//! - [`human`]: a lease-based queue drained by the labeling service.

pub mod dataset;
pub mod human;
pub mod prompt;
pub mod remote;
pub mod scripted;

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::env::{self, SceneGraph, TaskKind, TaskSpec};
use crate::trajectory::Segment;

pub use dataset::{generate_dataset, DatasetConfig, DatasetStats, InstructionDataset};
pub use human::{HumanQueue, QueueError};
pub use prompt::{compose_instruction_record, parse_verdict_text, InstructionRecord, PromptOrder};
pub use remote::{remote_verdict, RemoteConfig};
pub use scripted::{ground_truth_label, scripted_verdict, GroundTruthRule};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CriticError {
    #[error("segment `{0}` carries no usable privileged information")]
    MissingPrivilegedInfo(String),
    #[error("segments differ in task or length")]
    MismatchedSegments,
    #[error("verdict unavailable after {attempts} attempt(s): {reason}")]
    VerdictUnavailable { attempts: u32, reason: String },
    #[error("verdict for `{verdict}` does not belong to query `{query}`")]
    ForeignVerdict { query: String, verdict: String },
    #[error("not enough trajectories for task `{task}`: {reason}")]
    InsufficientTrajectories { task: String, reason: String },
    #[error(transparent)]
    Queue(#[from] QueueError),
}

/// Preference label `y`: 0 = tie, 1 = first segment better, 2 = second better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Tie,
    First,
    Second,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Tie, Label::First, Label::Second];

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Tie => 0,
            Label::First => 1,
            Label::Second => 2,
        }
    }

    /// Label for the same pair presented in swapped order.
    pub fn swapped(self) -> Self {
        match self {
            Label::Tie => Label::Tie,
            Label::First => Label::Second,
            Label::Second => Label::First,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Tie),
            1 => Ok(Label::First),
            2 => Ok(Label::Second),
            other => Err(format!("label must be 0, 1 or 2, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticSource {
    Scripted,
    Remote,
    Human,
}

impl std::str::FromStr for CriticSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(CriticSource::Scripted),
            "remote" => Ok(CriticSource::Remote),
            "human" => Ok(CriticSource::Human),
            other => Err(format!("unknown critic backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceQuery {
    pub id: String,
    pub task: TaskKind,
    pub seg_a: Segment,
    pub seg_b: Segment,
    pub question: String,
    pub instruction: String,
    pub created_at_ms: u64,
}

impl PreferenceQuery {
    pub fn new(id: impl Into<String>, seg_a: Segment, seg_b: Segment) -> Result<Self, CriticError> {
        if seg_a.task != seg_b.task || seg_a.len() != seg_b.len() {
            return Err(CriticError::MismatchedSegments);
        }
        let task = seg_a.task;
        Ok(Self {
            id: id.into(),
            task,
            question: prompt::question_text(task),
            instruction: prompt::INSTRUCTION_TEXT.to_string(),
            seg_a,
            seg_b,
            created_at_ms: now_ms(),
        })
    }

    /// Rendered frames of both segments, one scene graph per transition
    /// (post-step state).
    pub fn frames(&self) -> (Vec<SceneGraph>, Vec<SceneGraph>) {
        (segment_frames(&self.seg_a), segment_frames(&self.seg_b))
    }
}

pub fn segment_frames(seg: &Segment) -> Vec<SceneGraph> {
    let spec = TaskSpec::new(seg.task);
    seg.transitions
        .iter()
        .map(|t| env::render_frame(&env::EnvState::from_observation(spec, &t.next_obs, t.info.step_index)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub query_id: String,
    pub analysis: String,
    pub label: Label,
    pub source: CriticSource,
    pub latency_ms: f64,
    /// Transport or parse retries spent before this verdict (remote only).
    #[serde(default)]
    pub retries: u32,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
