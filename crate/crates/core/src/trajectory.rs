//! Trajectory recording, segment slicing, query-pair sampling, replay storage
//! and reward relabeling.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvState, Observation, PrivilegedInfo, TaskKind, TaskSpec};
use crate::io::{self, RecordFileError};

/// Default segment length `H`.
pub const SEGMENT_LENGTH: usize = 32;
pub const TRAJECTORY_SCHEMA: &str = "prefcritic.trajectories";
pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("requested zero pairs")]
    NoPairsRequested,
    #[error("fewer than 2 trajectories available for pairing")]
    FewerThanTwoTrajectories,
    #[error("trajectory `{id}` has {len} transitions, shorter than segment length {segment_length}")]
    TooShort {
        id: String,
        len: usize,
        segment_length: usize,
    },
    #[error("segment [{start}, {start}+{len}) out of range for trajectory of length {available}")]
    SegmentOutOfRange {
        start: usize,
        len: usize,
        available: usize,
    },
    #[error("reward function returned non-finite value {value} at buffer index {index}")]
    NonFiniteReward { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: [f64; 2],
    /// Reward used for learning; replaced by relabeling.
    pub reward: f64,
    /// Environment reward recorded at collection time. Never relabeled.
    pub env_reward: f64,
    pub done: bool,
    pub next_obs: Observation,
    pub info: PrivilegedInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub task: TaskSpec,
    pub seed: u64,
    pub policy_tag: String,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn success(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.info.success)
    }

    pub fn expert_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.info.expert_reward).sum()
    }

    pub fn segment(&self, start: usize, len: usize) -> Result<Segment, TrajectoryError> {
        if start + len > self.transitions.len() {
            return Err(TrajectoryError::SegmentOutOfRange {
                start,
                len,
                available: self.transitions.len(),
            });
        }
        Ok(Segment {
            trajectory_id: self.id.clone(),
            task: self.task.task,
            start,
            transitions: self.transitions[start..start + len].to_vec(),
        })
    }
}

/// Contiguous slice of a trajectory; the operand of a preference query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub trajectory_id: String,
    pub task: TaskKind,
    pub start: usize,
    pub transitions: Vec<Transition>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn contains_success(&self) -> bool {
        self.transitions.iter().any(|t| t.info.success)
    }

    pub fn expert_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.info.expert_reward).sum()
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.transitions.last().map(|t| t.info.dist_to_target)
    }

    /// Frame references `<trajectory id>#<step>` in playback order.
    pub fn frame_refs(&self) -> Vec<String> {
        (self.start..self.start + self.len())
            .map(|i| format!("{}#{}", self.trajectory_id, i))
            .collect()
    }
}

/// Anything that can choose an action from an observation.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> [f64; 2];
}

impl<F: FnMut(&Observation) -> [f64; 2]> Policy for F {
    fn act(&mut self, obs: &Observation) -> [f64; 2] {
        self(obs)
    }
}

/// Rolls out one episode. Rewards are the dense expert reward of the
/// post-step state.
pub fn record_episode(
    spec: TaskSpec,
    seed: u64,
    policy: &mut dyn Policy,
    policy_tag: &str,
) -> Trajectory {
    let (mut state, mut obs) = env::reset(spec, seed);
    let mut transitions = Vec::with_capacity(spec.episode_length);
    while !state.is_done() {
        let action = policy.act(&obs);
        let out = state.step(action).expect("loop guard keeps episode open");
        let r = out.info.expert_reward;
        transitions.push(Transition {
            obs,
            action,
            reward: r,
            env_reward: r,
            done: out.done,
            next_obs: out.observation,
            info: out.info,
        });
        obs = out.observation;
    }
    Trajectory {
        id: format!("{}-s{seed}", spec.task.name()),
        task: spec,
        seed,
        policy_tag: policy_tag.to_string(),
        transitions,
    }
}

/// Replays recorded actions from a fresh reset, returning every visited state
/// (initial state first). Used to render frames without storing them.
pub fn replay_states(traj: &Trajectory) -> Vec<EnvState> {
    let (mut state, _) = env::reset(traj.task, traj.seed);
    let mut states = vec![state];
    for t in &traj.transitions {
        if state.step(t.action).is_err() {
            break;
        }
        states.push(state);
    }
    states
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    pub segment_length: usize,
    /// Allow both segments of a pair to come from the same trajectory.
    pub allow_self_pairing: bool,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            segment_length: SEGMENT_LENGTH,
            allow_self_pairing: false,
        }
    }
}

/// Draws `n` same-task segment pairs.
pub fn sample_segment_pairs(
    trajs: &[Trajectory],
    n: usize,
    sampling: PairSampling,
    seed: u64,
) -> Result<Vec<(Segment, Segment)>, TrajectoryError> {
    if n == 0 {
        return Err(TrajectoryError::NoPairsRequested);
    }
    let h = sampling.segment_length;
    if let Some(t) = trajs.iter().find(|t| t.len() < h) {
        return Err(TrajectoryError::TooShort {
            id: t.id.clone(),
            len: t.len(),
            segment_length: h,
        });
    }
    let mut by_task: BTreeMap<TaskKind, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajs {
        by_task.entry(t.task.task).or_default().push(t);
    }
    let min_group = if sampling.allow_self_pairing { 1 } else { 2 };
    let eligible: Vec<&Trajectory> = by_task
        .values()
        .filter(|g| g.len() >= min_group)
        .flat_map(|g| g.iter().copied())
        .collect();
    if eligible.is_empty() {
        return Err(TrajectoryError::FewerThanTwoTrajectories);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let a = *eligible.choose(&mut rng).unwrap();
        let group = &by_task[&a.task.task];
        let b = loop {
            let b = *group.choose(&mut rng).unwrap();
            if sampling.allow_self_pairing || !std::ptr::eq(a, b) {
                break b;
            }
        };
        let sa = rng.random_range(0..=a.len() - h);
        let sb = rng.random_range(0..=b.len() - h);
        pairs.push((a.segment(sa, h)?, b.segment(sb, h)?));
    }
    Ok(pairs)
}

/// Fixed-capacity FIFO ring of transitions.
///
/// Logical index 0 is the oldest stored transition. Share between one writer
/// and many readers through [`SharedReplayBuffer`]; readers holding the read
/// lock see a consistent snapshot.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

pub type SharedReplayBuffer = Arc<RwLock<ReplayBuffer>>;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    fn physical(&self, logical: usize) -> usize {
        if self.items.len() < self.capacity {
            logical
        } else {
            (self.cursor + logical) % self.capacity
        }
    }

    pub fn get(&self, logical: usize) -> Option<&Transition> {
        (logical < self.items.len()).then(|| &self.items[self.physical(logical)])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> + '_ {
        (0..self.items.len()).map(move |i| &self.items[self.physical(i)])
    }

    pub fn into_shared(self) -> SharedReplayBuffer {
        Arc::new(RwLock::new(self))
    }
}

/// Replaces every stored reward with `reward_fn(obs, action)`. Shadow
/// environment rewards are untouched. On a non-finite value nothing changes.
pub fn relabel_rewards(
    buffer: &mut ReplayBuffer,
    mut reward_fn: impl FnMut(&Observation, &[f64; 2]) -> f64,
) -> Result<usize, TrajectoryError> {
    let mut fresh = Vec::with_capacity(buffer.items.len());
    for (index, t) in buffer.iter().enumerate() {
        let value = reward_fn(&t.obs, &t.action);
        if !value.is_finite() {
            return Err(TrajectoryError::NonFiniteReward { index, value });
        }
        fresh.push(value);
    }
    for (logical, r) in fresh.into_iter().enumerate() {
        let p = buffer.physical(logical);
        buffer.items[p].reward = r;
    }
    Ok(buffer.items.len())
}

pub fn encode_trajectories(trajs: &[Trajectory]) -> Result<Vec<u8>, RecordFileError> {
    io::encode_records(TRAJECTORY_SCHEMA, TRAJECTORY_VERSION, trajs)
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<(), RecordFileError> {
    io::write_records(path, TRAJECTORY_SCHEMA, TRAJECTORY_VERSION, trajs)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, RecordFileError> {
    io::read_records(path, TRAJECTORY_SCHEMA, TRAJECTORY_VERSION)
}
