//! Deterministic kinematic 2D manipulation tasks.
//!
//! The workspace is the unit square. The end-effector ("tip") is moved by
//! velocity commands in `[-1, 1]²` scaled by `dt_scale`. Three tasks exist:
//!
//! | task                | reset ranges                                                      | success          |
//! |---------------------|-------------------------------------------------------------------|------------------|
//! | `reach`             | tip, goal ~ U[0.1, 0.9]², resampled until ‖tip − goal‖ ≥ 0.3      | ‖tip − goal‖ < 0.05 |
//! | `button_press_wall` | tip x ~ U[0.1, 0.9], y ~ U[0.05, 0.25]; button x ~ U[0.3, 0.7], y ~ U[0.75, 0.9]; horizontal wall at y ~ U[0.5, 0.6] spanning button.x ± 0.25 | depression ≥ 0.9 |
//! | `drawer_open`       | tip x ~ U[0.1, 0.9], y ~ U[0.05, 0.3]; closed handle x ~ U[0.3, 0.7], y ~ U[0.75, 0.9]; pulled along −y for 0.3 | extension ≥ 0.9 |
//!
//! The goal of `drawer_open` is the fully opened handle position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

pub const OBS_DIM: usize = 9;
pub const ACTION_DIM: usize = 2;
pub const CONTACT_RADIUS: f64 = 0.05;
pub const WALL_STANDOFF: f64 = 1e-3;
pub const DRAWER_TRAVEL: f64 = 0.3;
const DRAWER_AXIS: Point = [0.0, -1.0];
const BUTTON_PRESS_RATE: f64 = 0.1;
const BUTTON_DECAY_RATE: f64 = 0.05;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished at step {0}")]
    EpisodeOver(usize),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    ButtonPressWall,
    DrawerOpen,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Reach, TaskKind::ButtonPressWall, TaskKind::DrawerOpen];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::ButtonPressWall => "button_press_wall",
            TaskKind::DrawerOpen => "drawer_open",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach a goal position",
            TaskKind::ButtonPressWall => "bypass a wall and press a button",
            TaskKind::DrawerOpen => "open a drawer",
        }
    }

    pub fn default_success_threshold(self) -> f64 {
        match self {
            TaskKind::Reach => 0.05,
            TaskKind::ButtonPressWall | TaskKind::DrawerOpen => 0.9,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EnvError::InvalidSpec(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub episode_length: usize,
    pub dt_scale: f64,
    /// Distance bound for `reach`, progress bound for the other tasks.
    pub success_threshold: f64,
}

impl TaskSpec {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            episode_length: 128,
            dt_scale: 0.05,
            success_threshold: task.default_success_threshold(),
        }
    }

    pub fn description(&self) -> &'static str {
        self.task.description()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.episode_length < 2 {
            return Err(EnvError::InvalidSpec("episode_length must be >= 2".into()));
        }
        if !(self.dt_scale > 0.0) {
            return Err(EnvError::InvalidSpec("dt_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Fixed-length observation: tip (2), goal (2), task progress (1), wall
/// endpoints (4, zero when absent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedInfo {
    pub success: bool,
    pub dist_to_target: f64,
    pub expert_reward: f64,
    pub step_index: usize,
    #[serde(default)]
    pub action_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub spec: TaskSpec,
    pub tip: Point,
    pub goal: Point,
    /// Button depression or drawer extension in `[0, 1]`; zero for `reach`.
    pub progress: f64,
    pub wall: Option<[Point; 2]>,
    pub step_index: usize,
    pub rng_seed: u64,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub info: PrivilegedInfo,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    Dense,
    Sparse,
}

pub fn reset(spec: TaskSpec, seed: u64) -> (EnvState, Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((spec.task as u64) << 56));
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let state = match spec.task {
        TaskKind::Reach => {
            let tip = [u(0.1, 0.9), u(0.1, 0.9)];
            let mut goal = [u(0.1, 0.9), u(0.1, 0.9)];
            while dist(tip, goal) < 0.3 {
                goal = [u(0.1, 0.9), u(0.1, 0.9)];
            }
            EnvState::fresh(spec, seed, tip, goal, None)
        }
        TaskKind::ButtonPressWall => {
            let tip = [u(0.1, 0.9), u(0.05, 0.25)];
            let button = [u(0.3, 0.7), u(0.75, 0.9)];
            let wall_y = u(0.5, 0.6);
            let wall = [
                [(button[0] - 0.25).max(0.05), wall_y],
                [(button[0] + 0.25).min(0.95), wall_y],
            ];
            EnvState::fresh(spec, seed, tip, button, Some(wall))
        }
        TaskKind::DrawerOpen => {
            let tip = [u(0.1, 0.9), u(0.05, 0.3)];
            let closed = [u(0.3, 0.7), u(0.75, 0.9)];
            let goal = add(closed, scale(DRAWER_AXIS, DRAWER_TRAVEL));
            EnvState::fresh(spec, seed, tip, goal, None)
        }
    };
    let obs = state.observation();
    (state, obs)
}

/// Functional form of [`EnvState::step`].
pub fn step(state: &EnvState, action: [f64; 2]) -> Result<(EnvState, StepOutcome), EnvError> {
    let mut next = *state;
    let outcome = next.step(action)?;
    Ok((next, outcome))
}

impl EnvState {
    fn fresh(spec: TaskSpec, seed: u64, tip: Point, goal: Point, wall: Option<[Point; 2]>) -> Self {
        Self {
            spec,
            tip,
            goal,
            progress: 0.0,
            wall,
            step_index: 0,
            rng_seed: seed,
            success: false,
        }
    }

    /// Rebuilds a renderable state from an observation vector. Only the
    /// fields visible in the observation are meaningful.
    pub fn from_observation(spec: TaskSpec, obs: &Observation, step_index: usize) -> Self {
        let o = &obs.0;
        let wall = (spec.task == TaskKind::ButtonPressWall).then(|| [[o[5], o[6]], [o[7], o[8]]]);
        Self {
            spec,
            tip: [o[0], o[1]],
            goal: [o[2], o[3]],
            progress: o[4],
            wall,
            step_index,
            rng_seed: 0,
            success: false,
        }
    }

    pub fn observation(&self) -> Observation {
        let w = self.wall.unwrap_or([[0.0; 2]; 2]);
        Observation([
            self.tip[0],
            self.tip[1],
            self.goal[0],
            self.goal[1],
            self.progress,
            w[0][0],
            w[0][1],
            w[1][0],
            w[1][1],
        ])
    }

    /// Current drawer handle position (drawer task), otherwise the goal.
    pub fn target(&self) -> Point {
        match self.spec.task {
            TaskKind::DrawerOpen => {
                let closed = sub(self.goal, scale(DRAWER_AXIS, DRAWER_TRAVEL));
                add(closed, scale(DRAWER_AXIS, self.progress * DRAWER_TRAVEL))
            }
            _ => self.goal,
        }
    }

    pub fn dist_to_target(&self) -> f64 {
        dist(self.tip, self.target())
    }

    fn completion(&self) -> bool {
        match self.spec.task {
            TaskKind::Reach => self.dist_to_target() < self.spec.success_threshold,
            _ => self.progress >= self.spec.success_threshold,
        }
    }

    pub fn is_done(&self) -> bool {
        self.success || self.step_index >= self.spec.episode_length
    }

    pub fn privileged_info(&self, action_clamped: bool) -> PrivilegedInfo {
        PrivilegedInfo {
            success: self.success,
            dist_to_target: self.dist_to_target(),
            expert_reward: expert_reward(self),
            step_index: self.step_index,
            action_clamped,
        }
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome, EnvError> {
        if self.step_index >= self.spec.episode_length {
            return Err(EnvError::EpisodeOver(self.step_index));
        }
        let (action, clamped) = clamp_action(action);
        let handle_before = self.target();
        let engaged = dist(self.tip, handle_before) < CONTACT_RADIUS;

        let proposed = clamp_unit(add(self.tip, scale(action, self.spec.dt_scale)));
        let new_tip = match self.wall {
            Some(wall) => block_at_wall(self.tip, proposed, wall),
            None => proposed,
        };
        self.tip = new_tip;

        match self.spec.task {
            TaskKind::Reach => {}
            TaskKind::ButtonPressWall => {
                let delta = if dist(self.tip, self.goal) < CONTACT_RADIUS {
                    BUTTON_PRESS_RATE
                } else {
                    -BUTTON_DECAY_RATE
                };
                self.progress = (self.progress + delta).clamp(0.0, 1.0);
            }
            TaskKind::DrawerOpen => {
                if engaged {
                    let closed = sub(self.goal, scale(DRAWER_AXIS, DRAWER_TRAVEL));
                    let along = dot(sub(self.tip, closed), DRAWER_AXIS);
                    self.progress = (along / DRAWER_TRAVEL).clamp(0.0, 1.0);
                }
            }
        }

        self.step_index += 1;
        if !self.success && self.completion() {
            self.success = true;
        }
        let done = self.success || self.step_index == self.spec.episode_length;
        Ok(StepOutcome {
            observation: self.observation(),
            info: self.privileged_info(clamped),
            done,
        })
    }
}

/// Shaped dense reward in `[0, 1]`.
pub fn expert_reward(state: &EnvState) -> f64 {
    let shaped = 1.0 - (5.0 * state.dist_to_target()).tanh();
    match state.spec.task {
        TaskKind::Reach => shaped,
        TaskKind::ButtonPressWall | TaskKind::DrawerOpen => 0.5 * shaped + 0.5 * state.progress,
    }
}

pub fn sparse_reward(state: &EnvState) -> f64 {
    if state.success {
        1.0
    } else {
        0.0
    }
}

pub fn reward(state: &EnvState, variant: RewardVariant) -> f64 {
    match variant {
        RewardVariant::Dense => expert_reward(state),
        RewardVariant::Sparse => sparse_reward(state),
    }
}

fn clamp_action(action: [f64; 2]) -> ([f64; 2], bool) {
    let mut clamped = false;
    let mut out = [0.0; 2];
    for i in 0..2 {
        let a = action[i];
        out[i] = if a.is_nan() {
            clamped = true;
            0.0
        } else {
            let c = a.clamp(-1.0, 1.0);
            clamped |= c != a;
            c
        };
    }
    (out, clamped)
}

fn block_at_wall(from: Point, to: Point, wall: [Point; 2]) -> Point {
    let Some(t) = segment_intersection(from, to, wall[0], wall[1]) else {
        return to;
    };
    let motion = sub(to, from);
    let len = norm(motion);
    let travel = t * len - WALL_STANDOFF;
    if travel <= 0.0 || len == 0.0 {
        return from;
    }
    clamp_unit(add(from, scale(motion, travel / len)))
}

/// Parameter `t ∈ [0, 1]` along `p → p2` where it meets segment `q → q2`.
/// Parallel segments never intersect.
pub fn segment_intersection(p: Point, p2: Point, q: Point, q2: Point) -> Option<f64> {
    let r = sub(p2, p);
    let s = sub(q2, q);
    let denom = cross(r, s);
    if denom.abs() < 1e-15 {
        return None;
    }
    let qp = sub(q, p);
    let t = cross(qp, s) / denom;
    let u = cross(qp, r) / denom;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then_some(t)
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(a: Point, k: f64) -> Point {
    [a[0] * k, a[1] * k]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn clamp_unit(p: Point) -> Point {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

// Scene graphs for rendering and the labeling UI.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Circle { center: Point, radius: f64, color: String },
    Segment { p1: Point, p2: Point, color: String },
    Rect { min: Point, max: Point, color: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub task: TaskKind,
    pub step_index: usize,
    pub primitives: Vec<Primitive>,
}

const TIP_COLOR: &str = "#1f77b4";
const GOAL_COLOR: &str = "#2ca02c";
const WALL_COLOR: &str = "#7f7f7f";
const BUTTON_COLOR: &str = "#d62728";
const DRAWER_COLOR: &str = "#8c564b";

/// Drawing primitives in paint order. Pure function of the state.
///
/// - reach: goal circle, tip circle
/// - button_press_wall: button rect (shrinks with depression), wall segment, tip circle
/// - drawer_open: drawer body rect, handle circle, tip circle
pub fn render_frame(state: &EnvState) -> SceneGraph {
    let mut primitives = Vec::new();
    let circle = |c: Point, r: f64, color: &str| Primitive::Circle {
        center: c,
        radius: r,
        color: color.to_string(),
    };
    match state.spec.task {
        TaskKind::Reach => {
            primitives.push(circle(state.goal, state.spec.success_threshold, GOAL_COLOR));
        }
        TaskKind::ButtonPressWall => {
            let half = 0.04;
            let depth = 0.03 * (1.0 - state.progress);
            primitives.push(Primitive::Rect {
                min: [state.goal[0] - half, state.goal[1]],
                max: [state.goal[0] + half, state.goal[1] + depth + 0.01],
                color: BUTTON_COLOR.to_string(),
            });
            if let Some([a, b]) = state.wall {
                primitives.push(Primitive::Segment {
                    p1: a,
                    p2: b,
                    color: WALL_COLOR.to_string(),
                });
            }
        }
        TaskKind::DrawerOpen => {
            let handle = state.target();
            let closed = sub(state.goal, scale(DRAWER_AXIS, DRAWER_TRAVEL));
            primitives.push(Primitive::Rect {
                min: [closed[0] - 0.1, handle[1]],
                max: [closed[0] + 0.1, (closed[1] + 0.08).min(1.0)],
                color: DRAWER_COLOR.to_string(),
            });
            primitives.push(circle(handle, 0.02, GOAL_COLOR));
        }
    }
    primitives.push(circle(state.tip, 0.015, TIP_COLOR));
    SceneGraph {
        task: state.spec.task,
        step_index: state.step_index,
        primitives,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(g: &SceneGraph) -> (usize, usize, usize) {
        g.primitives.iter().fold((0, 0, 0), |(c, s, r), p| match p {
            Primitive::Circle { .. } => (c + 1, s, r),
            Primitive::Segment { .. } => (c, s + 1, r),
            Primitive::Rect { .. } => (c, s, r + 1),
        })
    }

    #[test]
    fn reset_is_deterministic() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            assert_eq!(reset(spec, 7), reset(spec, 7));
        }
    }

    #[test]
    fn reach_goal_depends_on_seed() {
        let spec = TaskSpec::new(TaskKind::Reach);
        assert_ne!(reset(spec, 0).0.goal, reset(spec, 1).0.goal);
    }

    #[test]
    fn drawer_starts_closed() {
        let (s, obs) = reset(TaskSpec::new(TaskKind::DrawerOpen), 3);
        assert_eq!(s.progress, 0.0);
        assert_eq!(obs.0[4], 0.0);
    }

    #[test]
    fn null_action_keeps_tip_and_decays_button() {
        let (mut s, _) = reset(TaskSpec::new(TaskKind::ButtonPressWall), 0);
        s.progress = 0.5;
        let tip = s.tip;
        s.step([0.0, 0.0]).unwrap();
        assert_eq!(s.tip, tip);
        assert!((s.progress - 0.45).abs() < 1e-12);
    }

    #[test]
    fn reach_step_moves_by_dt_scale() {
        let (mut s, _) = reset(TaskSpec::new(TaskKind::Reach), 0);
        s.tip = [0.5, 0.5];
        s.goal = [0.1, 0.1];
        s.step([1.0, 0.0]).unwrap();
        assert!((s.tip[0] - 0.55).abs() < 1e-12);
        assert!((s.tip[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_action_is_clamped_and_flagged() {
        let (mut s, _) = reset(TaskSpec::new(TaskKind::Reach), 0);
        s.tip = [0.5, 0.5];
        let out = s.step([3.0, -0.5]).unwrap();
        assert!(out.info.action_clamped);
        assert!((s.tip[0] - 0.55).abs() < 1e-12);
        assert!((s.tip[1] - 0.475).abs() < 1e-12);
    }

    #[test]
    fn wall_blocks_straight_motion() {
        let (mut s, _) = reset(TaskSpec::new(TaskKind::ButtonPressWall), 0);
        let wall = s.wall.unwrap();
        let wall_y = wall[0][1];
        let mid_x = 0.5 * (wall[0][0] + wall[1][0]);
        s.tip = [mid_x, wall_y - 0.02];
        s.step([0.0, 1.0]).unwrap();
        // oracle: vertical motion meets the horizontal wall at y = wall_y
        assert!((s.tip[0] - mid_x).abs() < 1e-12);
        assert!((s.tip[1] - (wall_y - WALL_STANDOFF)).abs() < 1e-12);
    }

    #[test]
    fn step_after_episode_end_errors() {
        let mut spec = TaskSpec::new(TaskKind::Reach);
        spec.episode_length = 2;
        let (mut s, _) = reset(spec, 0);
        s.step([0.0, 0.0]).unwrap();
        let out = s.step([0.0, 0.0]).unwrap();
        assert!(out.done);
        assert_eq!(s.step([0.0, 0.0]), Err(EnvError::EpisodeOver(2)));
    }

    #[test]
    fn expert_reward_closed_forms() {
        let (mut s, _) = reset(TaskSpec::new(TaskKind::Reach), 0);
        s.tip = s.goal;
        assert_eq!(expert_reward(&s), 1.0);
        s.tip = [s.goal[0] + 0.2, s.goal[1]];
        assert!((expert_reward(&s) - 0.2384).abs() < 1e-4);
        assert_eq!(sparse_reward(&s), 0.0);
    }

    #[test]
    fn scene_graph_primitive_counts() {
        let (s, _) = reset(TaskSpec::new(TaskKind::Reach), 4);
        assert_eq!(render_frame(&s), render_frame(&s));
        assert_eq!(count(&render_frame(&s)), (2, 0, 0));
        let (s, _) = reset(TaskSpec::new(TaskKind::ButtonPressWall), 4);
        assert_eq!(count(&render_frame(&s)).1, 1);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = TaskSpec::new(TaskKind::Reach);
        spec.episode_length = 1;
        assert!(spec.validate().is_err());
        spec.episode_length = 4;
        spec.dt_scale = 0.0;
        assert!(spec.validate().is_err());
    }
}
