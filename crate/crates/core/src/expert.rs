//! Scripted controllers and mixed-quality trajectory collection.
//!
//! The controllers read only the observation vector. Quality is varied by
//! slowing them down, adding Gaussian action noise, or aiming them at a point
//! offset from the true target (near misses).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{Observation, Point, TaskKind, TaskSpec, DRAWER_TRAVEL};
use crate::trajectory::{record_episode, Policy, Trajectory};

const WALL_CLEARANCE: f64 = 0.07;

/// Proportional controller that solves each task when `offset` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedExpert {
    pub task: TaskKind,
    pub dt_scale: f64,
    /// Added to the final target point.
    pub offset: Point,
}

impl ScriptedExpert {
    pub fn new(spec: TaskSpec) -> Self {
        Self {
            task: spec.task,
            dt_scale: spec.dt_scale,
            offset: [0.0, 0.0],
        }
    }

    fn toward(&self, tip: Point, target: Point) -> [f64; 2] {
        [
            ((target[0] - tip[0]) / self.dt_scale).clamp(-1.0, 1.0),
            ((target[1] - tip[1]) / self.dt_scale).clamp(-1.0, 1.0),
        ]
    }

    fn shifted(&self, p: Point) -> Point {
        [p[0] + self.offset[0], p[1] + self.offset[1]]
    }

    pub fn action(&self, obs: &Observation) -> [f64; 2] {
        let o = &obs.0;
        let tip = [o[0], o[1]];
        let goal = [o[2], o[3]];
        match self.task {
            TaskKind::Reach => self.toward(tip, self.shifted(goal)),
            TaskKind::ButtonPressWall => {
                let wall = [[o[5], o[6]], [o[7], o[8]]];
                let target = self.shifted(goal);
                self.toward(tip, wall_waypoint(tip, target, wall))
            }
            TaskKind::DrawerOpen => {
                let progress = o[4];
                let handle = [goal[0], goal[1] + (1.0 - progress) * DRAWER_TRAVEL];
                let handle = self.shifted(handle);
                let dx = handle[0] - tip[0];
                let dy = handle[1] - tip[1];
                if (dx * dx + dy * dy).sqrt() < 0.03 {
                    // engaged: pull along -y, keep lateral alignment
                    [(dx / self.dt_scale).clamp(-1.0, 1.0), -1.0]
                } else {
                    self.toward(tip, handle)
                }
            }
        }
    }
}

/// Next waypoint that routes around a horizontal wall lying between the tip
/// and a target above it.
fn wall_waypoint(tip: Point, target: Point, wall: [Point; 2]) -> Point {
    let wall_y = wall[0][1];
    let (left, right) = (wall[0][0].min(wall[1][0]), wall[0][0].max(wall[1][0]));
    if tip[1] > wall_y + 0.04 || target[1] < wall_y {
        return target;
    }
    let left_corner = left - WALL_CLEARANCE;
    let right_corner = right + WALL_CLEARANCE;
    let left_ok = left_corner >= 0.01;
    let right_ok = right_corner <= 0.99;
    let corner_x = match (left_ok, right_ok) {
        (true, true) => {
            if (tip[0] - left_corner).abs() <= (tip[0] - right_corner).abs() {
                left_corner
            } else {
                right_corner
            }
        }
        (true, false) => left_corner,
        _ => right_corner,
    };
    let outside = tip[0] <= left - 0.03 || tip[0] >= right + 0.03;
    if outside {
        [corner_x, wall_y + 0.08]
    } else {
        [corner_x, (wall_y - 0.05).min(tip[1].max(wall_y - 0.3))]
    }
}

/// How a degraded controller behaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityProfile {
    pub tag: QualityTag,
    /// Scale on the scripted action.
    pub gain: f64,
    pub noise_std: f64,
    pub offset: Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityTag {
    Skilled,
    NearMiss,
    Sloppy,
    Random,
}

impl QualityTag {
    pub fn name(self) -> &'static str {
        match self {
            QualityTag::Skilled => "skilled",
            QualityTag::NearMiss => "near_miss",
            QualityTag::Sloppy => "sloppy",
            QualityTag::Random => "random",
        }
    }
}

impl QualityProfile {
    pub fn expert() -> Self {
        Self {
            tag: QualityTag::Skilled,
            gain: 1.0,
            noise_std: 0.0,
            offset: [0.0, 0.0],
        }
    }

    /// Mixture: 30% skilled, 30% near-miss, 20% sloppy, 20% random.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let u: f64 = rng.random();
        if u < 0.3 {
            Self {
                tag: QualityTag::Skilled,
                gain: rng.random_range(0.3..1.0),
                noise_std: rng.random_range(0.0..0.3),
                offset: [0.0, 0.0],
            }
        } else if u < 0.6 {
            let radius = rng.random_range(0.06..0.2);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Self {
                tag: QualityTag::NearMiss,
                gain: rng.random_range(0.3..1.0),
                noise_std: rng.random_range(0.0..0.3),
                offset: [radius * angle.cos(), radius * angle.sin()],
            }
        } else if u < 0.8 {
            Self {
                tag: QualityTag::Sloppy,
                gain: rng.random_range(0.1..0.5),
                noise_std: rng.random_range(0.3..1.0),
                offset: [0.0, 0.0],
            }
        } else {
            Self {
                tag: QualityTag::Random,
                gain: 0.0,
                noise_std: rng.random_range(0.5..1.0),
                offset: [0.0, 0.0],
            }
        }
    }
}

/// Scripted expert degraded by a [`QualityProfile`].
pub struct NoisyExpert {
    expert: ScriptedExpert,
    profile: QualityProfile,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl NoisyExpert {
    pub fn new(spec: TaskSpec, profile: QualityProfile, seed: u64) -> Self {
        let mut expert = ScriptedExpert::new(spec);
        expert.offset = profile.offset;
        Self {
            expert,
            profile,
            noise: Normal::new(0.0, profile.noise_std.max(0.0)).expect("finite std"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for NoisyExpert {
    fn act(&mut self, obs: &Observation) -> [f64; 2] {
        let a = self.expert.action(obs);
        let mut out = [0.0; 2];
        for i in 0..2 {
            let eps = if self.profile.noise_std > 0.0 {
                self.noise.sample(&mut self.rng)
            } else {
                0.0
            };
            out[i] = (self.profile.gain * a[i] + eps).clamp(-1.0, 1.0);
        }
        out
    }
}

impl Policy for ScriptedExpert {
    fn act(&mut self, obs: &Observation) -> [f64; 2] {
        self.action(obs)
    }
}

/// Collects `count` trajectories of mixed quality, each at least `min_len`
/// transitions long. Shorter rollouts are discarded and replaced. Episode
/// seeds are drawn from `seed`, so the result is deterministic.
pub fn collect_mixed_quality(spec: TaskSpec, count: usize, min_len: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c011_ec70);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let max_attempts = count.saturating_mul(50).max(100);
    while out.len() < count && attempts < max_attempts {
        attempts += 1;
        let profile = QualityProfile::sample(&mut rng);
        let episode_seed: u64 = rng.random();
        let mut policy = NoisyExpert::new(spec, profile, episode_seed.wrapping_add(1));
        let mut traj = record_episode(spec, episode_seed, &mut policy, profile.tag.name());
        if traj.len() >= min_len {
            traj.id = format!("{}-{:04}", spec.task.name(), out.len());
            out.push(traj);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_expert_solves_every_task() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            let mut solved = 0;
            for seed in 0..20 {
                let mut expert = ScriptedExpert::new(spec);
                if record_episode(spec, seed, &mut expert, "expert").success() {
                    solved += 1;
                }
            }
            assert_eq!(solved, 20, "{kind}");
        }
    }

    #[test]
    fn near_miss_fails_reach() {
        let spec = TaskSpec::new(TaskKind::Reach);
        let mut expert = ScriptedExpert::new(spec);
        expert.offset = [0.08, 0.0];
        assert!(!record_episode(spec, 1, &mut expert, "miss").success());
    }

    #[test]
    fn mixed_quality_has_both_outcomes() {
        for kind in TaskKind::ALL {
            let trajs = collect_mixed_quality(TaskSpec::new(kind), 60, 32, 0);
            assert_eq!(trajs.len(), 60);
            assert!(trajs.iter().all(|t| t.len() >= 32));
            let successes = trajs.iter().filter(|t| t.success()).count();
            assert!(successes > 0 && successes < 60, "{kind}: {successes}");
        }
    }
}
