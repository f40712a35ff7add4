//! Rule-based critic over privileged simulator information.
//!
//! Lexicographic rule, applied to segments `a` (first) and `b` (second):
//!
//! 1. a segment that contains a success step beats one that does not;
//! 2. otherwise compare expert-return sums; a gap below
//!    `tie_epsilon * max_step_reward * H` is inconclusive;
//! 3. otherwise compare final distance to the target; a gap below
//!    `tie_epsilon * max_distance` is a tie.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{CriticError, CriticSource, CriticVerdict, Label, PreferenceQuery};
use crate::trajectory::Segment;

/// Largest per-step expert reward.
pub const MAX_STEP_REWARD: f64 = 1.0;
/// Diagonal of the unit workspace.
pub const MAX_DISTANCE: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRule {
    /// Fraction of the maximum segment return (and of the maximum distance)
    /// below which two segments count as equal.
    pub tie_epsilon: f64,
}

impl Default for GroundTruthRule {
    fn default() -> Self {
        Self { tie_epsilon: 0.05 }
    }
}

impl GroundTruthRule {
    pub fn return_window(&self, segment_length: usize) -> f64 {
        self.tie_epsilon * MAX_STEP_REWARD * segment_length as f64
    }

    pub fn distance_window(&self) -> f64 {
        self.tie_epsilon * MAX_DISTANCE
    }
}

/// Privileged facts the rule consumes for one segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFacts {
    pub success: bool,
    pub expert_return: f64,
    pub final_distance: f64,
}

impl SegmentFacts {
    pub fn of(seg: &Segment) -> Result<Self, CriticError> {
        let missing = || CriticError::MissingPrivilegedInfo(seg.trajectory_id.clone());
        let final_distance = seg.final_distance().ok_or_else(missing)?;
        let expert_return = seg.expert_return();
        if !final_distance.is_finite() || !expert_return.is_finite() {
            return Err(missing());
        }
        Ok(Self {
            success: seg.contains_success(),
            expert_return,
            final_distance,
        })
    }
}

/// Which clause of the rule decided the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deciding {
    Success,
    Return,
    Distance,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleOutcome {
    pub label: Label,
    pub clause: Deciding,
    pub first: SegmentFacts,
    pub second: SegmentFacts,
}

pub fn ground_truth_label(a: &Segment, b: &Segment, rule: &GroundTruthRule) -> Result<RuleOutcome, CriticError> {
    let fa = SegmentFacts::of(a)?;
    let fb = SegmentFacts::of(b)?;
    let h = a.len().max(b.len());
    let (label, clause) = if fa.success != fb.success {
        (if fa.success { Label::First } else { Label::Second }, Deciding::Success)
    } else {
        let dr = fa.expert_return - fb.expert_return;
        if dr.abs() >= rule.return_window(h) {
            (if dr > 0.0 { Label::First } else { Label::Second }, Deciding::Return)
        } else {
            let dd = fa.final_distance - fb.final_distance;
            if dd.abs() >= rule.distance_window() {
                (if dd < 0.0 { Label::First } else { Label::Second }, Deciding::Distance)
            } else {
                (Label::Tie, Deciding::Tie)
            }
        }
    };
    Ok(RuleOutcome {
        label,
        clause,
        first: fa,
        second: fb,
    })
}

pub fn scripted_verdict(q: &PreferenceQuery, rule: &GroundTruthRule) -> Result<CriticVerdict, CriticError> {
    let started = Instant::now();
    let outcome = ground_truth_label(&q.seg_a, &q.seg_b, rule)?;
    let analysis = analysis_text(&outcome, rule, q.seg_a.len().max(q.seg_b.len()));
    Ok(CriticVerdict {
        query_id: q.id.clone(),
        analysis,
        label: outcome.label,
        source: CriticSource::Scripted,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
        retries: 0,
    })
}

fn describe(out: &mut String, ordinal: &str, f: &SegmentFacts) {
    let _ = write!(
        out,
        "The {ordinal} trajectory {} the task. Its cumulative reward is {:.2} and it ends {:.3} away from the target. ",
        if f.success { "completes" } else { "does not complete" },
        f.expert_return,
        f.final_distance
    );
}

/// Step-by-step analysis linking privileged facts to the preference.
pub fn analysis_text(outcome: &RuleOutcome, rule: &GroundTruthRule, segment_length: usize) -> String {
    let mut s = String::new();
    describe(&mut s, "first", &outcome.first);
    describe(&mut s, "second", &outcome.second);
    let (a, b) = (&outcome.first, &outcome.second);
    let winner = match outcome.label {
        Label::First => "first",
        Label::Second => "second",
        Label::Tie => "",
    };
    let _ = match outcome.clause {
        Deciding::Success => write!(s, "Only the {winner} trajectory completes the task, so it is better."),
        Deciding::Return => write!(
            s,
            "{} completes the task, and the {winner} trajectory collects clearly more reward ({:.2} vs {:.2}), so it is better.",
            if a.success { "Each trajectory" } else { "Neither trajectory" },
            a.expert_return.max(b.expert_return),
            a.expert_return.min(b.expert_return)
        ),
        Deciding::Distance => write!(
            s,
            "Their rewards are comparable (difference {:.2}, below {:.2}), but the {winner} trajectory ends closer to the target, so it is better.",
            (a.expert_return - b.expert_return).abs(),
            rule.return_window(segment_length)
        ),
        Deciding::Tie => write!(
            s,
            "Their rewards and final distances are comparable, so the two trajectories perform similarly."
        ),
    };
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, TaskKind, TaskSpec};
    use crate::trajectory::Transition;

    fn segment(rewards: &[f64], success_at_end: bool, final_distance: f64) -> Segment {
        let (s, obs) = env::reset(TaskSpec::new(TaskKind::Reach), 0);
        let n = rewards.len();
        let transitions = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let mut info = s.privileged_info(false);
                info.expert_reward = r;
                info.step_index = i + 1;
                info.dist_to_target = if i + 1 == n { final_distance } else { 0.5 };
                info.success = success_at_end && i + 1 == n;
                Transition {
                    obs,
                    action: [0.0, 0.0],
                    reward: r,
                    env_reward: r,
                    done: info.success,
                    next_obs: obs,
                    info,
                }
            })
            .collect();
        Segment {
            trajectory_id: "t".into(),
            task: TaskKind::Reach,
            start: 0,
            transitions,
        }
    }

    fn query(a: Segment, b: Segment) -> PreferenceQuery {
        PreferenceQuery::new("q", a, b).unwrap()
    }

    #[test]
    fn success_beats_failure() {
        let a = segment(&[0.1; 32], true, 0.01);
        let b = segment(&[0.9; 32], false, 0.3);
        let v = scripted_verdict(&query(a, b), &GroundTruthRule::default()).unwrap();
        assert_eq!(v.label, Label::First);
        assert!(v.analysis.contains("Only the first trajectory completes the task"));
    }

    #[test]
    fn return_gap_beyond_window_decides() {
        // 12.0 vs 8.0 over 32 steps; window 0.05 * 32 = 1.6
        let a = segment(&[12.0 / 32.0; 32], false, 0.4);
        let b = segment(&[8.0 / 32.0; 32], false, 0.1);
        let rule = GroundTruthRule::default();
        assert!((rule.return_window(32) - 1.6).abs() < 1e-12);
        let out = ground_truth_label(&a, &b, &rule).unwrap();
        assert_eq!(out.label, Label::First);
        assert_eq!(out.clause, Deciding::Return);
    }

    #[test]
    fn comparable_returns_fall_back_to_distance() {
        let a = segment(&[0.3; 32], false, 0.4);
        let b = segment(&[0.31; 32], false, 0.1);
        let out = ground_truth_label(&a, &b, &GroundTruthRule::default()).unwrap();
        assert_eq!(out.label, Label::Second);
        assert_eq!(out.clause, Deciding::Distance);
    }

    #[test]
    fn identical_segments_tie() {
        let a = segment(&[0.3; 32], false, 0.2);
        let v = scripted_verdict(&query(a.clone(), a), &GroundTruthRule::default()).unwrap();
        assert_eq!(v.label, Label::Tie);
    }

    #[test]
    fn non_finite_info_is_missing() {
        let a = segment(&[f64::NAN; 32], false, 0.2);
        let b = segment(&[0.3; 32], false, 0.2);
        assert!(matches!(
            scripted_verdict(&query(a, b), &GroundTruthRule::default()),
            Err(CriticError::MissingPrivilegedInfo(_))
        ));
    }
}
