//! Prompt templates, instruction-record composition and verdict parsing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CriticError, CriticVerdict, Label, PreferenceQuery};
use crate::env::TaskKind;

/// Placeholder for the frame sequence inside a rendered human turn.
pub const VIDEO_TOKEN: &str = "<video>";

pub const INSTRUCTION_TEXT: &str = "Reason step by step: state whether each segment completes the task, \
how much progress it makes, and how close it ends to the target. Then give your verdict on a final line \
of the form `Evaluation: N`, where N is 1 if the first segment is better, 2 if the second segment is \
better, or 0 if they perform about the same.";

pub fn question_text(task: TaskKind) -> String {
    format!(
        "Two trajectory segments of a robot end-effector are shown, the first followed by the second. \
Both attempt the same task: {}. Which segment performs the task better?",
        task.description()
    )
}

pub fn evaluation_text(label: Label) -> String {
    format!("Evaluation: {}", label.as_u8())
}

/// Extracts the final label from critic output.
///
/// The last line containing `evaluation:` (any case) is the evaluation line;
/// if there is none and the text is a single line, that line is used. The
/// first digit on the evaluation line must be 0, 1 or 2.
pub fn parse_verdict_text(text: &str) -> Option<Label> {
    let marker = "evaluation:";
    let lower = text.to_ascii_lowercase();
    let line = match lower.rfind(marker) {
        Some(pos) => {
            let rest = &text[pos + marker.len()..];
            rest.lines().next().unwrap_or("")
        }
        None => {
            let trimmed = text.trim();
            if trimmed.lines().count() != 1 {
                return None;
            }
            trimmed
        }
    };
    let digit = line.chars().find(|c| c.is_ascii_digit())?;
    Label::try_from(digit.to_digit(10)? as u8).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    /// `[video, question, instruction]`
    VideoFirst,
    /// `[question, instruction, video]`
    VideoLast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRef {
    pub first: Vec<String>,
    pub second: Vec<String>,
}

/// One single-turn instruction-following sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub video_ref: VideoRef,
    pub question: String,
    pub instruction: String,
    pub analysis: String,
    pub evaluation: String,
    pub prompt_order: PromptOrder,
}

impl InstructionRecord {
    /// The human turn with the video placeholder in its sampled position.
    pub fn human_turn(&self) -> String {
        match self.prompt_order {
            PromptOrder::VideoFirst => format!("{VIDEO_TOKEN}\n{}\n{}", self.question, self.instruction),
            PromptOrder::VideoLast => format!("{}\n{}\n{VIDEO_TOKEN}", self.question, self.instruction),
        }
    }

    pub fn assistant_turn(&self) -> String {
        format!("{}\n{}", self.analysis, self.evaluation)
    }
}

pub fn compose_instruction_record(
    q: &PreferenceQuery,
    v: &CriticVerdict,
    seed: u64,
) -> Result<InstructionRecord, CriticError> {
    if v.query_id != q.id {
        return Err(CriticError::ForeignVerdict {
            query: q.id.clone(),
            verdict: v.query_id.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt_order = if rng.random_bool(0.5) {
        PromptOrder::VideoFirst
    } else {
        PromptOrder::VideoLast
    };
    Ok(InstructionRecord {
        video_ref: VideoRef {
            first: q.seg_a.frame_refs(),
            second: q.seg_b.frame_refs(),
        },
        question: q.question.clone(),
        instruction: q.instruction.clone(),
        analysis: v.analysis.clone(),
        evaluation: evaluation_text(v.label),
        prompt_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticSource;
    use crate::env::TaskSpec;
    use crate::trajectory::record_episode;

    fn query() -> PreferenceQuery {
        let spec = TaskSpec::new(TaskKind::ButtonPressWall);
        let mut zero = |_: &crate::env::Observation| [0.0, 0.0];
        let t = record_episode(spec, 0, &mut zero, "z");
        PreferenceQuery::new("q-1", t.segment(0, 32).unwrap(), t.segment(40, 32).unwrap()).unwrap()
    }

    fn verdict(label: Label) -> CriticVerdict {
        CriticVerdict {
            query_id: "q-1".into(),
            analysis: "because".into(),
            label,
            source: CriticSource::Scripted,
            latency_ms: 0.0,
            retries: 0,
        }
    }

    #[test]
    fn parses_labels() {
        assert_eq!(parse_verdict_text("Analysis: blah 3 things.\nEvaluation: 1"), Some(Label::First));
        assert_eq!(parse_verdict_text("evaluation: 2 (second)"), Some(Label::Second));
        assert_eq!(parse_verdict_text("0"), Some(Label::Tie));
        assert_eq!(parse_verdict_text("Evaluation: the first one"), None);
        assert_eq!(parse_verdict_text("Evaluation: 7"), None);
        assert_eq!(parse_verdict_text("line one\nline two 1"), None);
    }

    #[test]
    fn evaluation_round_trips() {
        for l in Label::ALL {
            assert_eq!(parse_verdict_text(&evaluation_text(l)), Some(l));
        }
    }

    #[test]
    fn compose_is_deterministic_and_embeds_task() {
        let q = query();
        let r1 = compose_instruction_record(&q, &verdict(Label::Second), 17).unwrap();
        let r2 = compose_instruction_record(&q, &verdict(Label::Second), 17).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.question.contains("bypass a wall and press a button"));
        assert!(r1.instruction.contains("Evaluation: N"));
        assert_eq!(parse_verdict_text(&r1.evaluation), Some(Label::Second));
        assert_eq!(r1.video_ref.first.len(), 32);
        assert_eq!(r1.video_ref.second[0], "button_press_wall-s0#40");
    }

    #[test]
    fn prompt_order_is_roughly_balanced() {
        let q = query();
        let v = verdict(Label::First);
        let first = (0..1000)
            .filter(|&s| compose_instruction_record(&q, &v, s).unwrap().prompt_order == PromptOrder::VideoFirst)
            .count();
        let freq = first as f64 / 1000.0;
        assert!((0.42..=0.58).contains(&freq), "{freq}");
    }

    #[test]
    fn human_turn_places_video() {
        let q = query();
        let mut r = compose_instruction_record(&q, &verdict(Label::Tie), 0).unwrap();
        r.prompt_order = PromptOrder::VideoFirst;
        assert!(r.human_turn().starts_with(VIDEO_TOKEN));
        r.prompt_order = PromptOrder::VideoLast;
        assert!(r.human_turn().ends_with(VIDEO_TOKEN));
    }

    #[test]
    fn foreign_verdict_rejected() {
        let q = query();
        let mut v = verdict(Label::Tie);
        v.query_id = "other".into();
        assert!(compose_instruction_record(&q, &v, 0).is_err());
    }
}
