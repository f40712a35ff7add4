//! Judgement accuracy, success-rate curves, return distributions and report
//! files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{MetricRow, RewardSource};
use crate::critic::scripted::{GroundTruthRule, SegmentFacts};
use crate::critic::{CriticError, CriticVerdict, Label, PreferenceQuery};
use crate::reward::RewardEnsemble;
use crate::trajectory::{Segment, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no comparable pairs: every pair has a tie on at least one side")]
    NoComparablePairs,
    #[error("no ground-truth label for query `{0}`")]
    MissingTruth(String),
    #[error("prediction and truth lists differ in length ({0} vs {1})")]
    Misaligned(usize, usize),
    #[error("seed {seed} of `{reward_source}` evaluates at steps {got:?}, expected {expected:?}")]
    MismatchedStepGrid {
        reward_source: String,
        seed: u64,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("the reward-model source needs a trained reward model")]
    MissingRewardModel,
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub split: String,
    pub total: usize,
    /// Pairs with a tie (0) in the prediction or the truth.
    pub excluded: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Accuracy of aligned label lists, excluding pairs where either side is a tie.
pub fn label_accuracy(split: &str, predicted: &[Label], truth: &[Label]) -> Result<AccuracyReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Misaligned(predicted.len(), truth.len()));
    }
    let mut excluded = 0;
    let mut correct = 0;
    for (p, t) in predicted.iter().zip(truth) {
        if *p == Label::Tie || *t == Label::Tie {
            excluded += 1;
        } else if p == t {
            correct += 1;
        }
    }
    let total = predicted.len();
    if total == excluded {
        return Err(EvalError::NoComparablePairs);
    }
    Ok(AccuracyReport {
        split: split.to_string(),
        total,
        excluded,
        correct,
        accuracy: correct as f64 / (total - excluded) as f64,
    })
}

/// Scores verdicts against ground truth matched by query id.
pub fn judgement_accuracy(
    split: &str,
    verdicts: &[CriticVerdict],
    truth: &[(String, Label)],
) -> Result<AccuracyReport, EvalError> {
    let truth: HashMap<&str, Label> = truth.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut pred = Vec::with_capacity(verdicts.len());
    let mut gt = Vec::with_capacity(verdicts.len());
    for v in verdicts {
        let t = truth
            .get(v.query_id.as_str())
            .ok_or_else(|| EvalError::MissingTruth(v.query_id.clone()))?;
        pred.push(v.label);
        gt.push(*t);
    }
    label_accuracy(split, &pred, &gt)
}

/// Comparable-performance pair: equal success status and an expert-return gap
/// strictly below the rule's return window.
pub fn is_hard_pair(a: &Segment, b: &Segment, rule: &GroundTruthRule) -> Result<bool, CriticError> {
    let fa = SegmentFacts::of(a)?;
    let fb = SegmentFacts::of(b)?;
    let window = rule.return_window(a.len().max(b.len()));
    Ok(fa.success == fb.success && (fa.expert_return - fb.expert_return).abs() < window)
}

pub fn hard_pair_filter<'a>(
    pairs: &'a [PreferenceQuery],
    rule: &GroundTruthRule,
) -> Result<Vec<&'a PreferenceQuery>, CriticError> {
    let mut out = Vec::new();
    for q in pairs {
        if is_hard_pair(&q.seg_a, &q.seg_b, rule)? {
            out.push(q);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub reward_source: RewardSource,
    pub step: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds divided by `sqrt(n)`; 0 when `n = 1`.
    pub stderr: f64,
    pub n: usize,
}

/// Per reward source and evaluation step: mean success rate and its
/// standard error across seeds. Every seed of a source must share one step grid.
pub fn success_rate_curve(rows: &[MetricRow]) -> Result<Vec<CurvePoint>, EvalError> {
    let mut by_source: BTreeMap<&str, (RewardSource, BTreeMap<u64, Vec<(usize, f64)>>)> = BTreeMap::new();
    for r in rows {
        by_source
            .entry(r.reward_source.name())
            .or_insert_with(|| (r.reward_source, BTreeMap::new()))
            .1
            .entry(r.seed)
            .or_default()
            .push((r.step, r.success_rate));
    }
    let mut out = Vec::new();
    for (name, (source, seeds)) in by_source {
        let mut grid: Option<Vec<usize>> = None;
        let mut per_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (seed, mut points) in seeds {
            points.sort_by_key(|p| p.0);
            let steps: Vec<usize> = points.iter().map(|p| p.0).collect();
            match &grid {
                None => grid = Some(steps),
                Some(g) if *g != steps => {
                    return Err(EvalError::MismatchedStepGrid {
                        reward_source: name.to_string(),
                        seed,
                        expected: g.clone(),
                        got: steps,
                    })
                }
                _ => {}
            }
            for (step, v) in points {
                per_step.entry(step).or_default().push(v);
            }
        }
        for (step, mut vals) in per_step {
            // sorted so the float sums do not depend on seed order
            vals.sort_by(f64::total_cmp);
            let (mean, stderr) = mean_stderr(&vals);
            out.push(CurvePoint {
                reward_source: source,
                step,
                mean,
                stderr,
                n: vals.len(),
            });
        }
    }
    Ok(out)
}

pub fn mean_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

/// Trapezoid area under one source's mean curve divided by its step span,
/// i.e. the time-averaged mean success rate. A single point returns its mean.
pub fn curve_auc(points: &[CurvePoint], source: RewardSource) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.reward_source == source)
        .map(|p| (p.step as f64, p.mean))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    match pts.len() {
        0 => None,
        1 => Some(pts[0].1),
        _ => {
            let area: f64 = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
            Some(area / (pts.last().unwrap().0 - pts[0].0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnSource {
    /// Shaped dense expert reward.
    Expert,
    /// Trained reward-model ensemble.
    Rm,
    /// Success indicator.
    Sparse,
}

impl ReturnSource {
    pub fn name(self) -> &'static str {
        match self {
            ReturnSource::Expert => "expert",
            ReturnSource::Rm => "rm",
            ReturnSource::Sparse => "sparse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnEntry {
    pub source: ReturnSource,
    pub trajectory_id: String,
    pub raw_return: f64,
    pub normalized: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnDistribution {
    pub source: ReturnSource,
    pub entries: Vec<ReturnEntry>,
    /// `min(normalized | success) - max(normalized | failure)`; `None` unless
    /// both groups are non-empty.
    pub margin: Option<f64>,
}

impl ReturnDistribution {
    pub fn successes(&self) -> usize {
        self.entries.iter().filter(|e| e.success).count()
    }

    pub fn failures(&self) -> usize {
        self.entries.len() - self.successes()
    }
}

/// Maps the set's minimum to 0 and maximum to 1; all zeros when the range is 0.
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect()
}

/// Builds a distribution from raw returns and success flags.
pub fn distribution_from_returns(
    source: ReturnSource,
    items: &[(String, f64, bool)],
) -> ReturnDistribution {
    let raw: Vec<f64> = items.iter().map(|i| i.1).collect();
    let norm = normalize_min_max(&raw);
    let entries: Vec<ReturnEntry> = items
        .iter()
        .zip(norm)
        .map(|((id, r, s), n)| ReturnEntry {
            source,
            trajectory_id: id.clone(),
            raw_return: *r,
            normalized: n,
            success: *s,
        })
        .collect();
    let min_s = entries.iter().filter(|e| e.success).map(|e| e.normalized).reduce(f64::min);
    let max_f = entries.iter().filter(|e| !e.success).map(|e| e.normalized).reduce(f64::max);
    let margin = match (min_s, max_f) {
        (Some(s), Some(f)) => Some(s - f),
        _ => None,
    };
    ReturnDistribution {
        source,
        entries,
        margin,
    }
}

/// Cumulative reward of every trajectory under each source, min-max
/// normalized over the set, with the success/failure margin.
pub fn return_distribution(
    trajs: &[Trajectory],
    sources: &[ReturnSource],
    rm: Option<&RewardEnsemble>,
) -> Result<Vec<ReturnDistribution>, EvalError> {
    let mut out = Vec::with_capacity(sources.len());
    for &source in sources {
        let mut items = Vec::with_capacity(trajs.len());
        for t in trajs {
            let r = match source {
                ReturnSource::Expert => t.transitions.iter().map(|x| x.info.expert_reward).sum(),
                ReturnSource::Sparse => t.transitions.iter().filter(|x| x.info.success).count() as f64,
                ReturnSource::Rm => {
                    let rm = rm.ok_or(EvalError::MissingRewardModel)?;
                    if t.is_empty() {
                        0.0
                    } else {
                        rm.segment_return(&t.segment(0, t.len()).expect("whole trajectory is in range"))
                    }
                }
            };
            items.push((t.id.clone(), r, t.success()));
        }
        out.push(distribution_from_returns(source, &items));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub model: String,
    pub reports: Vec<AccuracyReport>,
}

/// Everything `emit_report` writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rows of the accuracy grid (models), each with per-split reports.
    pub accuracy: Vec<ModelAccuracy>,
    pub curves: Vec<CurvePoint>,
    pub returns: Vec<ReturnDistribution>,
}

pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const ACCURACY_GRID_FILE: &str = "accuracy_grid.csv";
pub const CURVES_FILE: &str = "success_curves.csv";
pub const RETURNS_FILE: &str = "returns.csv";
pub const MARGINS_FILE: &str = "margins.csv";

#[derive(Debug, Serialize, Deserialize)]
struct AccuracyRow {
    model: String,
    split: String,
    total: usize,
    excluded: usize,
    correct: usize,
    accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MarginRow {
    source: ReturnSource,
    n_success: usize,
    n_failure: usize,
    margin: Option<f64>,
}

fn csv_bytes<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| e.to_string())?;
    for r in rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    w.into_inner().map_err(|e| e.to_string())
}

/// Table-1-shaped grid: one row per model, one column per split (in order of
/// first appearance), cells are accuracies or empty when a model lacks a split.
pub fn accuracy_grid(models: &[ModelAccuracy]) -> (Vec<String>, Vec<(String, Vec<Option<f64>>)>) {
    let mut splits: Vec<String> = Vec::new();
    for m in models {
        for r in &m.reports {
            if !splits.contains(&r.split) {
                splits.push(r.split.clone());
            }
        }
    }
    let rows = models
        .iter()
        .map(|m| {
            let cells = splits
                .iter()
                .map(|s| m.reports.iter().find(|r| &r.split == s).map(|r| r.accuracy))
                .collect();
            (m.model.clone(), cells)
        })
        .collect();
    (splits, rows)
}

/// Writes the five report files into `dir` and returns their paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Result<Vec<u8>, String>| -> Result<(), EvalError> {
        let path = dir.join(name);
        let bytes = bytes.map_err(|message| EvalError::Io {
            path: path.clone(),
            message,
        })?;
        crate::io::write_atomic(&path, &bytes).map_err(|e| EvalError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        written.push(path);
        Ok(())
    };

    let acc_rows = report.accuracy.iter().flat_map(|m| {
        m.reports.iter().map(|r| AccuracyRow {
            model: m.model.clone(),
            split: r.split.clone(),
            total: r.total,
            excluded: r.excluded,
            correct: r.correct,
            accuracy: r.accuracy,
        })
    });
    put(
        ACCURACY_FILE,
        csv_bytes(&["model", "split", "total", "excluded", "correct", "accuracy"], acc_rows),
    )?;

    let (splits, grid) = accuracy_grid(&report.accuracy);
    let grid_bytes = (|| {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(splits.iter().cloned());
        w.write_record(&header).map_err(|e| e.to_string())?;
        for (model, cells) in &grid {
            let mut rec = vec![model.clone()];
            rec.extend(cells.iter().map(|c| c.map(|v| format!("{v:.3}")).unwrap_or_default()));
            w.write_record(&rec).map_err(|e| e.to_string())?;
        }
        w.into_inner().map_err(|e| e.to_string())
    })();
    put(ACCURACY_GRID_FILE, grid_bytes)?;

    put(
        CURVES_FILE,
        csv_bytes(&["reward_source", "step", "mean", "stderr", "n"], &report.curves),
    )?;
    put(
        RETURNS_FILE,
        csv_bytes(
            &["source", "trajectory_id", "raw_return", "normalized", "success"],
            report.returns.iter().flat_map(|d| d.entries.iter()),
        ),
    )?;
    put(
        MARGINS_FILE,
        csv_bytes(
            &["source", "n_success", "n_failure", "margin"],
            report.returns.iter().map(|d| MarginRow {
                source: d.source,
                n_success: d.successes(),
                n_failure: d.failures(),
                margin: d.margin,
            }),
        ),
    )?;
    Ok(written)
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let err = |e: csv::Error| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .map(|r| r.map_err(err))
        .collect()
}

/// Reads back the long-format files written by [`emit_report`].
pub fn load_report(dir: &Path) -> Result<EvalReport, EvalError> {
    let mut accuracy: Vec<ModelAccuracy> = Vec::new();
    for r in read_csv::<AccuracyRow>(&dir.join(ACCURACY_FILE))? {
        let report = AccuracyReport {
            split: r.split,
            total: r.total,
            excluded: r.excluded,
            correct: r.correct,
            accuracy: r.accuracy,
        };
        match accuracy.iter_mut().find(|m| m.model == r.model) {
            Some(m) => m.reports.push(report),
            None => accuracy.push(ModelAccuracy {
                model: r.model,
                reports: vec![report],
            }),
        }
    }
    let curves = read_csv(&dir.join(CURVES_FILE))?;
    let entries: Vec<ReturnEntry> = read_csv(&dir.join(RETURNS_FILE))?;
    let margins: Vec<MarginRow> = read_csv(&dir.join(MARGINS_FILE))?;
    let returns = margins
        .into_iter()
        .map(|m| ReturnDistribution {
            source: m.source,
            entries: entries.iter().filter(|e| e.source == m.source).cloned().collect(),
            margin: m.margin,
        })
        .collect();
    Ok(EvalReport {
        accuracy,
        curves,
        returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, step: usize, s: f64) -> MetricRow {
        MetricRow {
            step,
            seed,
            success_rate: s,
            mean_return: 0.0,
            reward_source: RewardSource::RewardModel,
        }
    }

    #[test]
    fn accuracy_examples() {
        use Label::*;
        let r = label_accuracy("t", &[First, First, Second], &[First, Second, Second]).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        let r = label_accuracy("t", &[Tie, First], &[First, First]).unwrap();
        assert_eq!((r.accuracy, r.excluded), (1.0, 1));
        assert!(matches!(
            label_accuracy("t", &[Tie, First], &[First, Tie]),
            Err(EvalError::NoComparablePairs)
        ));
    }

    #[test]
    fn missing_truth_is_reported() {
        let v = CriticVerdict {
            query_id: "x".into(),
            analysis: String::new(),
            label: Label::First,
            source: crate::critic::CriticSource::Scripted,
            latency_ms: 0.0,
            retries: 0,
        };
        assert!(matches!(judgement_accuracy("s", &[v], &[]), Err(EvalError::MissingTruth(_))));
    }

    #[test]
    fn curve_examples() {
        let one = success_rate_curve(&[row(0, 0, 0.5)]).unwrap();
        assert_eq!((one[0].mean, one[0].stderr, one[0].n), (0.5, 0.0, 1));
        let three = success_rate_curve(&[row(0, 10, 1.0), row(1, 10, 1.0), row(2, 10, 0.4)]).unwrap();
        assert!((three[0].mean - 0.8).abs() < 1e-12);
        let sd = (((0.2f64).powi(2) * 2.0 + 0.4f64.powi(2)) / 2.0).sqrt();
        assert!((three[0].stderr - sd / 3f64.sqrt()).abs() < 1e-12);
        assert!((three[0].stderr - 0.2).abs() < 1e-3);
        let zeros = success_rate_curve(&[row(0, 0, 0.0), row(0, 5, 0.0), row(1, 0, 0.0), row(1, 5, 0.0)]).unwrap();
        assert!(zeros.iter().all(|p| p.mean == 0.0 && p.stderr == 0.0));
    }

    #[test]
    fn mismatched_grid_errors() {
        let err = success_rate_curve(&[row(0, 0, 0.0), row(0, 5, 0.0), row(1, 0, 0.0)]).unwrap_err();
        assert!(matches!(err, EvalError::MismatchedStepGrid { seed: 1, .. }));
    }

    #[test]
    fn auc_is_time_average() {
        let pts = success_rate_curve(&[row(0, 0, 0.0), row(0, 10, 1.0), row(0, 20, 1.0)]).unwrap();
        assert!((curve_auc(&pts, RewardSource::RewardModel).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(curve_auc(&pts, RewardSource::EnvSparse), None);
    }

    #[test]
    fn distribution_examples() {
        let d = distribution_from_returns(ReturnSource::Expert, &[("a".into(), 3.0, true), ("b".into(), 3.0, false)]);
        assert!(d.entries.iter().all(|e| e.normalized == 0.0));
        let d = distribution_from_returns(ReturnSource::Expert, &[("a".into(), 10.0, true), ("b".into(), 2.0, false)]);
        assert_eq!(d.entries[0].normalized, 1.0);
        assert_eq!(d.entries[1].normalized, 0.0);
        assert_eq!(d.margin, Some(1.0));
        let d = distribution_from_returns(ReturnSource::Rm, &[("a".into(), 1.0, true)]);
        assert_eq!(d.margin, None);
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&EvalReport::default(), dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        for f in files {
            let text = std::fs::read_to_string(&f).unwrap();
            assert_eq!(text.lines().count(), 1, "{}", f.display());
        }
        assert_eq!(load_report(dir.path()).unwrap(), EvalReport::default());
    }
}
