//! Builds an evaluation report from synthetic inputs and writes its CSVs.

use prefcritic::agent::{MetricRow, RewardSource};
use prefcritic::critic::Label;
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::eval::{emit_report, label_accuracy, return_distribution, success_rate_curve, EvalReport, ModelAccuracy, ReturnSource};
use prefcritic::expert::collect_mixed_quality;

fn main() {
    let truth = [Label::First, Label::Second, Label::Tie, Label::First, Label::Second];
    let pred = [Label::First, Label::First, Label::First, Label::First, Label::Second];
    let acc = label_accuracy("demo", &pred, &truth).unwrap();
    println!("accuracy {:.2} ({} of {} scored)", acc.accuracy, acc.correct, acc.total - acc.excluded);

    let rows: Vec<MetricRow> = (0..3u64)
        .flat_map(|seed| {
            (0..5).map(move |i| MetricRow {
                step: i * 1000,
                seed,
                success_rate: (i as f64 * 0.2 + seed as f64 * 0.05).min(1.0),
                mean_return: 0.0,
                reward_source: RewardSource::RewardModel,
            })
        })
        .collect();
    let curves = success_rate_curve(&rows).unwrap();
    for p in &curves {
        println!("step {:>5}: {:.2} +- {:.3}", p.step, p.mean, p.stderr);
    }

    let trajs = collect_mixed_quality(TaskSpec::new(TaskKind::Reach), 30, 32, 9);
    let returns = return_distribution(&trajs, &[ReturnSource::Expert, ReturnSource::Sparse], None).unwrap();
    for d in &returns {
        println!("{}: margin {:?}", d.source.name(), d.margin);
    }

    let report = EvalReport {
        accuracy: vec![ModelAccuracy { model: "demo".into(), reports: vec![acc] }],
        curves,
        returns,
    };
    let dir = tempfile::tempdir().unwrap();
    for f in emit_report(&report, dir.path()).unwrap() {
        println!("wrote {}", f.display());
    }
}
