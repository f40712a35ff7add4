//! Labels segment pairs with the scripted critic and writes an instruction
//! dataset: `cargo run --example scripted_dataset -- out.jsonl`.

use prefcritic::critic::dataset::build_queries;
use prefcritic::critic::{generate_dataset, scripted_verdict, DatasetConfig, GroundTruthRule};
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::expert::collect_mixed_quality;
use prefcritic::trajectory::PairSampling;

fn main() {
    let spec = TaskSpec::new(TaskKind::ButtonPressWall);
    let trajs = collect_mixed_quality(spec, 30, 32, 11);
    let queries = build_queries(&spec, &trajs, 3, PairSampling::default(), 5, "demo").unwrap();
    let rule = GroundTruthRule::default();
    for q in &queries {
        let v = scripted_verdict(q, &rule).unwrap();
        println!("{} -> label {}\n  {}", q.id, v.label.as_u8(), v.analysis);
    }

    let tasks: Vec<_> = TaskKind::ALL
        .into_iter()
        .map(|k| {
            let spec = TaskSpec::new(k);
            (spec, collect_mixed_quality(spec, 30, 32, 20))
        })
        .collect();
    let cfg = DatasetConfig {
        pairs_per_task: 200,
        seed: 1,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(&tasks, &cfg).unwrap();
    for t in &ds.stats.per_task {
        println!("{:<18} {} records, tie fraction {:.3}", t.task, t.records, t.tie_fraction);
    }
    if let Some(path) = std::env::args().nth(1) {
        ds.write(path.as_ref()).unwrap();
        println!("wrote {} records to {path}", ds.records.len());
    }
}
