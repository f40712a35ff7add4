//! Trains a small reward-model ensemble on scripted labels and checks it on
//! fresh pairs.

use prefcritic::critic::dataset::build_queries;
use prefcritic::critic::{scripted_verdict, GroundTruthRule};
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::expert::collect_mixed_quality;
use prefcritic::reward::{preference_accuracy, train_reward_model, PreferenceDataset, PreferenceItem, RmTrainConfig};
use prefcritic::trajectory::PairSampling;

fn items(spec: &TaskSpec, seed: u64, n: usize) -> Vec<PreferenceItem> {
    let rule = GroundTruthRule::default();
    let trajs = collect_mixed_quality(*spec, 60, 32, seed);
    build_queries(spec, &trajs, n, PairSampling::default(), seed, "ex")
        .unwrap()
        .iter()
        .map(|q| PreferenceItem::from_verdict(q, &scripted_verdict(q, &rule).unwrap()))
        .collect()
}

fn main() {
    let spec = TaskSpec::new(TaskKind::Reach);
    let ds = PreferenceDataset { items: items(&spec, 1, 400) };
    let cfg = RmTrainConfig {
        epochs: 20,
        hidden: vec![64, 64],
        ..RmTrainConfig::default()
    };
    let (rm, log) = train_reward_model(&ds, &cfg).unwrap();
    println!("{} train / {} held out, held-out accuracy {:?}", log.train_items, log.holdout_items, log.holdout_accuracy);

    let fresh = items(&spec, 2, 300);
    let refs: Vec<&PreferenceItem> = fresh.iter().collect();
    let acc = preference_accuracy(&refs, |s| rm.segment_return(s)).unwrap();
    println!("accuracy on fresh pairs: {acc:.3}");

    let dir = std::env::temp_dir().join("prefcritic-example-rm");
    rm.save(&dir).unwrap();
    println!("saved {} members to {}", rm.len(), dir.display());
}
