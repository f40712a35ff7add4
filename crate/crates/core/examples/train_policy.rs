//! Short actor-critic run on `reach` with the sparse success reward. Takes about a
//! minute in release; pass a budget to change it: `cargo run --release --example train_policy -- 30000`.

use prefcritic::agent::{train_policy, PolicyTrainConfig, RewardSource};
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::eval::{curve_auc, success_rate_curve};

fn main() {
    let budget = std::env::args().nth(1).map_or(70_000, |s| s.parse().expect("budget"));
    let cfg = PolicyTrainConfig {
        spec: TaskSpec::new(TaskKind::Reach),
        reward_source: RewardSource::EnvSparse,
        budget,
        seeds: vec![0],
        eval_every: 5000,
        eval_episodes: 10,
        ..PolicyTrainConfig::default()
    };
    let rows = train_policy(&cfg, None).unwrap();
    for r in &rows {
        println!("step {:>6}  success {:.2}  return {:.2}", r.step, r.success_rate, r.mean_return);
    }
    let curves = success_rate_curve(&rows).unwrap();
    println!("normalized AUC {:.3}", curve_auc(&curves, RewardSource::EnvSparse).unwrap_or(0.0));
}
