//! Runs every pipeline stage with a small config, then runs again to show the
//! second pass is skipped. Pass a directory to keep the outputs.

use prefcritic::pipeline::{run_all, PipelineConfig, RunOptions};

const CONFIG: &str = r#"
tasks = ["reach"]
seed = 1

[collect]
trajectories = 20

[label]
pairs = 60

[reward_model]
epochs = 5
hidden = [32, 32]

[policy]
budget = 2000
seeds = [0]
eval_every = 1000
eval_episodes = 4

[policy.agent]
seed_steps = 500

[evaluate]
test_trajectories = 10
test_pairs = 40
return_trajectories = 10
"#;

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let out = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);
    let mut cfg = PipelineConfig::from_toml_str(CONFIG).unwrap();
    cfg.out_dir = out.clone();
    for pass in 1..=2 {
        for o in run_all(&cfg, &RunOptions::default()).unwrap() {
            println!(
                "pass {pass}: {:<13} {:?} in {:.0} ms",
                o.entry.stage.name(),
                o.entry.status,
                o.entry.duration_ms
            );
        }
    }
    println!("outputs in {}", out.display());
}
