//! Rolls out the scripted expert and a noisy variant on every task and prints
//! per-episode outcomes.

use prefcritic::env::{self, TaskKind, TaskSpec};
use prefcritic::expert::{collect_mixed_quality, ScriptedExpert};
use prefcritic::trajectory::record_episode;

fn main() {
    for task in TaskKind::ALL {
        let spec = TaskSpec::new(task);
        let expert = ScriptedExpert::new(spec);
        let mut policy = |o: &env::Observation| expert.action(o);
        let t = record_episode(spec, 7, &mut policy, "expert");
        println!(
            "{:<18} expert: {} steps, success {}, expert return {:.2}",
            task.name(),
            t.len(),
            t.success(),
            t.expert_return()
        );

        let mixed = collect_mixed_quality(spec, 20, 32, 1);
        let ok = mixed.iter().filter(|t| t.success()).count();
        let mean_len = mixed.iter().map(|t| t.len()).sum::<usize>() as f64 / mixed.len() as f64;
        println!("{:<18} mixed:  {ok}/{} succeed, mean length {mean_len:.1}", "", mixed.len());
    }

    // step the functional API by hand
    let (state, obs) = env::reset(TaskSpec::new(TaskKind::Reach), 3);
    let (next, out) = env::step(&state, [0.5, -0.5]).unwrap();
    println!("reach: obs {:?}", &obs.0[..4]);
    println!("after one step: dist {:.3}, reward {:.3}, done {}", next.dist_to_target(), out.info.expert_reward, out.done);
}
