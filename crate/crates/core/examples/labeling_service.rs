//! Starts the labeling HTTP service on a queue of pairs, labels them through
//! the API, and reads the verdicts back from the queue.

use std::sync::Arc;
use std::time::Duration;

use prefcritic::critic::dataset::build_queries;
use prefcritic::critic::HumanQueue;
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::expert::collect_mixed_quality;
use prefcritic::service::{spawn_service, AppState, QueryView};
use prefcritic::trajectory::PairSampling;

fn main() {
    let spec = TaskSpec::new(TaskKind::DrawerOpen);
    let trajs = collect_mixed_quality(spec, 10, 32, 4);
    let queries = build_queries(&spec, &trajs, 3, PairSampling::default(), 2, "svc").unwrap();
    let queue = Arc::new(HumanQueue::in_memory());
    for q in &queries {
        queue.enqueue(q.clone()).unwrap();
    }
    let state = AppState { queue: queue.clone(), token: None };
    let handle = spawn_service("127.0.0.1:0", state, None).unwrap();
    println!("serving on {}", handle.base_url());

    let agent = ureq::Agent::new_with_defaults();
    let base = handle.base_url();
    loop {
        let mut r = agent.get(&format!("{base}/api/queries/next")).call().unwrap();
        if r.status().as_u16() == 204 {
            break;
        }
        let view: QueryView = serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap();
        println!("{}: {} frames per side, \"{}\"", view.id, view.frames_a.len(), view.question);
        agent
            .post(&format!("{base}/api/queries/{}/label", view.id))
            .header("content-type", "application/json")
            .send(r#"{"label": 1}"#)
            .unwrap();
    }
    for q in &queries {
        let v = queue.await_label(&q.id, Duration::from_secs(1)).unwrap();
        println!("{} -> {}", v.query_id, v.label.as_u8());
    }
    let status = agent.get(&format!("{base}/api/status")).call().unwrap().body_mut().read_to_string().unwrap();
    println!("status: {status}");
}
