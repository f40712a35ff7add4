mod common;

use common::{queries, stub};
use prefcritic::critic::remote::{remote_verdicts, RemoteRequest};
use prefcritic::critic::{remote_verdict, CriticError, CriticSource, Label, RemoteConfig};

fn cfg(url: &str) -> RemoteConfig {
    RemoteConfig {
        endpoint: url.to_string(),
        timeout_ms: 2000,
        max_retries: 3,
        backoff_ms: 1,
        max_concurrency: 4,
    }
}

fn ok(eval: &str) -> (u16, String) {
    (
        200,
        serde_json::json!({"analysis": "Analysis: the first segment ends at the goal.", "evaluation": eval}).to_string(),
    )
}

#[test]
fn parses_a_successful_reply() {
    let s = stub(vec![ok("Evaluation: 1")]);
    let q = &queries(1)[0];
    let v = remote_verdict(q, &cfg(&s.url)).unwrap();
    assert_eq!(v.label, Label::First);
    assert_eq!(v.source, CriticSource::Remote);
    assert_eq!(v.retries, 0);
    assert_eq!(v.query_id, q.id);
    assert!(v.analysis.contains("ends at the goal"));

    let bodies = s.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 1);
    let req: RemoteRequest = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(req, RemoteRequest::from_query(q));
    assert_eq!(req.frames.first.len(), 32);
}

#[test]
fn plain_text_reply_is_parsed() {
    let s = stub(vec![(200, "Analysis: both stall.\nEvaluation: 0".into())]);
    let v = remote_verdict(&queries(1)[0], &cfg(&s.url)).unwrap();
    assert_eq!(v.label, Label::Tie);
}

#[test]
fn retries_then_succeeds() {
    let s = stub(vec![
        (500, "{}".into()),
        (503, "upstream busy".into()),
        ok("Evaluation: 2"),
    ]);
    let v = remote_verdict(&queries(1)[0], &cfg(&s.url)).unwrap();
    assert_eq!(v.label, Label::Second);
    assert_eq!(v.retries, 2);
    assert_eq!(s.bodies.lock().unwrap().len(), 3);
}

#[test]
fn unparseable_reply_is_unavailable_after_retries() {
    let s = stub(vec![ok("I would rather not say.")]);
    let err = remote_verdict(&queries(1)[0], &cfg(&s.url)).unwrap_err();
    match err {
        CriticError::VerdictUnavailable { attempts, reason } => {
            assert_eq!(attempts, 4);
            assert!(reason.contains("label"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(s.bodies.lock().unwrap().len(), 4);
}

#[test]
fn out_of_domain_label_is_not_accepted() {
    let s = stub(vec![ok("Evaluation: 7")]);
    let mut c = cfg(&s.url);
    c.max_retries = 0;
    assert!(matches!(
        remote_verdict(&queries(1)[0], &c),
        Err(CriticError::VerdictUnavailable { attempts: 1, .. })
    ));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    // bind then drop to get a port with nothing listening
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut c = cfg(&format!("http://127.0.0.1:{port}/critic"));
    c.max_retries = 1;
    assert!(matches!(
        remote_verdict(&queries(1)[0], &c),
        Err(CriticError::VerdictUnavailable { attempts: 2, .. })
    ));
}

#[test]
fn batch_keeps_input_order() {
    let s = stub(vec![ok("Evaluation: 1")]);
    let qs = queries(9);
    let out = remote_verdicts(&qs, &cfg(&s.url));
    assert_eq!(out.len(), 9);
    for (q, v) in qs.iter().zip(out) {
        assert_eq!(v.unwrap().query_id, q.id);
    }
    assert!(remote_verdicts(&[], &cfg(&s.url)).is_empty());
}
