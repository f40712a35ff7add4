//! HTTP client for an external multimodal critic.
//!
//! Wire format (JSON bodies, frozen):
//!
//! ```text
//! POST <endpoint>
//! request:  {"frames": {"first": [SceneGraph..], "second": [SceneGraph..]},
//!            "question": "...", "instruction": "..."}
//! response: {"analysis": "...", "evaluation": "Evaluation: N"}
//! ```
//!
//! The label is parsed from `evaluation`; when that field is missing or empty
//! the whole response body is parsed instead. Transport failures, non-2xx
//! statuses and unparseable responses are retried up to `max_retries` times
//! with exponential backoff.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::prompt::parse_verdict_text;
use super::{CriticError, CriticSource, CriticVerdict, PreferenceQuery};
use crate::env::SceneGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_concurrency: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/critic".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 250,
            max_concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub first: Vec<SceneGraph>,
    pub second: Vec<SceneGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub frames: FramePair,
    pub question: String,
    pub instruction: String,
}

impl RemoteRequest {
    pub fn from_query(q: &PreferenceQuery) -> Self {
        let (first, second) = q.frames();
        Self {
            frames: FramePair { first, second },
            question: q.question.clone(),
            instruction: q.instruction.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteResponse {
    pub analysis: String,
    pub evaluation: String,
}

fn agent(cfg: &RemoteConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into()
}

enum Attempt {
    Ok(CriticVerdict),
    Retry(String),
}

fn attempt(agent: &ureq::Agent, cfg: &RemoteConfig, q: &PreferenceQuery, body: &str, started: Instant) -> Attempt {
    let mut resp = match agent
        .post(&cfg.endpoint)
        .header("content-type", "application/json")
        .send(body)
    {
        Ok(r) => r,
        Err(e) => return Attempt::Retry(format!("transport: {e}")),
    };
    let status = resp.status();
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(e) => return Attempt::Retry(format!("reading body: {e}")),
    };
    if !status.is_success() {
        return Attempt::Retry(format!("status {status}"));
    }
    let (analysis, label) = match serde_json::from_str::<RemoteResponse>(&text) {
        Ok(r) => {
            let label = if r.evaluation.trim().is_empty() {
                parse_verdict_text(&r.analysis)
            } else {
                parse_verdict_text(&r.evaluation)
            };
            let full = if r.evaluation.is_empty() {
                r.analysis
            } else {
                format!("{}\n{}", r.analysis, r.evaluation)
            };
            (full, label)
        }
        Err(_) => (text.clone(), parse_verdict_text(&text)),
    };
    match label {
        Some(label) => Attempt::Ok(CriticVerdict {
            query_id: q.id.clone(),
            analysis,
            label,
            source: CriticSource::Remote,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            retries: 0,
        }),
        None => Attempt::Retry("response carries no evaluation label in {0, 1, 2}".into()),
    }
}

/// Asks the remote critic for a verdict, retrying on failure.
pub fn remote_verdict(q: &PreferenceQuery, cfg: &RemoteConfig) -> Result<CriticVerdict, CriticError> {
    remote_verdict_with(&agent(cfg), q, cfg)
}

fn remote_verdict_with(agent: &ureq::Agent, q: &PreferenceQuery, cfg: &RemoteConfig) -> Result<CriticVerdict, CriticError> {
    let body = serde_json::to_string(&RemoteRequest::from_query(q)).expect("request serializes");
    let started = Instant::now();
    let mut reason = String::new();
    for n in 0..=cfg.max_retries {
        if n > 0 {
            let backoff = cfg.backoff_ms.saturating_mul(1 << (n - 1).min(16));
            std::thread::sleep(Duration::from_millis(backoff));
        }
        match attempt(agent, cfg, q, &body, started) {
            Attempt::Ok(mut v) => {
                v.retries = n;
                return Ok(v);
            }
            Attempt::Retry(why) => {
                tracing::warn!(query = %q.id, attempt = n + 1, "remote critic: {why}");
                reason = why;
            }
        }
    }
    Err(CriticError::VerdictUnavailable {
        attempts: cfg.max_retries + 1,
        reason,
    })
}

/// Labels many queries with at most `max_concurrency` requests in flight.
/// Results keep the input order.
pub fn remote_verdicts(queries: &[PreferenceQuery], cfg: &RemoteConfig) -> Vec<Result<CriticVerdict, CriticError>> {
    let agent = agent(cfg);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CriticVerdict, CriticError>>>> =
        Mutex::new((0..queries.len()).map(|_| None).collect());
    let workers = cfg.max_concurrency.clamp(1, queries.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(q) = queries.get(i) else { break };
                let r = remote_verdict_with(&agent, q, cfg);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}
