#![allow(dead_code)]

use prefcritic::critic::dataset::build_queries;
use prefcritic::critic::PreferenceQuery;
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::expert::collect_mixed_quality;
use prefcritic::trajectory::PairSampling;

/// `n` reach queries with ids `q-00000..`.
pub fn queries(n: usize) -> Vec<PreferenceQuery> {
    let spec = TaskSpec::new(TaskKind::Reach);
    let trajs = collect_mixed_quality(spec, 8, 32, 5);
    build_queries(&spec, &trajs, n, PairSampling::default(), 11, "q").unwrap()
}

pub fn http() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

/// (status, body) of a request; the body is empty for 204.
pub fn get(agent: &ureq::Agent, url: &str) -> (u16, String) {
    let mut r = agent.get(url).call().unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_to_string().unwrap_or_default())
}

pub fn post(agent: &ureq::Agent, url: &str, body: &str) -> (u16, String) {
    let mut r = agent
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_to_string().unwrap_or_default())
}

/// Minimal HTTP/1.1 endpoint replying from a script; the last reply repeats.
/// Records every request body.
pub struct Stub {
    pub url: String,
    pub bodies: std::sync::Arc<std::sync::Mutex<Vec<String>>>,
}

pub fn stub(script: Vec<(u16, String)>) -> Stub {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/critic", listener.local_addr().unwrap());
    let bodies = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let seen = bodies.clone();
    std::thread::spawn(move || {
        for (n, conn) in listener.incoming().enumerate() {
            let Ok(mut conn) = conn else { break };
            let mut reader = BufReader::new(conn.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                if let Some((k, v)) = l.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
            }
            let mut body = vec![0u8; len];
            let _ = reader.read_exact(&mut body);
            seen.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
            let (status, reply) = &script[n.min(script.len() - 1)];
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let _ = conn.write_all(resp.as_bytes());
        }
    });
    Stub { url, bodies }
}

/// Largest per-parameter relative error between `analytic` and central
/// differences of `loss`. Pairs where both sides are below `floor` in
/// magnitude are compared on that absolute scale instead.
pub fn max_rel_grad_error(
    net: &prefcritic::nn::Mlp,
    analytic: &prefcritic::nn::Gradients,
    loss: impl Fn(&prefcritic::nn::Mlp) -> f64,
) -> f64 {
    let h = 1e-6;
    let floor = 1e-7;
    let params = net.params_flat();
    let g = analytic.flatten();
    assert_eq!(params.len(), g.len());
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] = params[i] + h;
        probe.set_params_flat(&p).unwrap();
        let up = loss(&probe);
        p[i] = params[i] - h;
        probe.set_params_flat(&p).unwrap();
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * h);
        let denom = g[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((g[i] - numeric).abs() / denom);
    }
    worst
}
