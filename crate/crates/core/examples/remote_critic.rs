//! Queries a remote critic endpoint for one pair. Without an argument a tiny
//! in-process stand-in answers; otherwise pass the endpoint URL.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use prefcritic::critic::dataset::build_queries;
use prefcritic::critic::{remote_verdict, RemoteConfig};
use prefcritic::env::{TaskKind, TaskSpec};
use prefcritic::expert::collect_mixed_quality;
use prefcritic::trajectory::PairSampling;

/// Answers every request with a fixed verdict.
fn stand_in() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/critic", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let reply = r#"{"analysis":"Analysis: the second segment presses the button.","evaluation":"Evaluation: 2"}"#;
            let mut s = reader.into_inner();
            write!(
                s,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    url
}

fn main() {
    let endpoint = std::env::args().nth(1).unwrap_or_else(stand_in);
    let spec = TaskSpec::new(TaskKind::ButtonPressWall);
    let trajs = collect_mixed_quality(spec, 10, 32, 3);
    let q = &build_queries(&spec, &trajs, 1, PairSampling::default(), 1, "remote").unwrap()[0];
    let cfg = RemoteConfig {
        endpoint: endpoint.clone(),
        timeout_ms: 5000,
        ..RemoteConfig::default()
    };
    match remote_verdict(q, &cfg) {
        Ok(v) => println!(
            "{endpoint}: label {} after {} retries in {:.1} ms\n  {}",
            v.label.as_u8(),
            v.retries,
            v.latency_ms,
            v.analysis
        ),
        Err(e) => println!("{endpoint}: {e}"),
    }
}
