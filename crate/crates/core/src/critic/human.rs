//! Lease-based queue of queries awaiting a human verdict.
//!
//! Queries are handed out oldest first. Handing a query out leases it for
//! `lease` (120 s by default); while leased it is not handed out again, and
//! an expired lease puts it back in line. A label is accepted at most once per
//! query id. When the queue is backed by a directory, accepted labels are
//! appended and fsynced to `labels.jsonl` before `submit_label` returns, and
//! enqueued queries to `queries.jsonl`; reopening the directory restores both.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{CriticSource, CriticVerdict, Label, PreferenceQuery};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(120);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QueueError {
    #[error("unknown query `{0}`")]
    UnknownQuery(String),
    #[error("query `{0}` is already queued")]
    DuplicateQuery(String),
    #[error("query `{id}` already has label {existing}")]
    AlreadyLabeled { id: String, existing: Label },
    #[error("no label for `{0}` before the timeout")]
    Timeout(String),
    #[error("label store: {0}")]
    Store(String),
}

fn store_err(e: impl std::fmt::Display) -> QueueError {
    QueueError::Store(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QueueStatus {
    pub pending: usize,
    pub labeled: usize,
}

struct Entry {
    query: PreferenceQuery,
    enqueued: Instant,
    leased_until: Option<Instant>,
    verdict: Option<CriticVerdict>,
}

#[derive(Default)]
struct State {
    order: VecDeque<String>,
    entries: HashMap<String, Entry>,
    labeled: usize,
}

struct Store {
    queries: File,
    labels: File,
}

pub struct HumanQueue {
    state: Mutex<State>,
    labeled: Condvar,
    lease: Duration,
    store: Option<Mutex<Store>>,
    dir: Option<PathBuf>,
}

fn append_line<T: Serialize>(file: &mut File, value: &T) -> Result<(), QueueError> {
    let mut line = serde_json::to_vec(value).map_err(store_err)?;
    line.push(b'\n');
    file.write_all(&line).map_err(store_err)?;
    file.sync_data().map_err(store_err)
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, QueueError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(store_err(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(store_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            // a torn final line from a crash mid-append; it was never acknowledged
            Err(_) => tracing::warn!("{}: skipping unreadable line {}", path.display(), i + 1),
        }
    }
    Ok(out)
}

impl HumanQueue {
    pub fn in_memory() -> Self {
        Self {
            state: Mutex::new(State::default()),
            labeled: Condvar::new(),
            lease: DEFAULT_LEASE,
            store: None,
            dir: None,
        }
    }

    /// Opens (or creates) a queue persisted under `dir`.
    pub fn open(dir: &Path) -> Result<Self, QueueError> {
        std::fs::create_dir_all(dir).map_err(store_err)?;
        let qpath = dir.join("queries.jsonl");
        let lpath = dir.join("labels.jsonl");
        let queries: Vec<PreferenceQuery> = read_lines(&qpath)?;
        let verdicts: Vec<CriticVerdict> = read_lines(&lpath)?;
        let mut state = State::default();
        let now = Instant::now();
        for q in queries {
            if state.entries.contains_key(&q.id) {
                continue;
            }
            state.order.push_back(q.id.clone());
            state.entries.insert(
                q.id.clone(),
                Entry {
                    query: q,
                    enqueued: now,
                    leased_until: None,
                    verdict: None,
                },
            );
        }
        for v in verdicts {
            if let Some(e) = state.entries.get_mut(&v.query_id) {
                if e.verdict.is_none() {
                    e.verdict = Some(v);
                    state.labeled += 1;
                }
            }
        }
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p).map_err(store_err);
        Ok(Self {
            state: Mutex::new(state),
            labeled: Condvar::new(),
            lease: DEFAULT_LEASE,
            store: Some(Mutex::new(Store {
                queries: open(&qpath)?,
                labels: open(&lpath)?,
            })),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn with_lease(mut self, lease: Duration) -> Self {
        self.lease = lease;
        self
    }

    pub fn lease(&self) -> Duration {
        self.lease
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn enqueue(&self, q: PreferenceQuery) -> Result<(), QueueError> {
        let mut st = self.state.lock().unwrap();
        if st.entries.contains_key(&q.id) {
            return Err(QueueError::DuplicateQuery(q.id));
        }
        if let Some(store) = &self.store {
            append_line(&mut store.lock().unwrap().queries, &q)?;
        }
        st.order.push_back(q.id.clone());
        st.entries.insert(
            q.id.clone(),
            Entry {
                query: q,
                enqueued: Instant::now(),
                leased_until: None,
                verdict: None,
            },
        );
        Ok(())
    }

    /// Leases the oldest unlabeled query that is not currently leased.
    pub fn next_for_labeling(&self) -> Option<PreferenceQuery> {
        let mut st = self.state.lock().unwrap();
        let now = Instant::now();
        let st = &mut *st;
        // drop labeled ids from the front so the scan stays short
        while let Some(id) = st.order.front() {
            if st.entries[id].verdict.is_some() {
                st.order.pop_front();
            } else {
                break;
            }
        }
        for id in &st.order {
            let e = st.entries.get_mut(id).unwrap();
            if e.verdict.is_some() {
                continue;
            }
            if e.leased_until.is_none_or(|t| t <= now) {
                e.leased_until = Some(now + self.lease);
                return Some(e.query.clone());
            }
        }
        None
    }

    /// Accepts the first label for `id`; every later submission is refused.
    /// With a backing directory the verdict is on disk before this returns.
    pub fn submit_label(&self, id: &str, label: Label) -> Result<CriticVerdict, QueueError> {
        let mut st = self.state.lock().unwrap();
        let e = st.entries.get_mut(id).ok_or_else(|| QueueError::UnknownQuery(id.to_string()))?;
        if let Some(v) = &e.verdict {
            return Err(QueueError::AlreadyLabeled {
                id: id.to_string(),
                existing: v.label,
            });
        }
        let verdict = CriticVerdict {
            query_id: id.to_string(),
            analysis: String::new(),
            label,
            source: CriticSource::Human,
            latency_ms: e.enqueued.elapsed().as_secs_f64() * 1e3,
            retries: 0,
        };
        if let Some(store) = &self.store {
            append_line(&mut store.lock().unwrap().labels, &verdict)?;
        }
        e.verdict = Some(verdict.clone());
        e.leased_until = None;
        st.labeled += 1;
        self.labeled.notify_all();
        Ok(verdict)
    }

    /// Blocks until `id` is labeled or `timeout` elapses.
    pub fn await_label(&self, id: &str, timeout: Duration) -> Result<CriticVerdict, QueueError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            let e = st.entries.get(id).ok_or_else(|| QueueError::UnknownQuery(id.to_string()))?;
            if let Some(v) = &e.verdict {
                return Ok(v.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(QueueError::Timeout(id.to_string()));
            }
            st = self.labeled.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    pub fn verdict(&self, id: &str) -> Option<CriticVerdict> {
        self.state.lock().unwrap().entries.get(id).and_then(|e| e.verdict.clone())
    }

    pub fn status(&self) -> QueueStatus {
        let st = self.state.lock().unwrap();
        QueueStatus {
            pending: st.entries.len() - st.labeled,
            labeled: st.labeled,
        }
    }
}
