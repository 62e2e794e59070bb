//! The annotation queue and its JSON-over-HTTP surface.
//!
//! [`AnnotationHub`] is the synchronized queue shared by the run loop and the
//! HTTP handlers. Every issued request is in exactly one of three places:
//! pending, leased to a client, or answered. Leases expire back to pending.
//!
//! | method | path            | purpose                                   |
//! |--------|-----------------|-------------------------------------------|
//! | GET    | `/api/queue`    | lease up to `limit` pending requests      |
//! | POST   | `/api/verdicts` | submit `[{request_id, verdict}]`          |
//! | GET    | `/api/status`   | run snapshot                              |

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;
use vigil_core::annotation::{AnnotationRequest, AnnotationVerdict, Verdict, VerdictSource};
use vigil_core::{ConfusionCounts, Methodology, ThresholdState};

pub const DEFAULT_QUEUE_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Idle,
    Warmup,
    Active,
    Done,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("no active run")]
    NoActiveRun,
    #[error("limit must be a positive integer")]
    InvalidLimit,
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("request {0} already has a different verdict")]
    Conflict(String),
}

impl QueueError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::NoActiveRun | Self::Conflict(_) => StatusCode::CONFLICT,
            Self::InvalidLimit => StatusCode::BAD_REQUEST,
            Self::UnknownRequest(_) => StatusCode::NOT_FOUND,
        }
    }
}

impl IntoResponse for QueueError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

/// A leased request as handed to a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    #[serde(flatten)]
    pub request: AnnotationRequest,
    pub lease_id: String,
    pub lease_expires_in_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSubmission {
    pub request_id: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub accepted: usize,
    pub duplicates: usize,
    /// Requests of the current barrier still unanswered.
    pub outstanding: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub pending: usize,
    pub leased: usize,
    pub answered: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandBounds {
    pub lower: f64,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceConfusion {
    pub slice: i64,
    pub confusion: ConfusionCounts,
}

/// Run-side fields of the status snapshot, maintained by the run loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub methodology: Option<Methodology>,
    pub slice: Option<i64>,
    pub slices_done: usize,
    pub slices_total: usize,
    pub theta: Option<f64>,
    pub band: Option<BandBounds>,
    pub per_slice: Vec<SliceConfusion>,
    pub trajectory: Vec<ThresholdState>,
    pub report_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub phase: Phase,
    #[serde(flatten)]
    pub progress: Progress,
    pub queue: QueueCounts,
}

#[derive(Debug)]
struct Lease {
    request: AnnotationRequest,
    expires: Instant,
}

#[derive(Debug, Default)]
struct HubState {
    phase: Phase,
    pending: BTreeMap<u64, AnnotationRequest>,
    leased: BTreeMap<u64, Lease>,
    outstanding: HashMap<String, u64>,
    answered: BTreeMap<String, AnnotationVerdict>,
    barrier: Vec<String>,
    next_lease: u64,
    progress: Progress,
}

impl HubState {
    fn expire(&mut self, now: Instant) {
        let expired: Vec<u64> = self
            .leased
            .iter()
            .filter(|(_, l)| l.expires <= now)
            .map(|(k, _)| *k)
            .collect();
        for k in expired {
            if let Some(l) = self.leased.remove(&k) {
                self.pending.insert(k, l.request);
            }
        }
    }

    fn counts(&self) -> QueueCounts {
        QueueCounts {
            pending: self.pending.len(),
            leased: self.leased.len(),
            answered: self.answered.len(),
        }
    }
}

/// Shared, synchronized annotation queue.
#[derive(Debug, Clone)]
pub struct AnnotationHub {
    inner: Arc<Mutex<HubState>>,
    lease: Duration,
}

impl Default for AnnotationHub {
    fn default() -> Self {
        Self::new(Duration::from_secs(crate::config::DEFAULT_LEASE_SECS))
    }
}

impl AnnotationHub {
    pub fn new(lease: Duration) -> Self {
        Self {
            inner: Arc::default(),
            lease,
        }
    }

    fn state(&self) -> MutexGuard<'_, HubState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn phase(&self) -> Phase {
        self.state().phase
    }

    pub fn set_phase(&self, phase: Phase) {
        self.state().phase = phase;
    }

    pub fn update_progress(&self, f: impl FnOnce(&mut Progress)) {
        f(&mut self.state().progress);
    }

    /// Queues `requests` as the current barrier. Verdicts already known
    /// (for example restored from a checkpoint) are recorded as answered.
    pub fn open_barrier(&self, requests: &[AnnotationRequest], known: &[AnnotationVerdict]) {
        let mut st = self.state();
        st.pending.clear();
        st.leased.clear();
        st.outstanding.clear();
        st.barrier = requests.iter().map(|r| r.request_id.clone()).collect();
        for v in known {
            if st.barrier.contains(&v.request_id) {
                st.answered.entry(v.request_id.clone()).or_insert_with(|| v.clone());
            }
        }
        for r in requests {
            if !st.answered.contains_key(&r.request_id) {
                st.outstanding.insert(r.request_id.clone(), r.issued_at);
                st.pending.insert(r.issued_at, r.clone());
            }
        }
    }

    pub fn barrier_complete(&self) -> bool {
        self.state().outstanding.is_empty()
    }

    /// Verdicts recorded so far for the current barrier, in request order.
    pub fn barrier_verdicts(&self) -> Vec<AnnotationVerdict> {
        let st = self.state();
        st.barrier
            .iter()
            .filter_map(|id| st.answered.get(id).cloned())
            .collect()
    }

    /// Ids of the current barrier that still lack a verdict.
    pub fn outstanding_ids(&self) -> Vec<String> {
        let st = self.state();
        st.barrier
            .iter()
            .filter(|id| st.outstanding.contains_key(*id))
            .cloned()
            .collect()
    }

    pub fn close_barrier(&self) {
        let mut st = self.state();
        st.pending.clear();
        st.leased.clear();
        st.outstanding.clear();
        st.barrier.clear();
    }

    /// Leases up to `limit` pending requests, oldest `issued_at` first.
    pub fn lease(&self, limit: usize) -> Result<Vec<QueueItem>, QueueError> {
        if limit == 0 {
            return Err(QueueError::InvalidLimit);
        }
        let now = Instant::now();
        let mut st = self.state();
        if !matches!(st.phase, Phase::Warmup | Phase::Active) {
            return Err(QueueError::NoActiveRun);
        }
        st.expire(now);
        let keys: Vec<u64> = st.pending.keys().take(limit).copied().collect();
        let mut out = Vec::with_capacity(keys.len());
        for k in keys {
            let request = st.pending.remove(&k).expect("key listed above");
            st.next_lease += 1;
            let lease_id = format!("lease-{}", st.next_lease);
            out.push(QueueItem {
                request: request.clone(),
                lease_id,
                lease_expires_in_ms: self.lease.as_millis() as u64,
            });
            st.leased.insert(
                k,
                Lease {
                    request,
                    expires: now + self.lease,
                },
            );
        }
        Ok(out)
    }

    /// Records human verdicts. The batch is checked as a whole before any of
    /// it is applied; repeating an identical verdict is a no-op.
    pub fn submit(&self, batch: &[VerdictSubmission]) -> Result<SubmitAck, QueueError> {
        let mut st = self.state();
        let mut fresh: BTreeMap<&str, Verdict> = BTreeMap::new();
        let mut duplicates = 0;
        for s in batch {
            let id = s.request_id.as_str();
            if let Some(prev) = st.answered.get(id) {
                if prev.verdict != s.verdict {
                    return Err(QueueError::Conflict(s.request_id.clone()));
                }
                duplicates += 1;
            } else if st.outstanding.contains_key(id) {
                match fresh.get(id) {
                    Some(v) if *v != s.verdict => return Err(QueueError::Conflict(s.request_id.clone())),
                    Some(_) => duplicates += 1,
                    None => {
                        fresh.insert(id, s.verdict);
                    }
                }
            } else {
                return Err(QueueError::UnknownRequest(s.request_id.clone()));
            }
        }
        let accepted = fresh.len();
        let fresh: Vec<(String, Verdict)> = fresh.into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
        for (id, verdict) in fresh {
            if let Some(key) = st.outstanding.remove(&id) {
                st.pending.remove(&key);
                st.leased.remove(&key);
            }
            st.answered.insert(
                id.clone(),
                AnnotationVerdict {
                    request_id: id,
                    verdict,
                    source: VerdictSource::Human,
                },
            );
        }
        Ok(SubmitAck {
            accepted,
            duplicates,
            outstanding: st.outstanding.len(),
        })
    }

    pub fn status(&self) -> StatusSnapshot {
        let mut st = self.state();
        st.expire(Instant::now());
        StatusSnapshot {
            phase: st.phase,
            progress: st.progress.clone(),
            queue: st.counts(),
        }
    }

    /// Every verdict received during the run, keyed order.
    pub fn answered_log(&self) -> Vec<AnnotationVerdict> {
        self.state().answered.values().cloned().collect()
    }
}

async fn get_queue(
    State(hub): State<AnnotationHub>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<Vec<QueueItem>>, QueueError> {
    let limit = match params.get("limit") {
        None => DEFAULT_QUEUE_LIMIT,
        Some(raw) => raw.trim().parse::<usize>().map_err(|_| QueueError::InvalidLimit)?,
    };
    hub.lease(limit).map(Json)
}

async fn post_verdicts(
    State(hub): State<AnnotationHub>,
    Json(batch): Json<Vec<VerdictSubmission>>,
) -> Result<Json<SubmitAck>, QueueError> {
    hub.submit(&batch).map(Json)
}

async fn get_status(State(hub): State<AnnotationHub>) -> Json<StatusSnapshot> {
    Json(hub.status())
}

pub fn router(hub: AnnotationHub) -> Router {
    Router::new()
        .route("/api/queue", get(get_queue))
        .route("/api/verdicts", post(post_verdicts))
        .route("/api/status", get(get_status))
        .with_state(hub)
}

/// A server running on its own thread; stops when dropped.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `hub` in the background.
pub fn spawn(hub: AnnotationHub, addr: SocketAddr) -> io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(hub))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr: bound,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(i: u64) -> AnnotationRequest {
        AnnotationRequest {
            request_id: format!("r{i}"),
            sample_id: format!("x{i}"),
            score: i as f64,
            slice_index: 0,
            features: vec![i as f64],
            issued_at: i,
        }
    }

    fn active_hub(n: u64) -> AnnotationHub {
        let hub = AnnotationHub::new(Duration::from_secs(60));
        hub.set_phase(Phase::Active);
        hub.open_barrier(&(0..n).map(req).collect::<Vec<_>>(), &[]);
        hub
    }

    fn sub(id: &str, verdict: Verdict) -> VerdictSubmission {
        VerdictSubmission {
            request_id: id.into(),
            verdict,
        }
    }

    #[test]
    fn lease_moves_items_in_issue_order() {
        let hub = active_hub(5);
        let got = hub.lease(3).unwrap();
        assert_eq!(got.iter().map(|i| i.request.issued_at).collect::<Vec<_>>(), [0, 1, 2]);
        let s = hub.status().queue;
        assert_eq!((s.pending, s.leased, s.answered), (2, 3, 0));
        let second = hub.lease(10).unwrap();
        assert_eq!(second.iter().map(|i| i.request.issued_at).collect::<Vec<_>>(), [3, 4]);
        assert!(hub.lease(10).unwrap().is_empty());
        assert_eq!(hub.lease(0), Err(QueueError::InvalidLimit));
    }

    #[test]
    fn expired_leases_return_to_pending() {
        let hub = AnnotationHub::new(Duration::from_millis(0));
        hub.set_phase(Phase::Warmup);
        hub.open_barrier(&[req(0)], &[]);
        assert_eq!(hub.lease(5).unwrap().len(), 1);
        assert_eq!(hub.lease(5).unwrap().len(), 1);
    }

    #[test]
    fn idle_hub_refuses_leases() {
        let hub = AnnotationHub::default();
        assert_eq!(hub.lease(1), Err(QueueError::NoActiveRun));
        hub.set_phase(Phase::Done);
        assert_eq!(hub.lease(1), Err(QueueError::NoActiveRun));
    }

    #[test]
    fn submit_semantics() {
        let hub = active_hub(3);
        let ack = hub.submit(&[sub("r0", Verdict::Tp), sub("r1", Verdict::Fp)]).unwrap();
        assert_eq!((ack.accepted, ack.duplicates, ack.outstanding), (2, 0, 1));
        let ack = hub.submit(&[sub("r0", Verdict::Tp)]).unwrap();
        assert_eq!((ack.accepted, ack.duplicates), (0, 1));
        assert_eq!(
            hub.submit(&[sub("r0", Verdict::Fp)]),
            Err(QueueError::Conflict("r0".into()))
        );
        assert_eq!(
            hub.submit(&[sub("zz", Verdict::Fp)]),
            Err(QueueError::UnknownRequest("zz".into()))
        );
        assert_eq!(
            hub.submit(&[sub("r2", Verdict::Tp), sub("nope", Verdict::Tp)]),
            Err(QueueError::UnknownRequest("nope".into()))
        );
        assert!(!hub.barrier_complete());
        hub.submit(&[sub("r2", Verdict::Tp)]).unwrap();
        assert!(hub.barrier_complete());
        let v = hub.barrier_verdicts();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|x| x.source == VerdictSource::Human));
    }

    #[test]
    fn known_verdicts_are_not_requeued() {
        let hub = AnnotationHub::default();
        hub.set_phase(Phase::Active);
        let known = AnnotationVerdict {
            request_id: "r1".into(),
            verdict: Verdict::Fp,
            source: VerdictSource::Human,
        };
        hub.open_barrier(&[req(0), req(1)], &[known]);
        assert_eq!(hub.outstanding_ids(), ["r0"]);
        assert_eq!(hub.status().queue.pending, 1);
    }
}
