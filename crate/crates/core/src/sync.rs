//! Annotation-server client: pull screened regions and annotations into a
//! dataset manifest, push predictions back for expert review.
//!
//! The wire schema is small JSON over four endpoints (see [`mock`], which
//! doubles as the conformance reference). Every request retries transient
//! failures with exponential backoff; uploads carry client-generated ids
//! derived from the detection content, so a retried or repeated push never
//! duplicates anything on the server.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ureq::Agent;

use crate::eval::Detection;
use crate::geometry::{Rect, ScreenMap};
use crate::model::{Annotation, ClassRegistry, DatasetManifest, ModelError, SlideManifest, SplitRole};
use crate::rng::hash_str;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub base_url: String,
    pub token: String,
    pub image_set: String,
    pub timeout: Duration,
    /// Additional attempts after the first failure.
    pub max_retries: u32,
    /// First backoff delay; doubles per retry.
    pub backoff_base: Duration,
}

impl ServerConfig {
    pub fn new(base_url: &str, token: &str, image_set: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            token: token.to_string(),
            image_set: image_set.to_string(),
            timeout: Duration::from_secs(10),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        if self.base_url.is_empty() {
            return Err(SyncError::InvalidConfig("base_url is empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(SyncError::InvalidConfig("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("invalid server config: {0}")]
    InvalidConfig(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("upload interrupted after {} accepted detections: {message}", receipts.len())]
    PartialUpload { receipts: Vec<Receipt>, message: String },
}

/// Injectable clock so backoff behavior is testable without waiting.
pub trait Sleeper {
    fn sleep(&mut self, d: Duration);
}

pub struct RealSleeper;

impl Sleeper for RealSleeper {
    fn sleep(&mut self, d: Duration) {
        std::thread::sleep(d);
    }
}

// --- wire records ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireSlide {
    pub slide_id: String,
    pub width: i64,
    pub height: i64,
    pub revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireAnnotation {
    pub id: u64,
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
    pub class: String,
    pub annotator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WirePrediction {
    pub client_id: String,
    pub class: String,
    pub score: f64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub client_id: String,
    pub server_id: u64,
}

// --- client-side bookkeeping ------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncState {
    pub slides: BTreeMap<String, SlideSync>,
    pub pending_uploads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSync {
    pub revision: u64,
    pub screened: Vec<Rect>,
    pub annotation_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedAnnotation {
    pub slide_id: String,
    pub annotation_id: u64,
    pub reason: String,
}

#[derive(Debug)]
pub struct PullOutcome {
    pub manifest: DatasetManifest,
    /// Server items that violated manifest invariants, skipped one by one.
    pub rejected: Vec<RejectedAnnotation>,
    /// Transient failures retried away during this pull.
    pub retries: u32,
}

/// Deterministic idempotency key: a UUID whose bytes are hashes of the
/// detection's content, formatted in the version-4 layout. The same
/// detection always maps to the same id, so the server can collapse
/// replays however often the push is repeated.
pub fn detection_client_id(slide_id: &str, det: &Detection) -> String {
    let canon = format!(
        "{slide_id}|{}|{:016x}|{:016x}|{:016x}|{:016x}|{:016x}",
        det.class.0,
        det.score.to_bits(),
        det.bbox.x.to_bits(),
        det.bbox.y.to_bits(),
        det.bbox.w.to_bits(),
        det.bbox.h.to_bits(),
    );
    let h1 = hash_str(&canon);
    let h2 = hash_str(&format!("{canon}|salt"));
    let mut b = [0u8; 16];
    b[..8].copy_from_slice(&h1.to_be_bytes());
    b[8..].copy_from_slice(&h2.to_be_bytes());
    b[6] = (b[6] & 0x0f) | 0x40;
    b[8] = (b[8] & 0x3f) | 0x80;
    format!(
        "{:02x}{:02x}{:02x}{:02x}-{:02x}{:02x}-{:02x}{:02x}-{:02x}{:02x}-{:02x}{:02x}{:02x}{:02x}{:02x}{:02x}",
        b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7], b[8], b[9], b[10], b[11], b[12], b[13], b[14], b[15]
    )
}

pub struct SyncClient<S: Sleeper = RealSleeper> {
    cfg: ServerConfig,
    agent: Agent,
    sleeper: S,
    state: SyncState,
    retries: u32,
}

impl SyncClient<RealSleeper> {
    pub fn new(cfg: ServerConfig) -> Result<Self, SyncError> {
        Self::with_sleeper(cfg, RealSleeper)
    }
}

impl<S: Sleeper> SyncClient<S> {
    pub fn with_sleeper(cfg: ServerConfig, sleeper: S) -> Result<Self, SyncError> {
        cfg.validate()?;
        let agent = Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self { cfg, agent, sleeper, state: SyncState::default(), retries: 0 })
    }

    pub fn state(&self) -> &SyncState {
        &self.state
    }

    /// Transient failures retried away over the client's lifetime.
    pub fn retries(&self) -> u32 {
        self.retries
    }

    /// One request with retry. Returns the response body on 2xx; auth and
    /// schema-class statuses fail immediately, everything transient backs
    /// off (500 ms base, doubling) up to `max_retries` extra attempts.
    fn request(&mut self, method: &str, path: &str, body: Option<&str>) -> Result<String, SyncError> {
        let url = format!("{}{}", self.cfg.base_url, path);
        let auth = format!("Bearer {}", self.cfg.token);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let result = match method {
                "GET" => self.agent.get(&url).header("Authorization", &auth).call(),
                "POST" => self
                    .agent
                    .post(&url)
                    .header("Authorization", &auth)
                    .header("Content-Type", "application/json")
                    .send(body.unwrap_or("")),
                other => unreachable!("unsupported method {other}"),
            };

            let transient = match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    match status {
                        200..=299 => return Ok(text),
                        401 | 403 => return Err(SyncError::Auth { status }),
                        408 | 429 | 500..=599 => format!("HTTP {status}"),
                        _ => return Err(SyncError::Schema(format!("HTTP {status} on {path}: {text}"))),
                    }
                }
                Err(e) => e.to_string(),
            };

            if attempts > self.cfg.max_retries {
                return Err(SyncError::Transport { attempts, message: transient });
            }
            let delay = self.cfg.backoff_base * 2u32.pow(attempts - 1);
            log::warn!(
                "{method} {path} failed ({transient}); retry {attempts}/{} in {delay:?}",
                self.cfg.max_retries
            );
            self.retries += 1;
            self.sleeper.sleep(delay);
        }
    }

    fn get_json<T: serde::de::DeserializeOwned>(&mut self, path: &str) -> Result<T, SyncError> {
        let text = self.request("GET", path, None)?;
        serde_json::from_str(&text).map_err(|e| SyncError::Schema(format!("{path}: {e}")))
    }

    /// Assemble a dataset manifest from the server's view of the image set.
    ///
    /// Pulled slides carry no split assignment or raster source; they come
    /// back as train slides with metadata only. Annotations that violate
    /// manifest invariants (outside the screened area or the slide bounds,
    /// nonpositive radius) are skipped and reported per item rather than
    /// failing the pull.
    pub fn pull_dataset(&mut self) -> Result<PullOutcome, SyncError> {
        let retries_before = self.retries;
        let slides: Vec<WireSlide> =
            self.get_json(&format!("/api/slides?set={}", self.cfg.image_set))?;

        let mut registry = ClassRegistry::canonical();
        let mut rejected = Vec::new();
        let mut assembled = Vec::with_capacity(slides.len());

        for ws in &slides {
            if let Some(prev) = self.state.slides.get(&ws.slide_id) {
                if ws.revision < prev.revision {
                    return Err(SyncError::Schema(format!(
                        "slide {} revision went backwards ({} -> {})",
                        ws.slide_id, prev.revision, ws.revision
                    )));
                }
            }

            let rects: Vec<Rect> =
                self.get_json(&format!("/api/slides/{}/screened", ws.slide_id))?;
            let anns: Vec<WireAnnotation> =
                self.get_json(&format!("/api/slides/{}/annotations", ws.slide_id))?;

            let map = ScreenMap::new(&ws.slide_id, rects.clone());
            let bounds = Rect::new(0, 0, ws.width, ws.height);
            let mut kept = Vec::with_capacity(anns.len());
            for a in anns {
                let reason = if a.r <= 0 {
                    Some(format!("radius {} must be > 0", a.r))
                } else if !bounds.contains_point(a.cx, a.cy) {
                    Some(format!("center ({}, {}) outside slide bounds", a.cx, a.cy))
                } else if !map.contains_point(a.cx, a.cy) {
                    Some(format!("center ({}, {}) outside the screened area", a.cx, a.cy))
                } else {
                    None
                };
                if let Some(reason) = reason {
                    log::warn!("rejecting annotation {} on {}: {reason}", a.id, ws.slide_id);
                    rejected.push(RejectedAnnotation {
                        slide_id: ws.slide_id.clone(),
                        annotation_id: a.id,
                        reason,
                    });
                    continue;
                }
                kept.push(Annotation {
                    id: a.id,
                    cx: a.cx,
                    cy: a.cy,
                    radius: a.r,
                    class: registry.resolve(&a.class),
                    annotator: a.annotator,
                });
            }

            self.state.slides.insert(
                ws.slide_id.clone(),
                SlideSync { revision: ws.revision, screened: rects, annotation_count: kept.len() },
            );
            assembled.push(SlideManifest {
                slide_id: ws.slide_id.clone(),
                width: ws.width,
                height: ws.height,
                split_role: SplitRole::Train,
                raster_source: None,
                screen_map: map,
                annotations: kept,
            });
        }

        let mut manifest = DatasetManifest::new(assembled);
        manifest.registry = registry;
        if let Err(ModelError::Validation(violations)) = manifest.validate() {
            let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(SyncError::Schema(joined.join("; ")));
        }

        Ok(PullOutcome { manifest, rejected, retries: self.retries - retries_before })
    }

    /// Upload detections scoring at least `min_score`, in batches of 1000.
    ///
    /// Receipts come back in submission order. If a batch past the first
    /// fails for good, the accepted prefix is reported via
    /// [`SyncError::PartialUpload`].
    pub fn push_predictions(
        &mut self,
        slide_id: &str,
        detections: &[Detection],
        min_score: f64,
    ) -> Result<Vec<Receipt>, SyncError> {
        let registry = ClassRegistry::canonical();
        let mut outgoing = Vec::new();
        for d in detections {
            if !(0.0..=1.0).contains(&d.score) || !d.score.is_finite() {
                return Err(SyncError::Schema(format!("detection {}: score {}", d.id, d.score)));
            }
            if !(d.bbox.w > 0.0) || !(d.bbox.h > 0.0) {
                return Err(SyncError::Schema(format!(
                    "detection {}: box {}x{} must have positive extent",
                    d.id, d.bbox.w, d.bbox.h
                )));
            }
            if d.score < min_score {
                continue;
            }
            let class = registry
                .label(d.class)
                .map(str::to_string)
                .unwrap_or_else(|| format!("class-{}", d.class.0));
            outgoing.push(WirePrediction {
                client_id: detection_client_id(slide_id, d),
                class,
                score: d.score,
                bbox: [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
            });
        }

        self.state.pending_uploads = outgoing.len();
        let path = format!("/api/slides/{slide_id}/predictions");
        let mut receipts: Vec<Receipt> = Vec::with_capacity(outgoing.len());
        for chunk in outgoing.chunks(1000) {
            let body = serde_json::to_string(chunk).expect("predictions serialize");
            let text = match self.request("POST", &path, Some(&body)) {
                Ok(text) => text,
                Err(e) if receipts.is_empty() => return Err(e),
                Err(e) => {
                    return Err(SyncError::PartialUpload { receipts, message: e.to_string() })
                }
            };
            let batch: Vec<Receipt> = serde_json::from_str(&text)
                .map_err(|e| SyncError::Schema(format!("{path}: {e}")))?;
            receipts.extend(batch);
            self.state.pending_uploads = outgoing.len() - receipts.len().min(outgoing.len());
        }
        self.state.pending_uploads = 0;
        Ok(receipts)
    }
}

/// In-process HTTP server speaking the four-endpoint schema, seeded from a
/// manifest. This is the conformance reference for the wire format; the
/// client tests run against it, and the CLI can point at it for demos.
pub mod mock {
    use super::*;
    use std::collections::HashMap;
    use std::io::{Read, Write};
    use std::net::{SocketAddr, TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;

    struct Store {
        token: String,
        image_set: String,
        slides: Vec<WireSlide>,
        screened: HashMap<String, Vec<Rect>>,
        annotations: HashMap<String, Vec<WireAnnotation>>,
        /// client_id -> server_id per slide; insertion order preserved
        /// separately so receipts are reproducible.
        predictions: HashMap<String, Vec<(String, u64)>>,
        next_server_id: u64,
    }

    pub struct MockServer {
        addr: SocketAddr,
        store: Arc<Mutex<Store>>,
        /// (skip, fail): after `skip` more requests, fail the next `fail`.
        fault: Arc<Mutex<(u32, u32)>>,
        served: Arc<AtomicU64>,
        shutdown: Arc<AtomicBool>,
        handle: Option<JoinHandle<()>>,
    }

    impl MockServer {
        pub fn spawn(manifest: &DatasetManifest, token: &str, image_set: &str) -> std::io::Result<Self> {
            let mut slides = Vec::new();
            let mut screened = HashMap::new();
            let mut annotations = HashMap::new();
            for s in &manifest.slides {
                slides.push(WireSlide {
                    slide_id: s.slide_id.clone(),
                    width: s.width,
                    height: s.height,
                    revision: 1,
                });
                screened.insert(s.slide_id.clone(), s.screen_map.rects().to_vec());
                let anns = s
                    .annotations
                    .iter()
                    .map(|a| WireAnnotation {
                        id: a.id,
                        cx: a.cx,
                        cy: a.cy,
                        r: a.radius,
                        class: manifest
                            .registry
                            .label(a.class)
                            .unwrap_or("unknown")
                            .to_string(),
                        annotator: a.annotator.clone(),
                    })
                    .collect();
                annotations.insert(s.slide_id.clone(), anns);
            }
            let store = Arc::new(Mutex::new(Store {
                token: token.to_string(),
                image_set: image_set.to_string(),
                slides,
                screened,
                annotations,
                predictions: HashMap::new(),
                next_server_id: 1,
            }));

            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let fault = Arc::new(Mutex::new((0u32, 0u32)));
            let served = Arc::new(AtomicU64::new(0));
            let shutdown = Arc::new(AtomicBool::new(false));

            let handle = {
                let store = Arc::clone(&store);
                let fault = Arc::clone(&fault);
                let served = Arc::clone(&served);
                let shutdown = Arc::clone(&shutdown);
                std::thread::spawn(move || {
                    for conn in listener.incoming() {
                        if shutdown.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(mut stream) = conn else { continue };
                        served.fetch_add(1, Ordering::SeqCst);
                        let _ = handle_connection(&mut stream, &store, &fault);
                    }
                })
            };

            Ok(Self { addr, store, fault, served, shutdown, handle: Some(handle) })
        }

        pub fn base_url(&self) -> String {
            format!("http://{}", self.addr)
        }

        /// Config pointing at this server, with the seeded credentials.
        pub fn server_config(&self) -> ServerConfig {
            let store = self.store.lock().unwrap();
            ServerConfig::new(&self.base_url(), &store.token, &store.image_set)
        }

        /// Fail the next `n` requests with HTTP 503.
        pub fn fail_next(&self, n: u32) {
            *self.fault.lock().unwrap() = (0, n);
        }

        /// Serve `skip` more requests normally, then fail `n`.
        pub fn fail_after(&self, skip: u32, n: u32) {
            *self.fault.lock().unwrap() = (skip, n);
        }

        pub fn requests_served(&self) -> u64 {
            self.served.load(Ordering::SeqCst)
        }

        pub fn prediction_count(&self, slide_id: &str) -> usize {
            self.store
                .lock()
                .unwrap()
                .predictions
                .get(slide_id)
                .map_or(0, |v| v.len())
        }

        pub fn set_revision(&self, slide_id: &str, revision: u64) {
            let mut store = self.store.lock().unwrap();
            if let Some(s) = store.slides.iter_mut().find(|s| s.slide_id == slide_id) {
                s.revision = revision;
            }
        }

        /// Add a raw annotation record, bypassing any validation. Lets
        /// tests seed items the client is expected to reject.
        pub fn inject_annotation(&self, slide_id: &str, ann: WireAnnotation) {
            self.store
                .lock()
                .unwrap()
                .annotations
                .entry(slide_id.to_string())
                .or_default()
                .push(ann);
        }
    }

    impl Drop for MockServer {
        fn drop(&mut self) {
            self.shutdown.store(true, Ordering::SeqCst);
            // poke the listener out of accept()
            let _ = TcpStream::connect(self.addr);
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    struct Request {
        method: String,
        path: String,
        query: Option<String>,
        auth: Option<String>,
        body: Vec<u8>,
    }

    fn read_request(stream: &mut TcpStream) -> std::io::Result<Request> {
        let mut buf = Vec::new();
        let mut tmp = [0u8; 8192];
        let header_end = loop {
            if let Some(pos) = find(&buf, b"\r\n\r\n") {
                break pos;
            }
            if buf.len() > 1 << 20 {
                return Err(std::io::Error::other("header too large"));
            }
            let n = stream.read(&mut tmp)?;
            if n == 0 {
                return Err(std::io::Error::other("connection closed mid-request"));
            }
            buf.extend_from_slice(&tmp[..n]);
        };

        let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
        let mut lines = head.lines();
        let request_line = lines.next().unwrap_or_default().to_string();
        let mut parts = request_line.split_whitespace();
        let method = parts.next().unwrap_or_default().to_string();
        let target = parts.next().unwrap_or_default();
        let (path, query) = match target.split_once('?') {
            Some((p, q)) => (p.to_string(), Some(q.to_string())),
            None => (target.to_string(), None),
        };

        let mut auth = None;
        let mut content_length = 0usize;
        for line in lines {
            if let Some((k, v)) = line.split_once(':') {
                let v = v.trim();
                match k.to_ascii_lowercase().as_str() {
                    "authorization" => auth = Some(v.to_string()),
                    "content-length" => content_length = v.parse().unwrap_or(0),
                    _ => {}
                }
            }
        }

        let mut body = buf[header_end + 4..].to_vec();
        while body.len() < content_length {
            let n = stream.read(&mut tmp)?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&tmp[..n]);
        }
        body.truncate(content_length);
        Ok(Request { method, path, query, auth, body })
    }

    fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
        haystack.windows(needle.len()).position(|w| w == needle)
    }

    fn respond(stream: &mut TcpStream, status: u16, reason: &str, body: &str) -> std::io::Result<()> {
        write!(
            stream,
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    fn handle_connection(
        stream: &mut TcpStream,
        store: &Arc<Mutex<Store>>,
        fault: &Arc<Mutex<(u32, u32)>>,
    ) -> std::io::Result<()> {
        let req = read_request(stream)?;

        {
            let mut f = fault.lock().unwrap();
            if f.0 > 0 {
                f.0 -= 1;
            } else if f.1 > 0 {
                f.1 -= 1;
                return respond(stream, 503, "Service Unavailable", r#"{"error":"injected fault"}"#);
            }
        }

        let mut store = store.lock().unwrap();
        if req.auth.as_deref() != Some(&format!("Bearer {}", store.token)) {
            return respond(stream, 401, "Unauthorized", r#"{"error":"bad token"}"#);
        }

        let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
        match (req.method.as_str(), segments.as_slice()) {
            ("GET", ["api", "slides"]) => {
                let wanted = req
                    .query
                    .as_deref()
                    .and_then(|q| q.split('&').find_map(|kv| kv.strip_prefix("set=")));
                if wanted != Some(store.image_set.as_str()) {
                    return respond(stream, 404, "Not Found", r#"{"error":"unknown image set"}"#);
                }
                let body = serde_json::to_string(&store.slides).unwrap();
                respond(stream, 200, "OK", &body)
            }
            ("GET", ["api", "slides", sid, "screened"]) => match store.screened.get(*sid) {
                Some(rects) => {
                    let body = serde_json::to_string(rects).unwrap();
                    respond(stream, 200, "OK", &body)
                }
                None => respond(stream, 404, "Not Found", r#"{"error":"unknown slide"}"#),
            },
            ("GET", ["api", "slides", sid, "annotations"]) => match store.annotations.get(*sid) {
                Some(anns) => {
                    let body = serde_json::to_string(anns).unwrap();
                    respond(stream, 200, "OK", &body)
                }
                None => respond(stream, 404, "Not Found", r#"{"error":"unknown slide"}"#),
            },
            ("POST", ["api", "slides", sid, "predictions"]) => {
                if !store.screened.contains_key(*sid) {
                    return respond(stream, 404, "Not Found", r#"{"error":"unknown slide"}"#);
                }
                let parsed: Result<Vec<WirePrediction>, _> = serde_json::from_slice(&req.body);
                let Ok(preds) = parsed else {
                    return respond(stream, 400, "Bad Request", r#"{"error":"malformed body"}"#);
                };
                let mut receipts = Vec::with_capacity(preds.len());
                for p in preds {
                    let existing = store
                        .predictions
                        .get(*sid)
                        .and_then(|v| v.iter().find(|(cid, _)| *cid == p.client_id))
                        .map(|(_, sid)| *sid);
                    let server_id = match existing {
                        Some(id) => id,
                        None => {
                            let id = store.next_server_id;
                            store.next_server_id += 1;
                            store
                                .predictions
                                .entry(sid.to_string())
                                .or_default()
                                .push((p.client_id.clone(), id));
                            id
                        }
                    };
                    receipts.push(Receipt { client_id: p.client_id, server_id });
                }
                let body = serde_json::to_string(&receipts).unwrap();
                respond(stream, 200, "OK", &body)
            }
            _ => respond(stream, 404, "Not Found", r#"{"error":"no such endpoint"}"#),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::mock::MockServer;
    use super::*;
    use crate::eval::BoxF;
    use crate::model::{lattice_slide, manifest_to_json, save_manifest, CellClass};

    struct RecordingSleeper(Vec<Duration>);

    impl Sleeper for RecordingSleeper {
        fn sleep(&mut self, d: Duration) {
            self.0.push(d);
        }
    }

    fn seed_manifest() -> DatasetManifest {
        let s1 = lattice_slide(
            "slide-a",
            2000,
            2000,
            vec![Rect::new(0, 0, 2000, 2000)],
            &[(CellClass::EOSINOPHIL, 4), (CellClass::LYMPHOCYTE, 2)],
            Rect::new(300, 300, 200, 200),
            20,
            10,
            SplitRole::Train,
            1,
        )
        .unwrap();
        let s2 = lattice_slide(
            "slide-b",
            1500,
            1200,
            vec![Rect::new(100, 100, 800, 800)],
            &[(CellClass::NEUTROPHIL, 4)],
            Rect::new(200, 200, 300, 300),
            25,
            12,
            SplitRole::Train,
            100,
        )
        .unwrap();
        DatasetManifest::new(vec![s1, s2])
    }

    fn client_for(server: &MockServer) -> SyncClient<RecordingSleeper> {
        SyncClient::with_sleeper(server.server_config(), RecordingSleeper(Vec::new())).unwrap()
    }

    fn crafted_detections(n: usize) -> Vec<Detection> {
        (0..n)
            .map(|i| Detection {
                id: i as u64 + 1,
                image_id: "slide-a".into(),
                class: CellClass((i % 5) as u32),
                score: 0.5 + 0.5 * ((i as f64 + 0.5) / n as f64),
                bbox: BoxF::new((i % 100) as f64 * 30.0, (i / 100) as f64 * 30.0, 20.0, 20.0),
            })
            .collect()
    }

    #[test]
    fn pull_round_trips_the_seeded_manifest() {
        let seed = seed_manifest();
        assert_eq!(seed.total_annotations(), 10);
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        let outcome = client.pull_dataset().unwrap();
        assert!(outcome.rejected.is_empty());
        assert_eq!(outcome.retries, 0);
        assert_eq!(manifest_to_json(&outcome.manifest), manifest_to_json(&seed));
        let state = client.state();
        assert_eq!(state.slides["slide-a"].revision, 1);
        assert_eq!(state.slides["slide-a"].annotation_count, 6);
        assert_eq!(state.slides["slide-b"].annotation_count, 4);
    }

    #[test]
    fn out_of_screen_annotations_are_rejected_item_by_item() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        server.inject_annotation(
            "slide-b",
            WireAnnotation {
                id: 900,
                cx: 50, // inside bounds, outside the screened rect
                cy: 50,
                r: 10,
                class: "eosinophil".into(),
                annotator: "expert".into(),
            },
        );
        server.inject_annotation(
            "slide-b",
            WireAnnotation {
                id: 901,
                cx: -5,
                cy: 40,
                r: 10,
                class: "eosinophil".into(),
                annotator: "expert".into(),
            },
        );
        let mut client = client_for(&server);
        let outcome = client.pull_dataset().unwrap();
        let ids: Vec<u64> = outcome.rejected.iter().map(|r| r.annotation_id).collect();
        assert_eq!(ids, vec![900, 901]);
        assert!(outcome.rejected[0].reason.contains("screened"));
        assert!(outcome.rejected[1].reason.contains("bounds"));
        assert_eq!(outcome.manifest.total_annotations(), 10);
        assert_eq!(manifest_to_json(&outcome.manifest), manifest_to_json(&seed_manifest()));
    }

    #[test]
    fn two_transient_failures_then_success() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        server.fail_next(2);
        let mut client = client_for(&server);
        let outcome = client.pull_dataset().unwrap();
        assert_eq!(outcome.retries, 2);
        assert_eq!(
            client.sleeper.0,
            vec![Duration::from_millis(500), Duration::from_millis(1000)]
        );
        assert_eq!(manifest_to_json(&outcome.manifest), manifest_to_json(&seed));
    }

    #[test]
    fn transport_gives_up_after_the_retry_budget() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        server.fail_next(50);
        let mut client = client_for(&server);
        match client.pull_dataset().unwrap_err() {
            SyncError::Transport { attempts, .. } => assert_eq!(attempts, 4),
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(
            client.sleeper.0,
            vec![
                Duration::from_millis(500),
                Duration::from_millis(1000),
                Duration::from_millis(2000)
            ]
        );
    }

    #[test]
    fn bad_token_fails_without_retrying() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut cfg = server.server_config();
        cfg.token = "wrong".into();
        let mut client = SyncClient::with_sleeper(cfg, RecordingSleeper(Vec::new())).unwrap();
        match client.pull_dataset().unwrap_err() {
            SyncError::Auth { status } => assert_eq!(status, 401),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(client.sleeper.0.is_empty());
    }

    #[test]
    fn wrong_image_set_is_a_schema_error() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut cfg = server.server_config();
        cfg.image_set = "set-2".into();
        let mut client = SyncClient::with_sleeper(cfg, RecordingSleeper(Vec::new())).unwrap();
        assert!(matches!(client.pull_dataset().unwrap_err(), SyncError::Schema(_)));
    }

    #[test]
    fn large_push_batches_by_the_thousand() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        let dets = crafted_detections(2500);
        let before = server.requests_served();
        let receipts = client.push_predictions("slide-a", &dets, 0.0).unwrap();
        assert_eq!(receipts.len(), 2500);
        assert_eq!(server.requests_served() - before, 3);
        assert_eq!(server.prediction_count("slide-a"), 2500);
        // server ids are fresh and unique
        let mut ids: Vec<u64> = receipts.iter().map(|r| r.server_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 2500);
        assert_eq!(client.state().pending_uploads, 0);
    }

    #[test]
    fn repushing_the_same_set_creates_nothing_new() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        let dets = crafted_detections(1200);
        let first = client.push_predictions("slide-a", &dets, 0.0).unwrap();
        let second = client.push_predictions("slide-a", &dets, 0.0).unwrap();
        assert_eq!(first, second);
        assert_eq!(server.prediction_count("slide-a"), 1200);
    }

    #[test]
    fn min_score_filters_before_upload() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        let dets: Vec<Detection> = (0..10)
            .map(|i| Detection {
                id: i + 1,
                image_id: "slide-a".into(),
                class: CellClass(0),
                score: 0.05 + 0.1 * i as f64,
                bbox: BoxF::new(i as f64 * 50.0, 0.0, 20.0, 20.0),
            })
            .collect();
        let receipts = client.push_predictions("slide-a", &dets, 0.5).unwrap();
        assert_eq!(receipts.len(), 5);
        assert_eq!(server.prediction_count("slide-a"), 5);
    }

    #[test]
    fn interrupted_push_reports_the_accepted_prefix() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        let dets = crafted_detections(1500);
        server.fail_after(1, 50); // first batch lands, second never does
        match client.push_predictions("slide-a", &dets, 0.0).unwrap_err() {
            SyncError::PartialUpload { receipts, .. } => assert_eq!(receipts.len(), 1000),
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(server.prediction_count("slide-a"), 1000);
    }

    #[test]
    fn client_ids_are_stable_uuids() {
        let d = crafted_detections(1).remove(0);
        let a = detection_client_id("slide-a", &d);
        let b = detection_client_id("slide-a", &d);
        assert_eq!(a, b);
        assert_eq!(a.len(), 36);
        assert_eq!(a.as_bytes()[14], b'4'); // version nibble
        let c = detection_client_id("slide-b", &d);
        assert_ne!(a, c);
    }

    #[test]
    fn pull_save_load_pull_is_a_fixed_point() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        let first = client.pull_dataset().unwrap().manifest;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        save_manifest(&first, &path).unwrap();
        let loaded = crate::model::load_manifest(&path).unwrap();
        assert_eq!(manifest_to_json(&loaded), manifest_to_json(&first));

        let second = client.pull_dataset().unwrap().manifest;
        assert_eq!(manifest_to_json(&second), manifest_to_json(&first));
    }

    #[test]
    fn revisions_may_not_regress() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        client.pull_dataset().unwrap();

        server.set_revision("slide-a", 5);
        client.pull_dataset().unwrap();
        assert_eq!(client.state().slides["slide-a"].revision, 5);

        server.set_revision("slide-a", 2);
        match client.pull_dataset().unwrap_err() {
            SyncError::Schema(msg) => assert!(msg.contains("revision")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn push_rejects_malformed_detections() {
        let seed = seed_manifest();
        let server = MockServer::spawn(&seed, "tok", "set-1").unwrap();
        let mut client = client_for(&server);
        let mut dets = crafted_detections(1);
        dets[0].score = 1.5;
        assert!(matches!(
            client.push_predictions("slide-a", &dets, 0.0).unwrap_err(),
            SyncError::Schema(_)
        ));
        let mut dets = crafted_detections(1);
        dets[0].bbox.w = 0.0;
        assert!(matches!(
            client.push_predictions("slide-a", &dets, 0.0).unwrap_err(),
            SyncError::Schema(_)
        ));
    }
}
