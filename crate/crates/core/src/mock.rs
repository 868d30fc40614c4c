//! In-process HTTP doubles for the expert and engine endpoints.
//!
//! Both servers bind an ephemeral localhost port, answer the real wire
//! protocols, and produce fully deterministic payloads derived from
//! the request (image id, task, vocabulary), so tests and local dry
//! runs of the whole pipeline need no network and no model weights.
//! Failure injection is scripted per task (expert) or globally
//! (engine), and the engine tracks its high-water concurrent request
//! count so callers can assert the in-flight bound actually binds.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

const TAG_NAMES: [&str; 20] = [
    "chair", "table", "lamp", "poster", "window", "person", "tree", "car", "sign", "book",
    "cup", "dog", "flower", "building", "bicycle", "clock", "bottle", "painting", "shelf",
    "curtain",
];

const OCR_TEXTS: [&str; 6] = [
    "SALE 50% OFF",
    "OPEN 24 HOURS",
    "EST. 1924",
    "CAFE DE PARIS",
    "GRAND OPENING",
    "NO PARKING",
];

/// Boxes are generated inside this square, which keeps them in-bounds
/// for every image that passed the resolution filter.
const BOX_EXTENT: u32 = 448;

struct ExpertState {
    requests_total: AtomicU64,
    task_counts: Mutex<HashMap<String, u64>>,
    scripted: Mutex<HashMap<String, VecDeque<u16>>>,
}

/// Mock multi-task annotation expert serving POST /v1/annotate.
pub struct MockExpert {
    addr: SocketAddr,
    state: Arc<ExpertState>,
    server: JoinHandle<()>,
}

impl MockExpert {
    pub async fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.expect("bind mock expert");
        let addr = listener.local_addr().expect("local addr");
        let state = Arc::new(ExpertState {
            requests_total: AtomicU64::new(0),
            task_counts: Mutex::new(HashMap::new()),
            scripted: Mutex::new(HashMap::new()),
        });
        let app = Router::new()
            .route("/v1/annotate", post(annotate_handler))
            .with_state(Arc::clone(&state));
        let server = tokio::spawn(async move {
            axum::serve(listener, app).await.ok();
        });
        Self { addr, state, server }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Queues HTTP status codes returned (instead of a payload) by the
    /// next requests for one task, in order.
    pub fn script_task_failures(&self, task: &str, statuses: impl IntoIterator<Item = u16>) {
        self.state
            .scripted
            .lock()
            .unwrap()
            .entry(task.to_string())
            .or_default()
            .extend(statuses);
    }

    pub fn requests_total(&self) -> u64 {
        self.state.requests_total.load(Ordering::SeqCst)
    }

    pub fn task_count(&self, task: &str) -> u64 {
        self.state
            .task_counts
            .lock()
            .unwrap()
            .get(task)
            .copied()
            .unwrap_or(0)
    }
}

impl Drop for MockExpert {
    fn drop(&mut self) {
        self.server.abort();
    }
}

fn gen_box(rng: &mut ChaCha8Rng, small: bool) -> [i64; 4] {
    let (wmin, wmax) = if small { (4, 16) } else { (40, 200) };
    let w: u32 = rng.random_range(wmin..=wmax);
    let h: u32 = rng.random_range(wmin..=wmax);
    let x1: u32 = rng.random_range(0..BOX_EXTENT - w);
    let y1: u32 = rng.random_range(0..BOX_EXTENT - h);
    [x1 as i64, y1 as i64, (x1 + w) as i64, (y1 + h) as i64]
}

async fn annotate_handler(
    State(state): State<Arc<ExpertState>>,
    Json(req): Json<Value>,
) -> (StatusCode, Json<Value>) {
    state.requests_total.fetch_add(1, Ordering::SeqCst);
    let task = req["tasks"][0].as_str().unwrap_or("").to_string();
    *state
        .task_counts
        .lock()
        .unwrap()
        .entry(task.clone())
        .or_insert(0) += 1;

    if let Some(queue) = state.scripted.lock().unwrap().get_mut(&task) {
        if let Some(code) = queue.pop_front() {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            return (status, Json(json!({ "error": "scripted failure" })));
        }
    }

    let image_id = req["image_id"].as_str().unwrap_or("");
    let mut rng =
        ChaCha8Rng::seed_from_u64(fnv1a64(image_id.as_bytes()) ^ fnv1a64(task.as_bytes()));

    let body = match task.as_str() {
        "tags" => {
            let n = rng.random_range(3..=8usize);
            let mut order: Vec<usize> = (0..TAG_NAMES.len()).collect();
            order.shuffle(&mut rng);
            let tags: Vec<Value> = order
                .into_iter()
                .take(n)
                .map(|i| {
                    json!({
                        "name": TAG_NAMES[i],
                        "score": (rng.random_range(30..=99) as f64) / 100.0,
                    })
                })
                .collect();
            json!({ "tags": tags })
        }
        "detect_closed" => {
            let n = rng.random_range(2..=6usize);
            let boxes: Vec<Value> = (0..n)
                .map(|_| {
                    let small = rng.random_bool(0.3);
                    json!({
                        "label": TAG_NAMES[rng.random_range(0..TAG_NAMES.len())],
                        "bbox": gen_box(&mut rng, small),
                        "score": (rng.random_range(20..=99) as f64) / 100.0,
                        "source": "closed_set",
                    })
                })
                .collect();
            json!({ "boxes": boxes })
        }
        "detect_open" => {
            let vocab: Vec<String> = req["vocabulary"]
                .as_array()
                .map(|a| {
                    a.iter()
                        .filter_map(|v| v.as_str().map(str::to_string))
                        .collect()
                })
                .unwrap_or_default();
            let boxes: Vec<Value> = if vocab.is_empty() {
                Vec::new()
            } else {
                let n = rng.random_range(1..=vocab.len().min(5));
                (0..n)
                    .map(|_| {
                        let small = rng.random_bool(0.3);
                        json!({
                            "label": vocab[rng.random_range(0..vocab.len())].clone(),
                            "bbox": gen_box(&mut rng, small),
                            "score": (rng.random_range(20..=90) as f64) / 100.0,
                            "source": "open_set",
                        })
                    })
                    .collect()
            };
            json!({ "boxes": boxes })
        }
        "ocr" => {
            let n = rng.random_range(0..=3usize);
            let lines: Vec<Value> = (0..n)
                .map(|_| {
                    let text = OCR_TEXTS[rng.random_range(0..OCR_TEXTS.len())];
                    let boxless = rng.random_bool(0.2);
                    let score = (rng.random_range(50..=99) as f64) / 100.0;
                    if boxless {
                        json!({ "text": text, "score": score })
                    } else {
                        json!({ "text": text, "bbox": gen_box(&mut rng, false), "score": score })
                    }
                })
                .collect();
            json!({ "ocr": lines })
        }
        other => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": format!("unknown task {other:?}") })),
            );
        }
    };
    (StatusCode::OK, Json(body))
}

struct EngineState {
    requests_total: AtomicU64,
    scripted: Mutex<VecDeque<u16>>,
    always_status: Mutex<Option<u16>>,
    in_flight: AtomicI64,
    high_water: AtomicI64,
    delay_ms: AtomicU64,
}

/// Mock caption engine serving POST /v1/chat/completions.
pub struct MockEngine {
    addr: SocketAddr,
    state: Arc<EngineState>,
    server: JoinHandle<()>,
}

impl MockEngine {
    pub async fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.expect("bind mock engine");
        let addr = listener.local_addr().expect("local addr");
        let state = Arc::new(EngineState {
            requests_total: AtomicU64::new(0),
            scripted: Mutex::new(VecDeque::new()),
            always_status: Mutex::new(None),
            in_flight: AtomicI64::new(0),
            high_water: AtomicI64::new(0),
            delay_ms: AtomicU64::new(0),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat_handler))
            .with_state(Arc::clone(&state));
        let server = tokio::spawn(async move {
            axum::serve(listener, app).await.ok();
        });
        Self { addr, state, server }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Queues status codes consumed one per request, in arrival order;
    /// 200 entries succeed normally. An empty queue always succeeds.
    pub fn script_statuses(&self, statuses: impl IntoIterator<Item = u16>) {
        self.state.scripted.lock().unwrap().extend(statuses);
    }

    /// Forces every request to this status until cleared with `None`.
    pub fn set_always_status(&self, status: Option<u16>) {
        *self.state.always_status.lock().unwrap() = status;
    }

    /// Artificial per-request latency, to make concurrency observable.
    pub fn set_delay_ms(&self, ms: u64) {
        self.state.delay_ms.store(ms, Ordering::SeqCst);
    }

    pub fn requests_total(&self) -> u64 {
        self.state.requests_total.load(Ordering::SeqCst)
    }

    /// Highest number of requests ever simultaneously in the handler.
    pub fn high_water_in_flight(&self) -> i64 {
        self.state.high_water.load(Ordering::SeqCst)
    }
}

impl Drop for MockEngine {
    fn drop(&mut self) {
        self.server.abort();
    }
}

/// Deterministic multi-sentence caption keyed off the image reference,
/// with enough variety (lengths, decimals, quoted text) to exercise
/// the statistics rules downstream.
pub fn deterministic_caption(image_ref: &str) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(image_ref.as_bytes()));
    let sentence_count = rng.random_range(3..=7usize);
    let mut caption = String::new();
    for i in 0..sentence_count {
        if i > 0 {
            caption.push(' ');
        }
        match rng.random_range(0..4u8) {
            0 => {
                let a = TAG_NAMES[rng.random_range(0..TAG_NAMES.len())];
                let b = TAG_NAMES[rng.random_range(0..TAG_NAMES.len())];
                caption.push_str(&format!(
                    "The image depicts a {a} positioned near a weathered {b}."
                ));
            }
            1 => {
                let whole: u32 = rng.random_range(1..=9);
                let frac: u32 = rng.random_range(1..=9);
                caption.push_str(&format!(
                    "The central object spans roughly {whole}.{frac} meters across the frame."
                ));
            }
            2 => {
                let text = OCR_TEXTS[rng.random_range(0..OCR_TEXTS.len())];
                caption.push_str(&format!(
                    "Bold lettering reads \"{text}\" along the upper edge."
                ));
            }
            _ => {
                let a = TAG_NAMES[rng.random_range(0..TAG_NAMES.len())];
                caption.push_str(&format!(
                    "Soft light falls across the {a}, casting long muted shadows."
                ));
            }
        }
    }
    caption
}

async fn chat_handler(
    State(state): State<Arc<EngineState>>,
    Json(req): Json<Value>,
) -> (StatusCode, Json<Value>) {
    state.requests_total.fetch_add(1, Ordering::SeqCst);
    let current = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.high_water.fetch_max(current, Ordering::SeqCst);

    let delay = state.delay_ms.load(Ordering::SeqCst);
    if delay > 0 {
        tokio::time::sleep(std::time::Duration::from_millis(delay)).await;
    }

    let forced: Option<u16> = {
        let always = *state.always_status.lock().unwrap();
        match always {
            Some(code) => Some(code),
            None => state
                .scripted
                .lock()
                .unwrap()
                .pop_front()
                .filter(|&code| code != 200),
        }
    };

    state.in_flight.fetch_sub(1, Ordering::SeqCst);

    if let Some(code) = forced {
        let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return (status, Json(json!({ "error": { "message": "scripted failure" } })));
    }

    let image_ref = req["messages"][0]["content"]
        .as_array()
        .and_then(|parts| {
            parts
                .iter()
                .find(|p| p["type"] == "image_url")
                .and_then(|p| p["image_url"]["url"].as_str())
        })
        .unwrap_or("unknown");

    let caption = deterministic_caption(image_ref);
    (
        StatusCode::OK,
        Json(json!({
            "model": "mock-engine-1",
            "choices": [ { "message": { "role": "assistant", "content": caption } } ],
        })),
    )
}
