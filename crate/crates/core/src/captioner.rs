//! Batch caption generation against a chat-completions style endpoint:
//! bounded concurrency, retry with exponential backoff and full jitter,
//! and append-only checkpointing so a killed run resumes without
//! re-captioning finished images.
//!
//! The output file doubles as the checkpoint. Every outcome (success or
//! failure) is one flushed JSON line; on resume the completed id set is
//! rebuilt from the output and failures files. A torn trailing line
//! (from a kill mid-write) is truncated with a warning; a malformed
//! interior line means real corruption and resume is refused.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, Semaphore};

use crate::fusion::{PromptKind, PromptLine};

/// Cooperative cancellation handle shared with the caller; flipping it
/// stops new requests while letting in-flight ones finish and persist.
pub type CancelFlag = Arc<AtomicBool>;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path} is corrupt at line {line}: {detail}; rerun with --restart to discard it")]
    CheckpointCorrupt {
        path: String,
        line: usize,
        detail: String,
    },
}

/// Exponential backoff with full jitter: the delay before retry n is
/// uniform in [0, min(cap, initial * factor^n)].
#[derive(Debug, Clone, Copy)]
pub struct BackoffPolicy {
    pub initial_ms: u64,
    pub factor: f64,
    pub cap_ms: u64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self {
            initial_ms: 500,
            factor: 2.0,
            cap_ms: 30_000,
        }
    }
}

impl BackoffPolicy {
    /// Upper bound of the jitter window for the given retry ordinal.
    pub fn bound_ms(&self, attempt: u32) -> u64 {
        let raw = self.initial_ms as f64 * self.factor.powi(attempt as i32);
        raw.min(self.cap_ms as f64) as u64
    }

    pub fn jittered_ms(&self, attempt: u32, rng: &mut impl Rng) -> u64 {
        let bound = self.bound_ms(attempt);
        if bound == 0 {
            0
        } else {
            rng.random_range(0..=bound)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    /// 4xx other than 429, or a response that cannot be used.
    Permanent,
    /// Retryable class (timeout, 429, 5xx) that exhausted its retries.
    Transient,
}

/// One successful caption, as persisted to captions.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
    pub engine_id: String,
    pub latency_ms: u64,
    #[serde(rename = "attempts")]
    pub attempt_count: u32,
    pub prompt_kind: PromptKind,
}

/// One failed caption, as persisted to the failures file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub image_id: String,
    pub error_class: FailureClass,
    pub detail: String,
    #[serde(rename = "attempts")]
    pub attempt_count: u32,
    pub prompt_kind: PromptKind,
}

#[derive(Debug, Clone)]
pub enum CaptionOutcome {
    Success(CaptionRecord),
    Failure(FailureRecord),
}

impl CaptionOutcome {
    pub fn image_id(&self) -> &str {
        match self {
            CaptionOutcome::Success(r) => &r.image_id,
            CaptionOutcome::Failure(r) => &r.image_id,
        }
    }
}

struct CallError {
    retryable: bool,
    detail: String,
}

/// Client for a chat-completions endpoint that accepts text plus
/// image-url content parts.
pub struct EngineClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::Client,
    max_retries: u32,
    backoff: BackoffPolicy,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: Vec<ContentPart<'a>>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ContentPart<'a> {
    Text { text: &'a str },
    ImageUrl { image_url: ImageUrlPart<'a> },
}

#[derive(Serialize)]
struct ImageUrlPart<'a> {
    url: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl EngineClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        let base_url: String = base_url.into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            http: reqwest::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("client construction"),
            max_retries: 3,
            backoff: BackoffPolicy::default(),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: BackoffPolicy) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("client construction");
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// One attempt, no retry. Returns (caption text, engine id).
    async fn complete_once(
        &self,
        prompt_text: &str,
        image_uri: &str,
    ) -> Result<(String, String), CallError> {
        let url = format!("{}/v1/chat/completions", self.base_url);
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: vec![
                    ContentPart::Text { text: prompt_text },
                    ContentPart::ImageUrl {
                        image_url: ImageUrlPart { url: image_uri },
                    },
                ],
            }],
        };
        let mut req = self.http.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => {
                return Err(CallError {
                    retryable: true,
                    detail: format!("transport: {e}"),
                })
            }
        };
        let status = resp.status();
        if !status.is_success() {
            return Err(CallError {
                retryable: status.as_u16() == 429 || status.is_server_error(),
                detail: format!("HTTP {}", status.as_u16()),
            });
        }
        let parsed: ChatResponse = resp.json().await.map_err(|e| CallError {
            retryable: false,
            detail: format!("schema-invalid response: {e}"),
        })?;
        let engine_id = parsed.model.unwrap_or_else(|| self.model.clone());
        let caption = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .unwrap_or_default();
        Ok((caption, engine_id))
    }

    /// Full retry loop around [`Self::complete_once`]. Used by the
    /// caption batch and by category classification.
    pub async fn complete_with_retries(
        &self,
        prompt_text: &str,
        image_uri: &str,
    ) -> Result<(String, String, u32), (FailureClass, String, u32)> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.complete_once(prompt_text, image_uri).await {
                Ok((caption, engine_id)) => return Ok((caption, engine_id, attempt)),
                Err(e) if e.retryable && attempt <= self.max_retries => {
                    let delay = self.backoff.jittered_ms(attempt - 1, &mut rand::rng());
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                }
                Err(e) => {
                    let class = if e.retryable {
                        FailureClass::Transient
                    } else {
                        FailureClass::Permanent
                    };
                    return Err((class, e.detail, attempt));
                }
            }
        }
    }

    /// Captions one prompt. Failures come back as data, never as an
    /// error: both outcomes are persisted by the batch loop.
    pub async fn request_caption(&self, line: &PromptLine) -> CaptionOutcome {
        let started = Instant::now();
        match self.complete_with_retries(&line.prompt, &line.uri).await {
            Ok((caption, engine_id, attempts)) => {
                if caption.is_empty() {
                    return CaptionOutcome::Failure(FailureRecord {
                        image_id: line.image_id.clone(),
                        error_class: FailureClass::Permanent,
                        detail: "engine returned an empty caption".to_string(),
                        attempt_count: attempts,
                        prompt_kind: line.kind,
                    });
                }
                CaptionOutcome::Success(CaptionRecord {
                    image_id: line.image_id.clone(),
                    caption,
                    engine_id,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempt_count: attempts,
                    prompt_kind: line.kind,
                })
            }
            Err((class, detail, attempts)) => CaptionOutcome::Failure(FailureRecord {
                image_id: line.image_id.clone(),
                error_class: class,
                detail,
                attempt_count: attempts,
                prompt_kind: line.kind,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeMode {
    /// Continue from existing output files.
    Resume,
    /// Discard existing output files and start over.
    Restart,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchReport {
    /// Unique prompt ids in the input.
    pub input_count: usize,
    /// Ids skipped because a previous run already finished them.
    pub already_complete: usize,
    pub succeeded: usize,
    pub failed_permanent: usize,
    pub failed_transient: usize,
    /// True when the cancel flag stopped the run before the input was
    /// drained.
    pub cancelled: bool,
    /// Torn trailing checkpoint lines dropped during resume.
    pub recovered_torn_lines: usize,
    pub p50_latency_ms: u64,
    pub p95_latency_ms: u64,
}

/// The failures file that rides next to an output path:
/// captions.jsonl -> captions.failures.jsonl.
pub fn failures_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("failures.jsonl")
}

#[derive(Debug)]
struct CheckpointScan {
    completed: Vec<String>,
    torn_tail: bool,
}

/// Reads one checkpoint file, truncating a torn trailing line (no final
/// newline) and rejecting interior corruption.
fn scan_checkpoint(path: &Path) -> Result<CheckpointScan, CaptionError> {
    let io_err = |source| CaptionError::Io {
        path: path.display().to_string(),
        source,
    };
    if !path.exists() {
        return Ok(CheckpointScan {
            completed: Vec::new(),
            torn_tail: false,
        });
    }
    let mut bytes = std::fs::read(path).map_err(io_err)?;
    let mut torn_tail = false;
    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        bytes.truncate(keep);
        std::fs::write(path, &bytes).map_err(io_err)?;
        torn_tail = true;
    }
    let mut completed = Vec::new();
    for (idx, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let parsed: serde_json::Value =
            serde_json::from_slice(line).map_err(|e| CaptionError::CheckpointCorrupt {
                path: path.display().to_string(),
                line: idx + 1,
                detail: e.to_string(),
            })?;
        let id = parsed
            .get("image_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| CaptionError::CheckpointCorrupt {
                path: path.display().to_string(),
                line: idx + 1,
                detail: "line lacks an image_id".to_string(),
            })?;
        completed.push(id.to_string());
    }
    Ok(CheckpointScan {
        completed,
        torn_tail,
    })
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs the whole prompt set against the engine with at most
/// `max_in_flight` outstanding requests, appending every outcome to the
/// output (or failures) file as it lands.
pub async fn run_batch(
    prompts: Vec<PromptLine>,
    client: Arc<EngineClient>,
    max_in_flight: usize,
    out_path: &Path,
    resume: ResumeMode,
    cancel: &CancelFlag,
) -> Result<BatchReport, CaptionError> {
    assert!(max_in_flight > 0, "max_in_flight must be positive");
    let fail_path = failures_path(out_path);
    if resume == ResumeMode::Restart {
        for p in [out_path, &fail_path] {
            if p.exists() {
                std::fs::remove_file(p).map_err(|source| CaptionError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
            }
        }
    }

    let out_scan = scan_checkpoint(out_path)?;
    let fail_scan = scan_checkpoint(&fail_path)?;
    let mut completed: HashSet<String> = out_scan.completed.into_iter().collect();
    completed.extend(fail_scan.completed);
    let recovered_torn_lines = out_scan.torn_tail as usize + fail_scan.torn_tail as usize;

    let mut seen_input = HashSet::new();
    let mut pending: Vec<PromptLine> = Vec::new();
    let mut input_count = 0usize;
    let mut already_complete = 0usize;
    for line in prompts {
        if !seen_input.insert(line.image_id.clone()) {
            continue;
        }
        input_count += 1;
        if completed.contains(&line.image_id) {
            already_complete += 1;
        } else {
            pending.push(line);
        }
    }

    let open_append = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|source| CaptionError::Io {
                path: p.display().to_string(),
                source,
            })
    };
    let mut out_file = open_append(out_path)?;
    let mut fail_file = open_append(&fail_path)?;

    let semaphore = Arc::new(Semaphore::new(max_in_flight));
    let (tx, mut rx) = mpsc::unbounded_channel::<CaptionOutcome>();

    let producer = {
        let semaphore = Arc::clone(&semaphore);
        let client = Arc::clone(&client);
        let cancel = Arc::clone(cancel);
        async move {
            let mut launched = 0usize;
            for line in pending {
                if cancel.load(Ordering::Relaxed) {
                    break;
                }
                let permit = Arc::clone(&semaphore)
                    .acquire_owned()
                    .await
                    .expect("semaphore never closed");
                let client = Arc::clone(&client);
                let tx = tx.clone();
                launched += 1;
                tokio::spawn(async move {
                    let outcome = client.request_caption(&line).await;
                    let _ = tx.send(outcome);
                    drop(permit);
                });
            }
            drop(tx);
            launched
        }
    };

    let consumer = async {
        let mut report = BatchReport::default();
        let mut latencies: Vec<u64> = Vec::new();
        while let Some(outcome) = rx.recv().await {
            let write = |file: &mut std::fs::File, json: String, path: &Path| {
                file.write_all(json.as_bytes())
                    .and_then(|_| file.write_all(b"\n"))
                    .and_then(|_| file.flush())
                    .map_err(|source| CaptionError::Io {
                        path: path.display().to_string(),
                        source,
                    })
            };
            match &outcome {
                CaptionOutcome::Success(rec) => {
                    let json = serde_json::to_string(rec).expect("record serializes");
                    write(&mut out_file, json, out_path)?;
                    latencies.push(rec.latency_ms);
                    report.succeeded += 1;
                }
                CaptionOutcome::Failure(rec) => {
                    let json = serde_json::to_string(rec).expect("record serializes");
                    write(&mut fail_file, json, &fail_path)?;
                    match rec.error_class {
                        FailureClass::Permanent => report.failed_permanent += 1,
                        FailureClass::Transient => report.failed_transient += 1,
                    }
                }
            }
        }
        latencies.sort_unstable();
        report.p50_latency_ms = percentile(&latencies, 0.50);
        report.p95_latency_ms = percentile(&latencies, 0.95);
        Ok::<BatchReport, CaptionError>(report)
    };

    let (launched, consumed) = tokio::join!(producer, consumer);
    let mut report = consumed?;
    report.input_count = input_count;
    report.already_complete = already_complete;
    report.recovered_torn_lines = recovered_torn_lines;
    report.cancelled = launched < input_count - already_complete;
    Ok(report)
}

/// Reads prompts.jsonl.
pub fn read_prompts(path: &Path) -> Result<Vec<PromptLine>, CaptionError> {
    let io_err = |source| CaptionError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut lines = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PromptLine =
            serde_json::from_str(line).map_err(|e| CaptionError::CheckpointCorrupt {
                path: path.display().to_string(),
                line: idx + 1,
                detail: e.to_string(),
            })?;
        lines.push(parsed);
    }
    Ok(lines)
}

/// Reads captions.jsonl.
pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>, CaptionError> {
    let io_err = |source| CaptionError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptionRecord =
            serde_json::from_str(line).map_err(|e| CaptionError::CheckpointCorrupt {
                path: path.display().to_string(),
                line: idx + 1,
                detail: e.to_string(),
            })?;
        records.push(parsed);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backoff_bounds_double_then_cap() {
        let policy = BackoffPolicy::default();
        let bounds: Vec<u64> = (0..8).map(|a| policy.bound_ms(a)).collect();
        assert_eq!(bounds, vec![500, 1000, 2000, 4000, 8000, 16000, 30000, 30000]);
    }

    #[test]
    fn backoff_jitter_within_window() {
        let policy = BackoffPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for attempt in 0..6 {
            for _ in 0..50 {
                let d = policy.jittered_ms(attempt, &mut rng);
                assert!(d <= policy.bound_ms(attempt));
            }
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let values: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&values, 0.50), 50);
        assert_eq!(percentile(&values, 0.95), 95);
        assert_eq!(percentile(&[42], 0.50), 42);
        assert_eq!(percentile(&[], 0.95), 0);
    }

    #[test]
    fn failures_path_derivation() {
        assert_eq!(
            failures_path(Path::new("/tmp/captions.jsonl")),
            Path::new("/tmp/captions.failures.jsonl")
        );
    }

    fn caption_line(id: &str) -> String {
        format!(
            "{}\n",
            serde_json::to_string(&CaptionRecord {
                image_id: id.to_string(),
                caption: "A chair.".to_string(),
                engine_id: "mock".to_string(),
                latency_ms: 5,
                attempt_count: 1,
                prompt_kind: PromptKind::Engine,
            })
            .unwrap()
        )
    }

    #[test]
    fn scan_recovers_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.jsonl");
        let mut content = caption_line("a");
        content.push_str(&caption_line("b"));
        content.push_str("{\"image_id\":\"c\",\"capt");
        std::fs::write(&path, &content).unwrap();
        let scan = scan_checkpoint(&path).unwrap();
        assert!(scan.torn_tail);
        assert_eq!(scan.completed, vec!["a", "b"]);
        // The file itself was repaired.
        let repaired = std::fs::read_to_string(&path).unwrap();
        assert!(repaired.ends_with('\n'));
        assert_eq!(repaired.lines().count(), 2);
    }

    #[test]
    fn scan_rejects_interior_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.jsonl");
        let mut content = caption_line("a");
        content.push_str("not json at all\n");
        content.push_str(&caption_line("b"));
        std::fs::write(&path, &content).unwrap();
        let err = scan_checkpoint(&path).unwrap_err();
        match err {
            CaptionError::CheckpointCorrupt { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scan_missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let scan = scan_checkpoint(&dir.path().join("absent.jsonl")).unwrap();
        assert!(scan.completed.is_empty());
        assert!(!scan.torn_tail);
    }
}
