//! Vision-expert integration: wire protocol for the annotation service,
//! response validation, and the pure post-processing steps (confidence
//! filtering, balanced small-object sampling, open-vocabulary
//! derivation, OCR ordering) that turn raw expert output into an
//! [`AnnotationBundle`].
//!
//! Each task (tags, closed-set detection, open-set detection, OCR) is
//! posted separately so one failing expert degrades only its own
//! section: the bundle keeps the rest and the failure becomes a
//! warning record instead of aborting the image.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioner::BackoffPolicy;
use crate::catalog::ImageRecord;
use crate::config::PipelineConfig;

/// Hard cap on the derived open-set vocabulary.
const VOCAB_CAP: usize = 100;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("all expert tasks failed for {image_id}: {details}")]
    AllTasksFailed { image_id: String, details: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    ClosedSet,
    OpenSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub label: String,
    /// Absolute pixel corners x1, y1, x2, y2 with x1 < x2 and y1 < y2.
    pub bbox: [u32; 4],
    pub confidence: f64,
    pub source: BoxSource,
}

impl DetectionBox {
    pub fn area(&self) -> u64 {
        let [x1, y1, x2, y2] = self.bbox;
        (x2 - x1) as u64 * (y2 - y1) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrLine {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
    pub confidence: f64,
}

/// Everything the fusion stage needs for one image. Boxes are already
/// filtered and sampled; OCR is in reading order; the web caption rides
/// along verbatim as world knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBundle {
    pub image_id: String,
    pub tags: Vec<Tag>,
    pub boxes: Vec<DetectionBox>,
    pub ocr: Vec<OcrLine>,
    pub world_knowledge: String,
}

/// Bundle plus the image fields downstream stages need, as persisted in
/// annotations.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(flatten)]
    pub bundle: AnnotationBundle,
    pub uri: String,
    pub width_px: u32,
    pub height_px: u32,
}

/// Raw per-section expert output after schema validation, before the
/// filter/sample/order post-processing.
#[derive(Debug, Clone, Default)]
pub struct RawAnnotations {
    pub tags: Vec<Tag>,
    pub boxes: Vec<DetectionBox>,
    pub ocr: Vec<OcrLine>,
}

/// Non-fatal problem encountered while annotating one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotateWarning {
    pub image_id: String,
    pub task: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpertTask {
    Tags,
    DetectClosed,
    DetectOpen,
    Ocr,
}

impl ExpertTask {
    pub fn wire_name(self) -> &'static str {
        match self {
            ExpertTask::Tags => "tags",
            ExpertTask::DetectClosed => "detect_closed",
            ExpertTask::DetectOpen => "detect_open",
            ExpertTask::Ocr => "ocr",
        }
    }

    pub const ALL: [ExpertTask; 4] = [
        ExpertTask::Tags,
        ExpertTask::DetectClosed,
        ExpertTask::DetectOpen,
        ExpertTask::Ocr,
    ];
}

#[derive(Serialize)]
struct WireRequest<'a> {
    image_id: &'a str,
    image: WireImage<'a>,
    tasks: [&'static str; 1],
    #[serde(skip_serializing_if = "Option::is_none")]
    vocabulary: Option<&'a [String]>,
}

#[derive(Serialize)]
#[serde(rename_all = "snake_case")]
enum WireImage<'a> {
    Uri(&'a str),
    #[allow(dead_code)]
    Base64(&'a str),
}

#[derive(Debug, Default, Deserialize)]
pub struct WireResponse {
    #[serde(default)]
    pub tags: Vec<WireTag>,
    #[serde(default)]
    pub boxes: Vec<WireBox>,
    #[serde(default)]
    pub ocr: Vec<WireOcr>,
}

#[derive(Debug, Deserialize)]
pub struct WireTag {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
pub struct WireBox {
    pub label: String,
    pub bbox: [i64; 4],
    pub score: f64,
    #[serde(default)]
    pub source: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct WireOcr {
    pub text: String,
    #[serde(default)]
    pub bbox: Option<[i64; 4]>,
    pub score: f64,
}

/// Validates wire tags: names are trimmed and case-folded, scores must
/// sit in [0, 1]. Returns surviving tags plus one detail per drop.
pub fn validate_tags(raw: Vec<WireTag>) -> (Vec<Tag>, Vec<String>) {
    let mut tags = Vec::with_capacity(raw.len());
    let mut dropped = Vec::new();
    for t in raw {
        let name = t.name.trim().to_lowercase();
        if name.is_empty() {
            dropped.push("tag with empty name".to_string());
            continue;
        }
        if !(0.0..=1.0).contains(&t.score) {
            dropped.push(format!("tag {name:?} score {} outside [0,1]", t.score));
            continue;
        }
        tags.push(Tag {
            name,
            score: t.score,
        });
    }
    (tags, dropped)
}

/// Validates wire boxes against the image dimensions. Degenerate or
/// out-of-bounds boxes are dropped, each with a warning detail.
pub fn validate_boxes(
    raw: Vec<WireBox>,
    source: BoxSource,
    width_px: u32,
    height_px: u32,
) -> (Vec<DetectionBox>, Vec<String>) {
    let mut boxes = Vec::with_capacity(raw.len());
    let mut dropped = Vec::new();
    for b in raw {
        let label = b.label.trim().to_lowercase();
        let [x1, y1, x2, y2] = b.bbox;
        if label.is_empty() {
            dropped.push(format!("box {:?} has empty label", b.bbox));
            continue;
        }
        if !(0.0..=1.0).contains(&b.score) {
            dropped.push(format!("box {label:?} score {} outside [0,1]", b.score));
            continue;
        }
        if x1 < 0 || y1 < 0 || x2 <= x1 || y2 <= y1 {
            dropped.push(format!("box {label:?} {:?} is degenerate", b.bbox));
            continue;
        }
        if x2 > width_px as i64 || y2 > height_px as i64 {
            dropped.push(format!(
                "box {label:?} {:?} exceeds image {width_px}x{height_px}",
                b.bbox
            ));
            continue;
        }
        boxes.push(DetectionBox {
            label,
            bbox: [x1 as u32, y1 as u32, x2 as u32, y2 as u32],
            confidence: b.score,
            source,
        });
    }
    (boxes, dropped)
}

/// Validates OCR lines: text must be non-empty after trimming; a
/// malformed bbox costs the bbox, not the line.
pub fn validate_ocr(raw: Vec<WireOcr>, width_px: u32, height_px: u32) -> (Vec<OcrLine>, Vec<String>) {
    let mut lines = Vec::with_capacity(raw.len());
    let mut dropped = Vec::new();
    for o in raw {
        let text = o.text.trim().to_string();
        if text.is_empty() {
            dropped.push("ocr line with empty text".to_string());
            continue;
        }
        if !(0.0..=1.0).contains(&o.score) {
            dropped.push(format!("ocr line {text:?} score {} outside [0,1]", o.score));
            continue;
        }
        let bbox = match o.bbox {
            Some([x1, y1, x2, y2])
                if x1 >= 0
                    && y1 >= 0
                    && x2 > x1
                    && y2 > y1
                    && x2 <= width_px as i64
                    && y2 <= height_px as i64 =>
            {
                Some([x1 as u32, y1 as u32, x2 as u32, y2 as u32])
            }
            Some(bad) => {
                dropped.push(format!("ocr line {text:?} bbox {bad:?} invalid, bbox dropped"));
                None
            }
            None => None,
        };
        lines.push(OcrLine {
            text,
            bbox,
            confidence: o.score,
        });
    }
    (lines, dropped)
}

/// Derives the open-set detection vocabulary from tags: case-folded
/// names, first occurrence wins, at most 100 entries chosen by
/// descending score but emitted in occurrence order.
pub fn derive_open_vocab(tags: &[Tag]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut entries: Vec<(String, f64)> = Vec::new();
    for tag in tags {
        let folded = tag.name.to_lowercase();
        if seen.insert(folded.clone()) {
            entries.push((folded, tag.score));
        }
    }
    if entries.len() > VOCAB_CAP {
        let mut ranked: Vec<usize> = (0..entries.len()).collect();
        ranked.sort_by(|&a, &b| {
            entries[b]
                .1
                .total_cmp(&entries[a].1)
                .then_with(|| a.cmp(&b))
        });
        let survivors: HashSet<usize> = ranked.into_iter().take(VOCAB_CAP).collect();
        return entries
            .into_iter()
            .enumerate()
            .filter(|(i, _)| survivors.contains(i))
            .map(|(_, (name, _))| name)
            .collect();
    }
    entries.into_iter().map(|(name, _)| name).collect()
}

/// Confidence gate: a box survives iff its score meets the threshold
/// for its source. Order and fields are untouched.
pub fn filter_detections(boxes: &[DetectionBox], config: &PipelineConfig) -> Vec<DetectionBox> {
    boxes
        .iter()
        .filter(|b| {
            let threshold = match b.source {
                BoxSource::ClosedSet => config.closed_set_conf_threshold,
                BoxSource::OpenSet => config.open_set_conf_threshold,
            };
            b.confidence >= threshold
        })
        .cloned()
        .collect()
}

fn conf_key(b: &DetectionBox) -> (std::cmp::Reverse<u64>, &str, u32, u32) {
    (
        std::cmp::Reverse(b.confidence.to_bits()),
        b.label.as_str(),
        b.bbox[0],
        b.bbox[1],
    )
}

fn area_key(b: &DetectionBox) -> (std::cmp::Reverse<u64>, &str, u32, u32, u32, u32, u8, u64) {
    (
        std::cmp::Reverse(b.area()),
        b.label.as_str(),
        b.bbox[0],
        b.bbox[1],
        b.bbox[2],
        b.bbox[3],
        match b.source {
            BoxSource::ClosedSet => 0,
            BoxSource::OpenSet => 1,
        },
        b.confidence.to_bits(),
    )
}

/// Caps boxes at `max_boxes_per_image`, reserving a quota of slots for
/// small boxes (area under `small_box_area_frac` of the image) so large
/// objects cannot crowd them out. Output is area-descending.
pub fn balanced_sample(
    boxes: &[DetectionBox],
    width_px: u32,
    height_px: u32,
    config: &PipelineConfig,
) -> Vec<DetectionBox> {
    let max = config.max_boxes_per_image;
    let image_area = width_px as f64 * height_px as f64;
    let is_small =
        |b: &DetectionBox| (b.area() as f64) / image_area < config.small_box_area_frac;

    let mut picked: Vec<DetectionBox> = if boxes.len() <= max {
        boxes.to_vec()
    } else {
        // ceil with a fuzz guard so 0.1 * 30 style products do not round
        // up to an extra slot.
        let q = ((config.small_box_quota_frac * max as f64 - 1e-9).ceil().max(0.0) as usize)
            .min(max);
        let mut chosen = vec![false; boxes.len()];
        let mut small_order: Vec<usize> =
            (0..boxes.len()).filter(|&i| is_small(&boxes[i])).collect();
        small_order.sort_by(|&a, &b| conf_key(&boxes[a]).cmp(&conf_key(&boxes[b])));
        let mut out_idx: Vec<usize> = Vec::with_capacity(max);
        for &i in small_order.iter().take(q) {
            chosen[i] = true;
            out_idx.push(i);
        }
        let mut rest: Vec<usize> = (0..boxes.len()).filter(|&i| !chosen[i]).collect();
        rest.sort_by(|&a, &b| conf_key(&boxes[a]).cmp(&conf_key(&boxes[b])));
        out_idx.extend(rest.into_iter().take(max - out_idx.len()));
        out_idx.into_iter().map(|i| boxes[i].clone()).collect()
    };
    picked.sort_by(|a, b| area_key(a).cmp(&area_key(b)));
    picked
}

fn iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    let ix1 = a[0].max(b[0]);
    let iy1 = a[1].max(b[1]);
    let ix2 = a[2].min(b[2]);
    let iy2 = a[3].min(b[3]);
    if ix2 <= ix1 || iy2 <= iy1 {
        return 0.0;
    }
    let inter = (ix2 - ix1) as f64 * (iy2 - iy1) as f64;
    let area_a = (a[2] - a[0]) as f64 * (a[3] - a[1]) as f64;
    let area_b = (b[2] - b[0]) as f64 * (b[3] - b[1]) as f64;
    inter / (area_a + area_b - inter)
}

/// Reading order: top-to-bottom then left-to-right for lines with a
/// box; boxless lines trail in input order. Identical texts whose boxes
/// overlap almost entirely collapse to one line.
pub fn order_ocr(lines: &[OcrLine]) -> Vec<OcrLine> {
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.sort_by_key(|&i| match lines[i].bbox {
        Some([x1, y1, _, _]) => (0u8, y1, x1, i),
        None => (1u8, 0, 0, i),
    });
    let mut kept: Vec<OcrLine> = Vec::with_capacity(lines.len());
    for &i in &order {
        let line = &lines[i];
        let duplicate = kept.iter().any(|k| {
            k.text == line.text
                && match (k.bbox, line.bbox) {
                    (Some(a), Some(b)) => iou(a, b) > 0.9,
                    _ => false,
                }
        });
        if !duplicate {
            kept.push(line.clone());
        }
    }
    kept
}

/// Applies the full post-processing chain and attaches world knowledge.
pub fn build_bundle(
    record: &ImageRecord,
    raw: RawAnnotations,
    config: &PipelineConfig,
) -> AnnotationBundle {
    let filtered = filter_detections(&raw.boxes, config);
    let boxes = balanced_sample(&filtered, record.width_px, record.height_px, config);
    AnnotationBundle {
        image_id: record.id.clone(),
        tags: raw.tags,
        boxes,
        ocr: order_ocr(&raw.ocr),
        world_knowledge: record.web_caption.clone(),
    }
}

/// HTTP client for the expert annotation service.
pub struct ExpertClient {
    base_url: String,
    http: reqwest::Client,
    max_retries: u32,
    backoff: BackoffPolicy,
}

impl ExpertClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base_url = base_url.into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            http: reqwest::Client::builder()
                .timeout(std::time::Duration::from_secs(60))
                .build()
                .expect("client construction"),
            max_retries: 3,
            backoff: BackoffPolicy::default(),
        }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: BackoffPolicy) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    async fn post_task(
        &self,
        record: &ImageRecord,
        task: ExpertTask,
        vocabulary: Option<&[String]>,
    ) -> Result<WireResponse, String> {
        let url = format!("{}/v1/annotate", self.base_url);
        let body = WireRequest {
            image_id: &record.id,
            image: WireImage::Uri(&record.uri),
            tasks: [task.wire_name()],
            vocabulary,
        };
        let mut attempt = 0u32;
        loop {
            let outcome = self.http.post(&url).json(&body).send().await;
            let retryable_detail = match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<WireResponse>()
                            .await
                            .map_err(|e| format!("schema-invalid response: {e}"));
                    }
                    let detail = format!("HTTP {}", status.as_u16());
                    if status.as_u16() == 429 || status.is_server_error() {
                        detail
                    } else {
                        return Err(detail);
                    }
                }
                Err(e) => format!("transport: {e}"),
            };
            if attempt >= self.max_retries {
                return Err(format!("{retryable_detail} after {} attempts", attempt + 1));
            }
            let delay = self.backoff.jittered_ms(attempt, &mut rand::rng());
            tokio::time::sleep(std::time::Duration::from_millis(delay)).await;
            attempt += 1;
        }
    }
}

/// Calls the requested expert tasks for one image and validates every
/// section. A failing task leaves its section empty and adds a warning;
/// only all tasks failing is an error.
pub async fn annotate_image(
    client: &ExpertClient,
    record: &ImageRecord,
    tasks: &[ExpertTask],
) -> Result<(RawAnnotations, Vec<AnnotateWarning>), ExpertError> {
    let mut raw = RawAnnotations::default();
    let mut warnings = Vec::new();
    let mut failures = 0usize;
    let mut attempted = 0usize;
    let warn = |task: ExpertTask, detail: String| AnnotateWarning {
        image_id: record.id.clone(),
        task: task.wire_name().to_string(),
        detail,
    };

    let want = |t: ExpertTask| tasks.contains(&t);

    if want(ExpertTask::Tags) {
        attempted += 1;
        match client.post_task(record, ExpertTask::Tags, None).await {
            Ok(resp) => {
                let (tags, dropped) = validate_tags(resp.tags);
                raw.tags = tags;
                warnings.extend(dropped.into_iter().map(|d| warn(ExpertTask::Tags, d)));
            }
            Err(detail) => {
                failures += 1;
                warnings.push(warn(ExpertTask::Tags, detail));
            }
        }
    }

    if want(ExpertTask::DetectClosed) {
        attempted += 1;
        match client.post_task(record, ExpertTask::DetectClosed, None).await {
            Ok(resp) => {
                let (boxes, dropped) = validate_boxes(
                    resp.boxes,
                    BoxSource::ClosedSet,
                    record.width_px,
                    record.height_px,
                );
                raw.boxes.extend(boxes);
                warnings.extend(dropped.into_iter().map(|d| warn(ExpertTask::DetectClosed, d)));
            }
            Err(detail) => {
                failures += 1;
                warnings.push(warn(ExpertTask::DetectClosed, detail));
            }
        }
    }

    if want(ExpertTask::DetectOpen) {
        let vocabulary = derive_open_vocab(&raw.tags);
        // An empty vocabulary (no tags) means there is nothing to
        // detect openly; the task is skipped rather than failed.
        if !vocabulary.is_empty() {
            attempted += 1;
            match client
                .post_task(record, ExpertTask::DetectOpen, Some(&vocabulary))
                .await
            {
                Ok(resp) => {
                    let (boxes, dropped) = validate_boxes(
                        resp.boxes,
                        BoxSource::OpenSet,
                        record.width_px,
                        record.height_px,
                    );
                    raw.boxes.extend(boxes);
                    warnings
                        .extend(dropped.into_iter().map(|d| warn(ExpertTask::DetectOpen, d)));
                }
                Err(detail) => {
                    failures += 1;
                    warnings.push(warn(ExpertTask::DetectOpen, detail));
                }
            }
        }
    }

    if want(ExpertTask::Ocr) {
        attempted += 1;
        match client.post_task(record, ExpertTask::Ocr, None).await {
            Ok(resp) => {
                let (lines, dropped) = validate_ocr(resp.ocr, record.width_px, record.height_px);
                raw.ocr = lines;
                warnings.extend(dropped.into_iter().map(|d| warn(ExpertTask::Ocr, d)));
            }
            Err(detail) => {
                failures += 1;
                warnings.push(warn(ExpertTask::Ocr, detail));
            }
        }
    }

    if attempted > 0 && failures == attempted {
        return Err(ExpertError::AllTasksFailed {
            image_id: record.id.clone(),
            details: warnings
                .iter()
                .map(|w| format!("{}: {}", w.task, w.detail))
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    Ok((raw, warnings))
}
