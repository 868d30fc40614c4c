//! Image manifest ingestion, resolution filtering, and sharded pipeline state.
//!
//! A manifest is line-delimited JSON with required keys `id`, `uri`,
//! `width`, `height` and an optional `caption`. Shards use the same line
//! format plus a `{"__shard_count": N}` trailer so truncation is detectable.
//! Malformed lines are reported, not silently dropped; duplicate ids abort
//! because they would corrupt downstream keying.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate image id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("shard {path} is corrupt: {detail}")]
    CorruptShard { path: String, detail: String },
    #[error("cannot write empty shard {path}")]
    EmptyShard { path: String },
    #[error("stage transition {from} -> {to} is not monotone for {id:?}")]
    StageRegression { id: String, from: Stage, to: Stage },
}

/// Pipeline position of a record. Transitions are monotone along this order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Ingested,
    FilteredOut,
    Curated,
    Annotated,
    Captioned,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Ingested => "ingested",
            Stage::FilteredOut => "filtered_out",
            Stage::Curated => "curated",
            Stage::Annotated => "annotated",
            Stage::Captioned => "captioned",
        };
        f.write_str(s)
    }
}

/// One image's identity, dimensions, raw web caption, and pipeline status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    pub width_px: u32,
    pub height_px: u32,
    /// Raw crawled alt-text, possibly empty. Passed downstream verbatim as
    /// the world-knowledge context.
    pub web_caption: String,
    pub stage: Stage,
}

impl ImageRecord {
    /// Advances the stage, rejecting backward transitions.
    pub fn advance_stage(&mut self, to: Stage) -> Result<(), CatalogError> {
        if to < self.stage {
            return Err(CatalogError::StageRegression {
                id: self.id.clone(),
                from: self.stage,
                to,
            });
        }
        self.stage = to;
        Ok(())
    }
}

/// Wire form of one manifest/shard line. Unknown extra keys are tolerated:
/// web manifests are dirty and extra metadata is not an error.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    uri: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage: Option<Stage>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardTrailer {
    #[serde(rename = "__shard_count")]
    shard_count: u64,
}

/// A manifest line that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

/// Result of ingesting one manifest: parsed records plus an error report.
#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub records: Vec<ImageRecord>,
    pub malformed: Vec<MalformedLine>,
}

fn parse_line(id_seen: &mut HashSet<String>, line_no: usize, raw: &[u8]) -> ParsedLine {
    let text = match std::str::from_utf8(raw) {
        Ok(t) => t,
        Err(_) => return ParsedLine::Malformed("line is not valid UTF-8".into()),
    };
    if text.trim().is_empty() {
        return ParsedLine::Blank;
    }
    if let Ok(trailer) = serde_json::from_str::<ShardTrailer>(text) {
        return ParsedLine::Trailer(trailer.shard_count);
    }
    let parsed: ManifestLine = match serde_json::from_str(text) {
        Ok(p) => p,
        Err(e) => return ParsedLine::Malformed(format!("invalid record JSON: {e}")),
    };
    if parsed.id.is_empty() {
        return ParsedLine::Malformed("empty id".into());
    }
    if parsed.width < 1 || parsed.height < 1 {
        return ParsedLine::Malformed(format!(
            "non-positive dimensions {}x{}",
            parsed.width, parsed.height
        ));
    }
    if !id_seen.insert(parsed.id.clone()) {
        return ParsedLine::Duplicate {
            id: parsed.id,
            line: line_no,
        };
    }
    ParsedLine::Record(ImageRecord {
        id: parsed.id,
        uri: parsed.uri,
        width_px: parsed.width,
        height_px: parsed.height,
        web_caption: parsed.caption.unwrap_or_default(),
        stage: parsed.stage.unwrap_or(Stage::Ingested),
    })
}

enum ParsedLine {
    Record(ImageRecord),
    Malformed(String),
    Duplicate { id: String, line: usize },
    Trailer(u64),
    Blank,
}

/// Reads a manifest file in order. Malformed lines go into the report;
/// duplicate ids are fatal.
pub fn ingest_manifest(path: &Path) -> Result<IngestOutcome, CatalogError> {
    let file = File::open(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut outcome = IngestOutcome::default();
    let mut id_seen = HashSet::new();
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| CatalogError::Io {
                path: path.display().to_string(),
                source,
            })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        while buf.last() == Some(&b'\n') || buf.last() == Some(&b'\r') {
            buf.pop();
        }
        match parse_line(&mut id_seen, line_no, &buf) {
            ParsedLine::Record(r) => outcome.records.push(r),
            ParsedLine::Malformed(reason) => outcome.malformed.push(MalformedLine {
                line: line_no,
                reason,
            }),
            ParsedLine::Duplicate { id, line } => {
                return Err(CatalogError::DuplicateId { id, line })
            }
            // A trailer in a plain manifest is tolerated and ignored; shards
            // are validated against it in read_shard.
            ParsedLine::Trailer(_) | ParsedLine::Blank => {}
        }
    }
    Ok(outcome)
}

/// Keep an image iff its short edge meets the minimum.
pub fn filter_resolution(record: &ImageRecord, min_short_edge_px: u32) -> bool {
    record.width_px.min(record.height_px) >= min_short_edge_px
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShardSummary {
    pub records: u64,
    pub bytes: u64,
}

/// Writes records as one shard: ldjson lines plus a count trailer.
pub fn write_shard(records: &[ImageRecord], shard_path: &Path) -> Result<ShardSummary, CatalogError> {
    if records.is_empty() {
        return Err(CatalogError::EmptyShard {
            path: shard_path.display().to_string(),
        });
    }
    let io_err = |source| CatalogError::Io {
        path: shard_path.display().to_string(),
        source,
    };
    let file = File::create(shard_path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut bytes = 0u64;
    for record in records {
        let line = ManifestLine {
            id: record.id.clone(),
            uri: record.uri.clone(),
            width: record.width_px,
            height: record.height_px,
            caption: if record.web_caption.is_empty() {
                None
            } else {
                Some(record.web_caption.clone())
            },
            stage: Some(record.stage),
        };
        let json = serde_json::to_string(&line).expect("record serialization is infallible");
        bytes += json.len() as u64 + 1;
        w.write_all(json.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    let trailer = serde_json::to_string(&ShardTrailer {
        shard_count: records.len() as u64,
    })
    .expect("trailer serialization is infallible");
    bytes += trailer.len() as u64 + 1;
    w.write_all(trailer.as_bytes()).map_err(io_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(ShardSummary {
        records: records.len() as u64,
        bytes,
    })
}

/// Reads one shard back, validating the trailer count. A missing or
/// mismatched trailer means truncation or concatenation damage.
pub fn read_shard(shard_path: &Path) -> Result<Vec<ImageRecord>, CatalogError> {
    let file = File::open(shard_path).map_err(|source| CatalogError::Io {
        path: shard_path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut trailer: Option<u64> = None;
    let mut id_seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CatalogError::Io {
            path: shard_path.display().to_string(),
            source,
        })?;
        if trailer.is_some() {
            return Err(CatalogError::CorruptShard {
                path: shard_path.display().to_string(),
                detail: "content after trailer".into(),
            });
        }
        match parse_line(&mut id_seen, idx + 1, line.as_bytes()) {
            ParsedLine::Record(r) => records.push(r),
            ParsedLine::Trailer(n) => trailer = Some(n),
            ParsedLine::Blank => {}
            ParsedLine::Malformed(reason) => {
                return Err(CatalogError::CorruptShard {
                    path: shard_path.display().to_string(),
                    detail: format!("line {}: {reason}", idx + 1),
                })
            }
            ParsedLine::Duplicate { id, line } => {
                return Err(CatalogError::DuplicateId { id, line })
            }
        }
    }
    match trailer {
        Some(n) if n == records.len() as u64 => Ok(records),
        Some(n) => Err(CatalogError::CorruptShard {
            path: shard_path.display().to_string(),
            detail: format!("trailer count {n} != record count {}", records.len()),
        }),
        None => Err(CatalogError::CorruptShard {
            path: shard_path.display().to_string(),
            detail: "missing trailer".into(),
        }),
    }
}

/// Shard files in a directory, in shard-index order.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>, CatalogError> {
    let entries = std::fs::read_dir(dir).map_err(|source| CatalogError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut shards: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("shard-") && n.ends_with(".jsonl"))
                .unwrap_or(false)
        })
        .collect();
    shards.sort();
    Ok(shards)
}

/// Name of the i-th shard file.
pub fn shard_name(index: usize) -> String {
    format!("shard-{index:05}.jsonl")
}
