//! Stage orchestration over a working directory of plain artifacts.
//!
//! Each stage reads only prior-stage artifacts and writes exactly one
//! output (a shard directory or a single file), so any stage can be
//! re-executed in isolation and the whole run is auditable with a file
//! browser. A JSON run manifest tracks per-stage completion plus a
//! hash of the resolved tuning config; resuming under an edited config
//! is refused rather than silently mixing semantics. One run at a time
//! per working directory, enforced with a lock file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::captioner::{self, BackoffPolicy, EngineClient, ResumeMode};
use crate::catalog::{self, ImageRecord};
use crate::config::{ConfigError, PipelineConfig};
use crate::curator::{self, SelectMember};
use crate::embedstore;
use crate::experts::{self, AnnotationRecord, ExpertClient, ExpertTask};
use crate::fusion::{self, PromptKind, PromptLine};
use crate::stats::{self, HeuristicTagger};

pub const MANIFEST_FILE: &str = "run-manifest.json";
pub const LOCK_FILE: &str = ".densefuse.lock";
const SHARD_SIZE: usize = 10_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config file {path} is invalid: {detail}")]
    ConfigSchema { path: String, detail: String },
    #[error("working directory is locked by another run ({path}); remove the lock file if that run is dead")]
    Locked { path: String },
    #[error("config hash mismatch: the run was created with {stored} but the current config hashes to {current}; use a fresh working directory for a changed config")]
    ConfigChanged { stored: String, current: String },
    #[error("run manifest {path} is corrupt: {detail}")]
    ManifestCorrupt { path: String, detail: String },
    #[error("stage {stage} needs {what}, which is not configured under [inputs]")]
    MissingInput { stage: Stage, what: &'static str },
    #[error("stage {needed} must be done before {stage} can run")]
    StageNotDone { stage: Stage, needed: Stage },
    #[error("invalid stage range: {from} comes after {to}")]
    BadRange { from: Stage, to: Stage },
    #[error("stage {stage} failed: {detail}")]
    Stage { stage: Stage, detail: String },
    #[error("count conservation violated: {detail}")]
    Conservation { detail: String },
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Filter,
    EmbedIngest,
    Cluster,
    Dedup,
    Select,
    Annotate,
    Prompt,
    Caption,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Filter,
        Stage::EmbedIngest,
        Stage::Cluster,
        Stage::Dedup,
        Stage::Select,
        Stage::Annotate,
        Stage::Prompt,
        Stage::Caption,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Filter => "filter",
            Stage::EmbedIngest => "embed-ingest",
            Stage::Cluster => "cluster",
            Stage::Dedup => "dedup",
            Stage::Select => "select",
            Stage::Annotate => "annotate",
            Stage::Prompt => "prompt",
            Stage::Caption => "caption",
            Stage::Stats => "stats",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
                format!("unknown stage {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum StageState {
    Pending,
    Done { artifact: String, records: u64 },
}

/// Persistent record of a run: which stages are done, over which
/// config, keyed to plain artifact paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stage_states: BTreeMap<String, StageState>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        let now = Utc::now();
        let stage_states = Stage::ALL
            .iter()
            .map(|s| (s.name().to_string(), StageState::Pending))
            .collect();
        Self {
            config_hash,
            stage_states,
            created_at: now,
            updated_at: now,
        }
    }

    pub fn state(&self, stage: Stage) -> &StageState {
        self.stage_states
            .get(stage.name())
            .unwrap_or(&StageState::Pending)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        matches!(self.state(stage), StageState::Done { .. })
    }

    pub fn records(&self, stage: Stage) -> Option<u64> {
        match self.state(stage) {
            StageState::Done { records, .. } => Some(*records),
            StageState::Pending => None,
        }
    }

    fn set_done(&mut self, stage: Stage, artifact: String, records: u64) {
        self.stage_states
            .insert(stage.name().to_string(), StageState::Done { artifact, records });
    }

    fn set_pending(&mut self, stage: Stage) {
        self.stage_states
            .insert(stage.name().to_string(), StageState::Pending);
    }

    /// A done stage may not follow a pending one.
    pub fn check_prefix_invariant(&self) -> Result<(), String> {
        let mut boundary: Option<Stage> = None;
        for stage in Stage::ALL {
            match (self.is_done(stage), boundary) {
                (true, Some(pending)) => {
                    return Err(format!("stage {stage} is done but earlier stage {pending} is pending"));
                }
                (false, None) => boundary = Some(stage),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| PipelineError::ManifestCorrupt {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        manifest
            .check_prefix_invariant()
            .map_err(|detail| PipelineError::ManifestCorrupt {
                path: path.display().to_string(),
                detail,
            })?;
        Ok(manifest)
    }

    pub fn save(&mut self, path: &Path) -> Result<(), PipelineError> {
        self.updated_at = Utc::now();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Hex digest of the resolved tuning config; input locations are
/// deliberately excluded so a run can resume against a restarted
/// (re-addressed) service without invalidating its artifacts.
pub fn config_hash(config: &PipelineConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Where the pipeline finds its external inputs. All optional: only
/// the stages actually requested need their inputs configured.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub expert_url: Option<String>,
    pub engine_url: Option<String>,
    pub engine_model: Option<String>,
}

/// On-disk config file: a `[pipeline]` table of tuning knobs and an
/// `[inputs]` table of data locations. Unknown keys anywhere are
/// fatal so a typo cannot silently revert a constant to its default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub pipeline: PipelineConfig,
    pub inputs: InputsConfig,
}

/// Loads and validates a TOML config file. An empty file resolves to
/// pure defaults. Schema violations name the offending key.
pub fn load_config(path: &Path) -> Result<ConfigFile, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| PipelineError::ConfigSchema {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    file.pipeline.validate()?;
    Ok(file)
}

struct WorkPaths {
    root: PathBuf,
}

impl WorkPaths {
    fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
    fn lock(&self) -> PathBuf {
        self.root.join(LOCK_FILE)
    }
    fn ingested_dir(&self) -> PathBuf {
        self.root.join("ingested")
    }
    fn filtered_dir(&self) -> PathBuf {
        self.root.join("filtered")
    }
    fn store(&self) -> PathBuf {
        self.root.join("store.dfemb")
    }
    fn model(&self) -> PathBuf {
        self.root.join("model.df")
    }
    fn decisions(&self) -> PathBuf {
        self.root.join("decisions.jsonl")
    }
    fn selected(&self) -> PathBuf {
        self.root.join("selected.txt")
    }
    fn curated(&self) -> PathBuf {
        self.root.join("curated.jsonl")
    }
    fn annotations(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }
    fn warnings(&self) -> PathBuf {
        self.root.join("annotations.warnings.jsonl")
    }
    fn prompts(&self) -> PathBuf {
        self.root.join("prompts.jsonl")
    }
    fn captions(&self) -> PathBuf {
        self.root.join("captions.jsonl")
    }
    fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Lock file held for the duration of a run; removed on drop.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<Self, PipelineError> {
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked {
                    path: path.display().to_string(),
                })
            }
            Err(source) => Err(PipelineError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub from: Stage,
    pub to: Stage,
    pub force: bool,
    /// Which prompt template the Prompt stage renders.
    pub prompt_kind: PromptKind,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            from: Stage::Ingest,
            to: Stage::Stats,
            force: false,
            prompt_kind: PromptKind::Engine,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn stage_err<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        detail: e.to_string(),
    }
}

fn read_all_shards(dir: &Path, stage: Stage) -> Result<Vec<ImageRecord>, PipelineError> {
    let shards = catalog::list_shards(dir).map_err(stage_err(stage))?;
    let mut records = Vec::new();
    for shard in shards {
        records.extend(catalog::read_shard(&shard).map_err(stage_err(stage))?);
    }
    Ok(records)
}

fn write_sharded(
    records: &[ImageRecord],
    dir: &Path,
    stage: Stage,
) -> Result<(), PipelineError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (index, chunk) in records.chunks(SHARD_SIZE).enumerate() {
        let path = dir.join(catalog::shard_name(index));
        catalog::write_shard(chunk, &path).map_err(stage_err(stage))?;
    }
    Ok(())
}

fn stage_ingest(paths: &WorkPaths, config: &ConfigFile) -> Result<(PathBuf, u64), PipelineError> {
    let manifest_path = config
        .inputs
        .manifest
        .as_ref()
        .ok_or(PipelineError::MissingInput {
            stage: Stage::Ingest,
            what: "manifest",
        })?;
    let outcome = catalog::ingest_manifest(manifest_path).map_err(stage_err(Stage::Ingest))?;
    if !outcome.malformed.is_empty() {
        eprintln!(
            "ingest: skipped {} malformed manifest line(s), first at line {}",
            outcome.malformed.len(),
            outcome.malformed[0].line
        );
    }
    if outcome.records.is_empty() {
        return Err(PipelineError::Stage {
            stage: Stage::Ingest,
            detail: "manifest contains no usable records".to_string(),
        });
    }
    let dir = paths.ingested_dir();
    write_sharded(&outcome.records, &dir, Stage::Ingest)?;
    Ok((dir, outcome.records.len() as u64))
}

fn stage_filter(paths: &WorkPaths, config: &ConfigFile) -> Result<(PathBuf, u64), PipelineError> {
    let records = read_all_shards(&paths.ingested_dir(), Stage::Filter)?;
    let kept: Vec<ImageRecord> = records
        .into_iter()
        .filter(|r| catalog::filter_resolution(r, config.pipeline.min_short_edge_px))
        .collect();
    if kept.is_empty() {
        return Err(PipelineError::Stage {
            stage: Stage::Filter,
            detail: format!(
                "no records meet the {}px short-edge minimum",
                config.pipeline.min_short_edge_px
            ),
        });
    }
    let dir = paths.filtered_dir();
    write_sharded(&kept, &dir, Stage::Filter)?;
    Ok((dir, kept.len() as u64))
}

fn stage_embed_ingest(
    paths: &WorkPaths,
    config: &ConfigFile,
) -> Result<(PathBuf, u64), PipelineError> {
    let embeddings = config
        .inputs
        .embeddings
        .as_ref()
        .ok_or(PipelineError::MissingInput {
            stage: Stage::EmbedIngest,
            what: "embeddings",
        })?;
    let filtered = read_all_shards(&paths.filtered_dir(), Stage::EmbedIngest)?;
    let ids: HashSet<String> = filtered.into_iter().map(|r| r.id).collect();
    let (store, report) =
        embedstore::ingest_embeddings(embeddings, &ids).map_err(stage_err(Stage::EmbedIngest))?;
    if !report.rejected_ids.is_empty() {
        eprintln!(
            "embed-ingest: rejected {} embedding(s) absent from the filtered catalog",
            report.rejected_ids.len()
        );
    }
    if store.is_empty() {
        return Err(PipelineError::Stage {
            stage: Stage::EmbedIngest,
            detail: "no embeddings matched the filtered catalog".to_string(),
        });
    }
    let out = paths.store();
    embedstore::write_store(&store, &out).map_err(stage_err(Stage::EmbedIngest))?;
    Ok((out, store.len() as u64))
}

fn stage_cluster(paths: &WorkPaths, config: &ConfigFile) -> Result<(PathBuf, u64), PipelineError> {
    let store = embedstore::read_store(&paths.store()).map_err(stage_err(Stage::Cluster))?;
    let configured_k = config.pipeline.cluster_count_k;
    let k = configured_k.min(store.len());
    if k < configured_k {
        eprintln!(
            "cluster: clamping k from {configured_k} to {k} (store holds {} vectors)",
            store.len()
        );
    }
    let (model, assignments) = curator::kmeans_run(
        &store,
        k,
        config.pipeline.rng_seed,
        config.pipeline.kmeans_max_iters,
        config.pipeline.kmeans_tol,
    )
    .map_err(stage_err(Stage::Cluster))?;
    let out = paths.model();
    curator::write_model(&model, &assignments, &out).map_err(stage_err(Stage::Cluster))?;
    Ok((out, assignments.len() as u64))
}

fn stage_dedup(paths: &WorkPaths, config: &ConfigFile) -> Result<(PathBuf, u64), PipelineError> {
    let store = embedstore::read_store(&paths.store()).map_err(stage_err(Stage::Dedup))?;
    let (_, assignments) =
        curator::read_model(&paths.model()).map_err(stage_err(Stage::Dedup))?;
    let decisions = curator::dedup_all(&store, &assignments, config.pipeline.dedup_epsilon)
        .map_err(stage_err(Stage::Dedup))?;
    let out = paths.decisions();
    curator::write_decisions(&decisions, &out).map_err(stage_err(Stage::Dedup))?;
    let kept = decisions.iter().filter(|d| d.kept).count() as u64;
    Ok((out, kept))
}

fn stage_select(paths: &WorkPaths, config: &ConfigFile) -> Result<(PathBuf, u64), PipelineError> {
    let decisions = curator::read_decisions(&paths.decisions()).map_err(stage_err(Stage::Select))?;
    let filtered = read_all_shards(&paths.filtered_dir(), Stage::Select)?;
    let by_id: HashMap<&str, &ImageRecord> =
        filtered.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut clusters: BTreeMap<u32, Vec<SelectMember>> = BTreeMap::new();
    for d in decisions.iter().filter(|d| d.kept) {
        let resolution_px = by_id
            .get(d.id.as_str())
            .map(|r| r.width_px as u64 * r.height_px as u64);
        clusters.entry(d.cluster).or_default().push(SelectMember {
            image_id: d.id.clone(),
            centroid_similarity: d.centroid_similarity,
            resolution_px,
        });
    }

    let mut selected_ids = Vec::new();
    for members in clusters.values() {
        selected_ids.extend(curator::select_ranked(
            members,
            config.pipeline.select_top_k,
            config.pipeline.select_rank,
            config.pipeline.rng_seed,
        ));
    }

    let list_path = paths.selected();
    let mut listing = String::new();
    for id in &selected_ids {
        listing.push_str(id);
        listing.push('\n');
    }
    std::fs::write(&list_path, listing).map_err(io_err(&list_path))?;

    let mut curated = Vec::with_capacity(selected_ids.len());
    for id in &selected_ids {
        let record = by_id.get(id.as_str()).ok_or_else(|| PipelineError::Stage {
            stage: Stage::Select,
            detail: format!("selected id {id:?} is missing from the filtered catalog"),
        })?;
        let mut record = (*record).clone();
        record
            .advance_stage(catalog::Stage::Curated)
            .map_err(stage_err(Stage::Select))?;
        curated.push(record);
    }
    catalog::write_shard(&curated, &paths.curated()).map_err(stage_err(Stage::Select))?;
    Ok((list_path, selected_ids.len() as u64))
}

async fn stage_annotate(
    paths: &WorkPaths,
    config: &ConfigFile,
) -> Result<(PathBuf, u64), PipelineError> {
    let expert_url = config
        .inputs
        .expert_url
        .as_ref()
        .ok_or(PipelineError::MissingInput {
            stage: Stage::Annotate,
            what: "expert_url",
        })?;
    let records = catalog::read_shard(&paths.curated()).map_err(stage_err(Stage::Annotate))?;
    let client = Arc::new(
        ExpertClient::new(expert_url.clone())
            .with_retries(config.pipeline.engine_max_retries, BackoffPolicy::default()),
    );

    // The expert endpoint shares the engine's in-flight bound: one
    // knob for "how hard may this pipeline hit a service".
    let semaphore = Arc::new(tokio::sync::Semaphore::new(
        config.pipeline.engine_max_in_flight,
    ));
    let mut handles = Vec::with_capacity(records.len());
    for (index, record) in records.into_iter().enumerate() {
        let client = Arc::clone(&client);
        let semaphore = Arc::clone(&semaphore);
        handles.push(tokio::spawn(async move {
            let _permit = semaphore.acquire_owned().await.expect("semaphore open");
            let result = experts::annotate_image(&client, &record, &ExpertTask::ALL).await;
            (index, record, result)
        }));
    }

    let mut finished = Vec::with_capacity(handles.len());
    for handle in handles {
        finished.push(handle.await.expect("annotate task panicked"));
    }
    finished.sort_by_key(|(index, _, _)| *index);

    let mut annotation_lines = String::new();
    let mut warning_lines = String::new();
    let mut annotated = 0u64;
    for (_, mut record, result) in finished {
        match result {
            Ok((raw, warnings)) => {
                for w in &warnings {
                    warning_lines.push_str(&serde_json::to_string(w).expect("warning serializes"));
                    warning_lines.push('\n');
                }
                let bundle = experts::build_bundle(&record, raw, &config.pipeline);
                record
                    .advance_stage(catalog::Stage::Annotated)
                    .map_err(stage_err(Stage::Annotate))?;
                let annotation = AnnotationRecord {
                    bundle,
                    uri: record.uri.clone(),
                    width_px: record.width_px,
                    height_px: record.height_px,
                };
                annotation_lines
                    .push_str(&serde_json::to_string(&annotation).expect("record serializes"));
                annotation_lines.push('\n');
                annotated += 1;
            }
            Err(e) => {
                let warning = serde_json::json!({
                    "image_id": record.id,
                    "task": "all",
                    "detail": e.to_string(),
                });
                warning_lines.push_str(&warning.to_string());
                warning_lines.push('\n');
            }
        }
    }

    if annotated == 0 {
        return Err(PipelineError::Stage {
            stage: Stage::Annotate,
            detail: "every image failed annotation".to_string(),
        });
    }
    let out = paths.annotations();
    std::fs::write(&out, annotation_lines).map_err(io_err(&out))?;
    let warn_path = paths.warnings();
    std::fs::write(&warn_path, warning_lines).map_err(io_err(&warn_path))?;
    Ok((out, annotated))
}

/// Reads annotations.jsonl.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::Stage {
                stage: Stage::Prompt,
                detail: format!("annotations line {}: {}", idx + 1, e),
            })?;
        records.push(record);
    }
    Ok(records)
}

fn stage_prompt(
    paths: &WorkPaths,
    kind: PromptKind,
) -> Result<(PathBuf, u64), PipelineError> {
    let annotations = read_annotations(&paths.annotations())?;
    let mut lines = String::new();
    let mut count = 0u64;
    for record in &annotations {
        let prompt = fusion::assemble(&record.bundle, kind).map_err(stage_err(Stage::Prompt))?;
        let line = PromptLine {
            image_id: record.bundle.image_id.clone(),
            kind,
            prompt: prompt.text,
            uri: record.uri.clone(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("prompt serializes"));
        lines.push('\n');
        count += 1;
    }
    let out = paths.prompts();
    std::fs::write(&out, lines).map_err(io_err(&out))?;
    Ok((out, count))
}

async fn stage_caption(
    paths: &WorkPaths,
    config: &ConfigFile,
    force: bool,
) -> Result<(PathBuf, u64), PipelineError> {
    let engine_url = config
        .inputs
        .engine_url
        .as_ref()
        .ok_or(PipelineError::MissingInput {
            stage: Stage::Caption,
            what: "engine_url",
        })?;
    let model = config
        .inputs
        .engine_model
        .clone()
        .unwrap_or_else(|| "default-engine".to_string());
    let prompts = captioner::read_prompts(&paths.prompts()).map_err(stage_err(Stage::Caption))?;
    let prompt_count = prompts.len() as u64;

    let client = Arc::new(
        EngineClient::new(engine_url.clone(), model)
            .with_api_key(std::env::var("DENSEFUSE_API_KEY").ok())
            .with_retries(config.pipeline.engine_max_retries, BackoffPolicy::default()),
    );
    let out = paths.captions();
    let resume = if force {
        ResumeMode::Restart
    } else {
        ResumeMode::Resume
    };
    let cancel: Arc<AtomicBool> = Arc::new(AtomicBool::new(false));
    let report = captioner::run_batch(
        prompts,
        client,
        config.pipeline.engine_max_in_flight,
        &out,
        resume,
        &cancel,
    )
    .await
    .map_err(stage_err(Stage::Caption))?;

    if report.cancelled {
        return Err(PipelineError::Stage {
            stage: Stage::Caption,
            detail: "caption batch stopped before draining its input".to_string(),
        });
    }

    let captions = captioner::read_captions(&out).map_err(stage_err(Stage::Caption))?;
    let failure_ids = count_failure_lines(&captioner::failures_path(&out))?;
    let outcome_count = captions.len() as u64 + failure_ids;
    if outcome_count != prompt_count {
        return Err(PipelineError::Conservation {
            detail: format!(
                "captions ({}) + failures ({failure_ids}) != prompts ({prompt_count})",
                captions.len()
            ),
        });
    }
    Ok((out, captions.len() as u64))
}

fn count_failure_lines(path: &Path) -> Result<u64, PipelineError> {
    if !path.exists() {
        return Ok(0);
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count() as u64)
}

fn stage_stats(paths: &WorkPaths) -> Result<(PathBuf, u64), PipelineError> {
    let captions =
        captioner::read_captions(&paths.captions()).map_err(stage_err(Stage::Stats))?;
    let annotations = read_annotations(&paths.annotations())?;
    let bundles: Vec<_> = annotations.into_iter().map(|r| r.bundle).collect();
    let report = stats::aggregate(&captions, &bundles, &HeuristicTagger, None)
        .map_err(stage_err(Stage::Stats))?;
    let out = paths.report();
    stats::write_report(&report, &out).map_err(stage_err(Stage::Stats))?;
    Ok((out, report.sample_count as u64))
}

/// Conservation rule checked after a stage completes, against the
/// prior stage's recorded count.
fn check_conservation(
    manifest: &RunManifest,
    stage: Stage,
    records: u64,
) -> Result<(), PipelineError> {
    let rule: Option<(Stage, bool)> = match stage {
        Stage::Filter => Some((Stage::Ingest, false)),
        Stage::EmbedIngest => Some((Stage::Filter, false)),
        Stage::Cluster => Some((Stage::EmbedIngest, true)),
        Stage::Dedup => Some((Stage::Cluster, false)),
        Stage::Select => Some((Stage::Dedup, false)),
        Stage::Annotate => Some((Stage::Select, false)),
        Stage::Prompt => Some((Stage::Annotate, true)),
        _ => None,
    };
    if let Some((prior, exact)) = rule {
        if let Some(prior_records) = manifest.records(prior) {
            let ok = if exact {
                records == prior_records
            } else {
                records <= prior_records
            };
            if !ok {
                let relation = if exact { "equal" } else { "be at most" };
                return Err(PipelineError::Conservation {
                    detail: format!(
                        "{stage} produced {records} records; expected to {relation} {prior} ({prior_records})"
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Executes the requested stage range in order. Completed stages are
/// skipped unless `force`; a forced rerun marks everything downstream
/// pending first, since its inputs are about to change.
pub async fn run_pipeline(
    workdir: &Path,
    config: &ConfigFile,
    opts: &RunOptions,
) -> Result<RunManifest, PipelineError> {
    if opts.from > opts.to {
        return Err(PipelineError::BadRange {
            from: opts.from,
            to: opts.to,
        });
    }
    config.pipeline.validate()?;
    std::fs::create_dir_all(workdir).map_err(io_err(workdir))?;
    let paths = WorkPaths::new(workdir);
    let _lock = LockGuard::acquire(paths.lock())?;

    let current_hash = config_hash(&config.pipeline);
    let manifest_path = paths.manifest();
    let mut manifest = if manifest_path.exists() {
        let manifest = RunManifest::load(&manifest_path)?;
        if manifest.config_hash != current_hash {
            return Err(PipelineError::ConfigChanged {
                stored: manifest.config_hash,
                current: current_hash,
            });
        }
        manifest
    } else {
        RunManifest::new(current_hash)
    };

    for stage in Stage::ALL {
        if stage < opts.from || stage > opts.to {
            continue;
        }
        if manifest.is_done(stage) && !opts.force {
            continue;
        }
        for prior in Stage::ALL.into_iter().filter(|p| *p < stage) {
            if !manifest.is_done(prior) {
                return Err(PipelineError::StageNotDone {
                    stage,
                    needed: prior,
                });
            }
        }

        // Mark this stage and everything after it pending before
        // touching artifacts, so a crash leaves an honest manifest.
        for later in Stage::ALL.into_iter().filter(|l| *l >= stage) {
            manifest.set_pending(later);
        }
        manifest.save(&manifest_path)?;

        let (artifact, records) = match stage {
            Stage::Ingest => stage_ingest(&paths, config)?,
            Stage::Filter => stage_filter(&paths, config)?,
            Stage::EmbedIngest => stage_embed_ingest(&paths, config)?,
            Stage::Cluster => stage_cluster(&paths, config)?,
            Stage::Dedup => stage_dedup(&paths, config)?,
            Stage::Select => stage_select(&paths, config)?,
            Stage::Annotate => stage_annotate(&paths, config).await?,
            Stage::Prompt => stage_prompt(&paths, opts.prompt_kind)?,
            Stage::Caption => stage_caption(&paths, config, opts.force).await?,
            Stage::Stats => stage_stats(&paths)?,
        };

        check_conservation(&manifest, stage, records)?;
        manifest.set_done(stage, artifact.display().to_string(), records);
        manifest.save(&manifest_path)?;
        eprintln!("{stage}: done ({records} records)");
    }

    manifest.save(&manifest_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::from_str(stage.name()).unwrap(), stage);
        }
        assert!(Stage::from_str("embedingest").is_err());
    }

    #[test]
    fn stage_order_matches_all() {
        for pair in Stage::ALL.windows(2) {
            assert!(pair[0] < pair[1]);
        }
    }

    #[test]
    fn empty_config_resolves_to_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.conf");
        std::fs::write(&path, "").unwrap();
        let file = load_config(&path).unwrap();
        assert_eq!(file.pipeline, PipelineConfig::default());
        assert_eq!(file.pipeline.dedup_epsilon, 0.4);
        assert_eq!(file.inputs, InputsConfig::default());
    }

    #[test]
    fn out_of_range_epsilon_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.conf");
        std::fs::write(&path, "[pipeline]\ndedup_epsilon = 1.5\n").unwrap();
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("dedup_epsilon"), "error was: {err}");
    }

    #[test]
    fn unknown_key_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.conf");
        std::fs::write(&path, "[pipeline]\nepsilonn = 0.4\n").unwrap();
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("epsilonn"), "error was: {err}");
    }

    #[test]
    fn config_hash_ignores_inputs() {
        let a = ConfigFile::default();
        let mut b = ConfigFile::default();
        b.inputs.engine_url = Some("http://127.0.0.1:9".to_string());
        assert_eq!(config_hash(&a.pipeline), config_hash(&b.pipeline));
        let mut c = ConfigFile::default();
        c.pipeline.dedup_epsilon = 0.5;
        assert_ne!(config_hash(&a.pipeline), config_hash(&c.pipeline));
    }

    #[test]
    fn manifest_prefix_invariant() {
        let mut manifest = RunManifest::new("h".to_string());
        manifest.set_done(Stage::Filter, "x".to_string(), 1);
        assert!(manifest.check_prefix_invariant().is_err());
        manifest.set_done(Stage::Ingest, "x".to_string(), 2);
        assert!(manifest.check_prefix_invariant().is_ok());
    }

    #[test]
    fn manifest_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest = RunManifest::new("abc".to_string());
        manifest.set_done(Stage::Ingest, "ingested".to_string(), 10);
        manifest.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.config_hash, "abc");
        assert_eq!(loaded.records(Stage::Ingest), Some(10));
        assert!(!loaded.is_done(Stage::Filter));
    }

    #[test]
    fn lock_guard_excludes_and_releases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LOCK_FILE);
        let guard = LockGuard::acquire(path.clone()).unwrap();
        assert!(matches!(
            LockGuard::acquire(path.clone()),
            Err(PipelineError::Locked { .. })
        ));
        drop(guard);
        assert!(!path.exists());
        let again = LockGuard::acquire(path).unwrap();
        drop(again);
    }

    #[test]
    fn conservation_rules() {
        let mut manifest = RunManifest::new("h".to_string());
        manifest.set_done(Stage::Ingest, "a".to_string(), 100);
        assert!(check_conservation(&manifest, Stage::Filter, 80).is_ok());
        assert!(check_conservation(&manifest, Stage::Filter, 101).is_err());
        manifest.set_done(Stage::EmbedIngest, "b".to_string(), 80);
        assert!(check_conservation(&manifest, Stage::Cluster, 80).is_ok());
        assert!(check_conservation(&manifest, Stage::Cluster, 79).is_err());
    }
}
