//! densefuse-core: batch curation and caption-fusion pipeline.
//!
//! The pipeline turns a raw image manifest into fused captions in stages:
//! resolution filtering, embedding-space dedup, multi-expert annotation,
//! prompt assembly, and caption generation against an engine endpoint.
//! Each stage reads and writes plain artifacts (ldjson shards, binary
//! embedding stores) so runs can resume and individual stages can be
//! re-executed in isolation.

pub mod captioner;
pub mod catalog;
pub mod config;
pub mod curator;
pub mod embedstore;
pub mod experts;
pub mod fusion;
pub mod mock;
pub mod pipeline;
pub mod stats;

pub use catalog::{ImageRecord, Stage};
pub use config::PipelineConfig;
pub use embedstore::{cosine_similarity, normalize, EmbeddingStore};
pub use experts::AnnotationBundle;
pub use fusion::{FusionPrompt, PromptKind};
