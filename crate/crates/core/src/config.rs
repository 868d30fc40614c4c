//! Pipeline configuration: every tunable in one strict-schema struct.
//!
//! Defaults carry the published curation constants (448 px short edge,
//! 50,000 clusters, dedup epsilon 0.4, top-20 selection). Unknown keys in a
//! config file are fatal so a typo can never silently revert one of these
//! to its default.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}` out of range: {detail}")]
    OutOfRange { field: &'static str, detail: String },
    #[error("failed to read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config schema violation: {0}")]
    Schema(String),
}

/// Ranking criterion for per-cluster representative selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectRank {
    /// Most representative first: descending centroid similarity.
    #[default]
    Centroid,
    /// Largest short edge first.
    Resolution,
    /// Seeded pseudo-random order, stable across runs.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Images with min(width, height) below this are filtered out.
    pub min_short_edge_px: u32,
    /// Number of k-means clusters over image embeddings.
    pub cluster_count_k: usize,
    /// Dedup threshold epsilon: pairs with cosine similarity >= 1 - epsilon
    /// are treated as semantic duplicates.
    pub dedup_epsilon: f64,
    /// Representatives kept per cluster after dedup.
    pub select_top_k: usize,
    /// Minimum confidence for closed-set detection boxes.
    pub closed_set_conf_threshold: f64,
    /// Minimum confidence for open-set detection boxes.
    pub open_set_conf_threshold: f64,
    /// Detection boxes kept per image after balanced sampling.
    pub max_boxes_per_image: usize,
    /// A box is "small" when area / image area is below this fraction.
    pub small_box_area_frac: f64,
    /// Fraction of the box budget reserved for small boxes.
    pub small_box_quota_frac: f64,
    /// Ranking used by per-cluster selection.
    pub select_rank: SelectRank,
    /// Maximum k-means Lloyd iterations.
    pub kmeans_max_iters: usize,
    /// Stop k-means when the objective improves by less than this.
    pub kmeans_tol: f64,
    /// Bound on concurrent requests per remote endpoint.
    pub engine_max_in_flight: usize,
    /// Retries after the first attempt for retryable endpoint failures.
    pub engine_max_retries: u32,
    /// Seed for every randomized step (k-means init, random selection).
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_short_edge_px: 448,
            cluster_count_k: 50_000,
            dedup_epsilon: 0.4,
            select_top_k: 20,
            closed_set_conf_threshold: 0.5,
            open_set_conf_threshold: 0.35,
            max_boxes_per_image: 20,
            small_box_area_frac: 0.02,
            small_box_quota_frac: 0.3,
            select_rank: SelectRank::Centroid,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            engine_max_in_flight: 8,
            engine_max_retries: 3,
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Validates every field range. Called before any stage runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn range(
            field: &'static str,
            ok: bool,
            detail: impl Into<String>,
        ) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    field,
                    detail: detail.into(),
                })
            }
        }

        range(
            "min_short_edge_px",
            self.min_short_edge_px >= 1,
            "must be a positive integer",
        )?;
        range(
            "cluster_count_k",
            self.cluster_count_k >= 1,
            "must be a positive integer",
        )?;
        range(
            "dedup_epsilon",
            self.dedup_epsilon > 0.0 && self.dedup_epsilon < 1.0,
            format!("{} not in (0, 1)", self.dedup_epsilon),
        )?;
        range(
            "select_top_k",
            self.select_top_k >= 1,
            "must be a positive integer",
        )?;
        range(
            "closed_set_conf_threshold",
            (0.0..=1.0).contains(&self.closed_set_conf_threshold),
            format!("{} not in [0, 1]", self.closed_set_conf_threshold),
        )?;
        range(
            "open_set_conf_threshold",
            (0.0..=1.0).contains(&self.open_set_conf_threshold),
            format!("{} not in [0, 1]", self.open_set_conf_threshold),
        )?;
        range(
            "max_boxes_per_image",
            self.max_boxes_per_image >= 1,
            "must be a positive integer",
        )?;
        range(
            "small_box_area_frac",
            self.small_box_area_frac > 0.0 && self.small_box_area_frac < 1.0,
            format!("{} not in (0, 1)", self.small_box_area_frac),
        )?;
        range(
            "small_box_quota_frac",
            (0.0..=1.0).contains(&self.small_box_quota_frac),
            format!("{} not in [0, 1]", self.small_box_quota_frac),
        )?;
        range(
            "kmeans_max_iters",
            self.kmeans_max_iters >= 1,
            "must be a positive integer",
        )?;
        range(
            "kmeans_tol",
            self.kmeans_tol > 0.0,
            "must be strictly positive",
        )?;
        range(
            "engine_max_in_flight",
            self.engine_max_in_flight >= 1,
            "must be a positive integer",
        )?;
        Ok(())
    }
}
