//! Embedding-space curation: spherical k-means, per-cluster semantic
//! dedup, and top-k representative selection.
//!
//! All three stages are deterministic. Clustering seeds with k-means++
//! from an explicit RNG seed and reduces in fixed chunk order, so the
//! same inputs give bit-identical models regardless of thread count.
//! Dedup visits cluster members in a canonical order (least central
//! first), which makes its output independent of input permutation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SelectRank;
use crate::embedstore::{dot_mixed, EmbeddingStore};

pub const MODEL_MAGIC: &[u8; 6] = b"DFKMN1";

/// Points per parallel work unit in the assignment step. Fixed so the
/// reduction order never depends on the thread pool.
const ASSIGN_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum CuratorError {
    #[error("store has {points} points but k = {k}")]
    TooFewPoints { points: usize, k: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("epsilon {0} outside (0, 1)")]
    EpsilonRange(f64),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file {path} is invalid: {detail}")]
    BadModel { path: String, detail: String },
    #[error("decisions file {path} line {line} is invalid: {detail}")]
    BadDecision {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("assignment references image {image_id:?} missing from store")]
    MissingVector { image_id: String },
}

/// One image's cluster membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub image_id: String,
    pub cluster_id: u32,
    pub centroid_similarity: f64,
}

/// Fitted spherical k-means model. Centroids are unit vectors kept in
/// f64 to make similarity comparisons stable at tight tolerances.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub dim: usize,
    pub k: usize,
    pub iterations_run: usize,
    pub final_objective: f64,
    /// Objective after every assignment step, in order.
    pub objective_history: Vec<f64>,
    centroids: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, cluster_id: usize) -> &[f64] {
        &self.centroids[cluster_id * self.dim..(cluster_id + 1) * self.dim]
    }
}

/// Outcome of dedup for one image within its cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupDecision {
    pub image_id: String,
    pub kept: bool,
    /// The kept item this one duplicates; set iff not kept.
    pub duplicate_of: Option<String>,
}

/// Decisions file line: dedup outcome joined with cluster membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub cluster: u32,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
    pub centroid_similarity: f64,
}

fn renormalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// k-means++ seeding. Deterministic for a given seed; with exactly k
/// points every point becomes a centroid.
pub fn kmeans_init(store: &EmbeddingStore, k: usize, seed: u64) -> Result<Vec<f64>, CuratorError> {
    if k == 0 {
        return Err(CuratorError::ZeroK);
    }
    let n = store.len();
    if n < k {
        return Err(CuratorError::TooFewPoints { points: n, k });
    }
    let dim = store.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];

    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;

    // Squared cosine distance to the nearest chosen seed so far.
    let mut weight: Vec<f64> = (0..n)
        .map(|i| {
            let d = 1.0 - dot_f32(store.vector_at(i), store.vector_at(first));
            d * d
        })
        .collect();
    weight[first] = 0.0;

    while chosen.len() < k {
        let total: f64 = weight.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let u = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let mut hit = None;
            for (i, w) in weight.iter().enumerate() {
                cum += w;
                if cum > u && *w > 0.0 {
                    hit = Some(i);
                    break;
                }
            }
            hit.unwrap_or_else(|| {
                // Rounding pushed u past the last positive weight.
                weight
                    .iter()
                    .rposition(|w| *w > 0.0)
                    .expect("total > 0 implies a positive weight")
            })
        } else {
            // All remaining points coincide with a seed; take the first
            // unchosen one so seeds stay distinct points.
            is_chosen
                .iter()
                .position(|c| !c)
                .expect("n >= k guarantees an unchosen point")
        };
        chosen.push(pick);
        is_chosen[pick] = true;
        weight[pick] = 0.0;
        let picked_vec = store.vector_at(pick);
        for i in 0..n {
            if weight[i] > 0.0 {
                let d = 1.0 - dot_f32(store.vector_at(i), picked_vec);
                let d2 = d * d;
                if d2 < weight[i] {
                    weight[i] = d2;
                }
            }
        }
    }

    let mut centroids = vec![0.0f64; k * dim];
    for (c, &idx) in chosen.iter().enumerate() {
        for (j, x) in store.vector_at(idx).iter().enumerate() {
            centroids[c * dim + j] = *x as f64;
        }
    }
    Ok(centroids)
}

struct AssignStep {
    clusters: Vec<u32>,
    sims: Vec<f64>,
    objective: f64,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

/// One full assignment pass. Chunks run in parallel; their partial sums
/// are folded sequentially in chunk order, so the result does not
/// depend on scheduling.
fn assign_step(store: &EmbeddingStore, centroids: &[f64], k: usize, dim: usize) -> AssignStep {
    let n = store.len();
    let chunk_results: Vec<_> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(ASSIGN_CHUNK)
        .map(|chunk| {
            let mut clusters = Vec::with_capacity(chunk.len());
            let mut sims = Vec::with_capacity(chunk.len());
            let mut objective = 0.0f64;
            let mut sums: HashMap<u32, Vec<f64>> = HashMap::new();
            let mut counts: HashMap<u32, u64> = HashMap::new();
            for &i in chunk {
                let v = store.vector_at(i);
                let mut best = 0u32;
                let mut best_sim = f64::NEG_INFINITY;
                for c in 0..k {
                    let sim = dot_mixed(&centroids[c * dim..(c + 1) * dim], v);
                    if sim > best_sim {
                        best_sim = sim;
                        best = c as u32;
                    }
                }
                clusters.push(best);
                sims.push(best_sim);
                objective += 1.0 - best_sim;
                let sum = sums.entry(best).or_insert_with(|| vec![0.0; dim]);
                for (j, x) in v.iter().enumerate() {
                    sum[j] += *x as f64;
                }
                *counts.entry(best).or_insert(0) += 1;
            }
            (clusters, sims, objective, sums, counts)
        })
        .collect();

    let mut clusters = Vec::with_capacity(n);
    let mut sims = Vec::with_capacity(n);
    let mut objective = 0.0f64;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0u64; k];
    for (part_clusters, part_sims, part_obj, part_sums, part_counts) in chunk_results {
        clusters.extend(part_clusters);
        sims.extend(part_sims);
        objective += part_obj;
        for (c, sum) in part_sums {
            let base = c as usize * dim;
            for (j, x) in sum.iter().enumerate() {
                sums[base + j] += x;
            }
        }
        for (c, count) in part_counts {
            counts[c as usize] += count;
        }
    }
    AssignStep {
        clusters,
        sims,
        objective,
        sums,
        counts,
    }
}

/// Runs Lloyd iterations from explicit initial centroids. Exposed for
/// tests that need to force degenerate starts; [`kmeans_run`] is the
/// normal entry point.
pub fn kmeans_run_with_init(
    store: &EmbeddingStore,
    mut centroids: Vec<f64>,
    k: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterModel, Vec<Assignment>), CuratorError> {
    let dim = store.dim();
    assert_eq!(centroids.len(), k * dim, "centroid buffer shape");
    let mut history = Vec::new();
    let mut prev_objective = f64::INFINITY;
    let mut iterations_run = 0usize;

    let step = loop {
        let step = assign_step(store, &centroids, k, dim);
        history.push(step.objective);
        if prev_objective - step.objective < tol || iterations_run >= max_iters {
            break step;
        }
        prev_objective = step.objective;

        // Mean update, renormalized back to the sphere.
        for c in 0..k {
            if step.counts[c] == 0 {
                continue;
            }
            let base = c * dim;
            let inv = 1.0 / step.counts[c] as f64;
            let slot = &mut centroids[base..base + dim];
            for (j, s) in step.sums[base..base + dim].iter().enumerate() {
                slot[j] = s * inv;
            }
            if !renormalize(slot) {
                // Members cancelled out; fall back to the first member.
                let row = step.clusters.iter().position(|&a| a == c as u32).unwrap();
                for (j, x) in store.vector_at(row).iter().enumerate() {
                    slot[j] = *x as f64;
                }
            }
        }

        // Reseed empty clusters onto the currently worst-fit points.
        let empties: Vec<usize> = (0..k).filter(|&c| step.counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..store.len()).collect();
            order.sort_by(|&a, &b| {
                step.sims[a]
                    .partial_cmp(&step.sims[b])
                    .unwrap()
                    .then_with(|| store.id_at(a).cmp(store.id_at(b)))
            });
            for (empty, &row) in empties.iter().zip(order.iter()) {
                let base = empty * dim;
                for (j, x) in store.vector_at(row).iter().enumerate() {
                    centroids[base + j] = *x as f64;
                }
            }
        }
        iterations_run += 1;
    };

    let assignments = (0..store.len())
        .map(|i| Assignment {
            image_id: store.id_at(i).to_string(),
            cluster_id: step.clusters[i],
            centroid_similarity: step.sims[i].clamp(-1.0, 1.0),
        })
        .collect();
    let model = ClusterModel {
        dim,
        k,
        iterations_run,
        final_objective: step.objective,
        objective_history: history,
        centroids,
    };
    Ok((model, assignments))
}

/// Full clustering: k-means++ init then Lloyd iterations with cosine
/// distance on unit vectors.
pub fn kmeans_run(
    store: &EmbeddingStore,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterModel, Vec<Assignment>), CuratorError> {
    let centroids = kmeans_init(store, k, seed)?;
    kmeans_run_with_init(store, centroids, k, max_iters, tol)
}

/// One cluster member as seen by dedup.
#[derive(Debug, Clone, Copy)]
pub struct DedupMember<'a> {
    pub image_id: &'a str,
    pub vector: &'a [f32],
    pub centroid_similarity: f64,
}

/// Greedy within-cluster dedup. Members are visited least-central
/// first (ties by id); an item is kept iff its similarity to every
/// already-kept item stays below 1 - epsilon. Removed items point at
/// the kept item they most resemble.
pub fn semdedup_cluster(
    members: &[DedupMember<'_>],
    epsilon: f64,
) -> Result<Vec<DedupDecision>, CuratorError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(CuratorError::EpsilonRange(epsilon));
    }
    let threshold = 1.0 - epsilon;
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        members[a]
            .centroid_similarity
            .partial_cmp(&members[b].centroid_similarity)
            .unwrap()
            .then_with(|| members[a].image_id.cmp(members[b].image_id))
    });

    let mut kept: Vec<usize> = Vec::new();
    let mut decisions = Vec::with_capacity(members.len());
    for &i in &order {
        let mut max_sim = f64::NEG_INFINITY;
        let mut witness = None;
        for &j in &kept {
            let sim = dot_f32(members[i].vector, members[j].vector).clamp(-1.0, 1.0);
            if sim > max_sim {
                max_sim = sim;
                witness = Some(j);
            }
        }
        if witness.is_none() || max_sim < threshold {
            kept.push(i);
            decisions.push(DedupDecision {
                image_id: members[i].image_id.to_string(),
                kept: true,
                duplicate_of: None,
            });
        } else {
            decisions.push(DedupDecision {
                image_id: members[i].image_id.to_string(),
                kept: false,
                duplicate_of: Some(members[witness.unwrap()].image_id.to_string()),
            });
        }
    }
    Ok(decisions)
}

/// Dedup across a whole model: clusters are independent, so they run in
/// parallel and the output is concatenated in cluster-id order.
pub fn dedup_all(
    store: &EmbeddingStore,
    assignments: &[Assignment],
    epsilon: f64,
) -> Result<Vec<DecisionRecord>, CuratorError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(CuratorError::EpsilonRange(epsilon));
    }
    let mut by_cluster: HashMap<u32, Vec<&Assignment>> = HashMap::new();
    for a in assignments {
        if store.get(&a.image_id).is_none() {
            return Err(CuratorError::MissingVector {
                image_id: a.image_id.clone(),
            });
        }
        by_cluster.entry(a.cluster_id).or_default().push(a);
    }
    let mut cluster_ids: Vec<u32> = by_cluster.keys().copied().collect();
    cluster_ids.sort_unstable();

    let per_cluster: Vec<Vec<DecisionRecord>> = cluster_ids
        .par_iter()
        .map(|cid| {
            let assignments = &by_cluster[cid];
            let members: Vec<DedupMember<'_>> = assignments
                .iter()
                .map(|a| DedupMember {
                    image_id: &a.image_id,
                    vector: store.get(&a.image_id).unwrap(),
                    centroid_similarity: a.centroid_similarity,
                })
                .collect();
            let sims: HashMap<&str, f64> = assignments
                .iter()
                .map(|a| (a.image_id.as_str(), a.centroid_similarity))
                .collect();
            semdedup_cluster(&members, epsilon)
                .expect("epsilon validated above")
                .into_iter()
                .map(|d| DecisionRecord {
                    centroid_similarity: sims[d.image_id.as_str()],
                    id: d.image_id,
                    cluster: *cid,
                    kept: d.kept,
                    duplicate_of: d.duplicate_of,
                })
                .collect()
        })
        .collect();
    Ok(per_cluster.into_iter().flatten().collect())
}

/// Picks the top-k most central kept members of one cluster,
/// descending; ties fall to the lexicographically smaller id.
pub fn select_top_k(kept_members: &[(String, f64)], top_k: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..kept_members.len()).collect();
    order.sort_by(|&a, &b| {
        kept_members[b]
            .1
            .partial_cmp(&kept_members[a].1)
            .unwrap()
            .then_with(|| kept_members[a].0.cmp(&kept_members[b].0))
    });
    order
        .into_iter()
        .take(top_k)
        .map(|i| kept_members[i].0.clone())
        .collect()
}

/// A kept member with everything any rank mode can ask for.
#[derive(Debug, Clone)]
pub struct SelectMember {
    pub image_id: String,
    pub centroid_similarity: f64,
    /// Pixel count, when a manifest is available for resolution ranking.
    pub resolution_px: Option<u64>,
}

fn fnv1a(seed: u64, id: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Rank-mode-aware selection over one cluster's kept members.
pub fn select_ranked(
    members: &[SelectMember],
    top_k: usize,
    rank: SelectRank,
    seed: u64,
) -> Vec<String> {
    let mut order: Vec<usize> = (0..members.len()).collect();
    match rank {
        SelectRank::Centroid => order.sort_by(|&a, &b| {
            members[b]
                .centroid_similarity
                .partial_cmp(&members[a].centroid_similarity)
                .unwrap()
                .then_with(|| members[a].image_id.cmp(&members[b].image_id))
        }),
        SelectRank::Resolution => order.sort_by(|&a, &b| {
            members[b]
                .resolution_px
                .unwrap_or(0)
                .cmp(&members[a].resolution_px.unwrap_or(0))
                .then_with(|| members[a].image_id.cmp(&members[b].image_id))
        }),
        SelectRank::Random => order.sort_by(|&a, &b| {
            fnv1a(seed, &members[a].image_id)
                .cmp(&fnv1a(seed, &members[b].image_id))
                .then_with(|| members[a].image_id.cmp(&members[b].image_id))
        }),
    }
    order
        .into_iter()
        .take(top_k)
        .map(|i| members[i].image_id.clone())
        .collect()
}

struct ModelReader<R> {
    inner: R,
    path: String,
}

impl<R: Read> ModelReader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CuratorError> {
        self.inner
            .read_exact(buf)
            .map_err(|source| CuratorError::Io {
                path: self.path.clone(),
                source,
            })
    }

    fn u16_le(&mut self) -> Result<u16, CuratorError> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32_le(&mut self) -> Result<u32, CuratorError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64_le(&mut self) -> Result<u64, CuratorError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64_le(&mut self) -> Result<f64, CuratorError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Writes a model plus its assignments as one binary artifact.
pub fn write_model(
    model: &ClusterModel,
    assignments: &[Assignment],
    path: &Path,
) -> Result<(), CuratorError> {
    let io_err = |source| CuratorError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MODEL_MAGIC).map_err(io_err)?;
    w.write_all(&(model.dim as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(model.k as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(model.iterations_run as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&model.final_objective.to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(model.objective_history.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for obj in &model.objective_history {
        w.write_all(&obj.to_le_bytes()).map_err(io_err)?;
    }
    for x in &model.centroids {
        w.write_all(&x.to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(assignments.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    for a in assignments {
        let id = a.image_id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(id).map_err(io_err)?;
        w.write_all(&a.cluster_id.to_le_bytes()).map_err(io_err)?;
        w.write_all(&a.centroid_similarity.to_le_bytes())
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a model artifact back, bit-exact.
pub fn read_model(path: &Path) -> Result<(ClusterModel, Vec<Assignment>), CuratorError> {
    let file = File::open(path).map_err(|source| CuratorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = ModelReader {
        inner: BufReader::new(file),
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 6];
    r.exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(CuratorError::BadModel {
            path: r.path,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let dim = r.u32_le()? as usize;
    let k = r.u32_le()? as usize;
    let iterations_run = r.u64_le()? as usize;
    let final_objective = r.f64_le()?;
    let history_len = r.u32_le()? as usize;
    let mut objective_history = Vec::with_capacity(history_len);
    for _ in 0..history_len {
        objective_history.push(r.f64_le()?);
    }
    let mut centroids = Vec::with_capacity(k * dim);
    for _ in 0..k * dim {
        centroids.push(r.f64_le()?);
    }
    let count = r.u64_le()?;
    let mut assignments = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id_len = r.u16_le()? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.exact(&mut id_bytes)?;
        let image_id = String::from_utf8(id_bytes).map_err(|_| CuratorError::BadModel {
            path: r.path.clone(),
            detail: "assignment id is not UTF-8".into(),
        })?;
        let cluster_id = r.u32_le()?;
        let centroid_similarity = r.f64_le()?;
        if cluster_id as usize >= k {
            return Err(CuratorError::BadModel {
                path: r.path,
                detail: format!("cluster id {cluster_id} out of range for k={k}"),
            });
        }
        assignments.push(Assignment {
            image_id,
            cluster_id,
            centroid_similarity,
        });
    }
    let model = ClusterModel {
        dim,
        k,
        iterations_run,
        final_objective,
        objective_history,
        centroids,
    };
    Ok((model, assignments))
}

/// Appends nothing, truncates, writes every decision as one JSON line.
pub fn write_decisions(records: &[DecisionRecord], path: &Path) -> Result<(), CuratorError> {
    let io_err = |source| CuratorError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("decision serializes");
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>, CuratorError> {
    let file = File::open(path).map_err(|source| CuratorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CuratorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DecisionRecord =
            serde_json::from_str(&line).map_err(|e| CuratorError::BadDecision {
                path: path.display().to_string(),
                line: idx + 1,
                detail: e.to_string(),
            })?;
        records.push(rec);
    }
    Ok(records)
}

/// Sanity check used by tests and the pipeline: every kept/removed
/// relation must hold against the actual vectors.
pub fn verify_dedup(
    store: &EmbeddingStore,
    records: &[DecisionRecord],
    epsilon: f64,
) -> Result<(), String> {
    let threshold = 1.0 - epsilon;
    let kept_by_cluster: HashMap<u32, Vec<&DecisionRecord>> =
        records.iter().filter(|r| r.kept).fold(HashMap::new(), |mut m, r| {
            m.entry(r.cluster).or_default().push(r);
            m
        });
    for (cluster, kept) in &kept_by_cluster {
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                let sim = dot_f32(store.get(&a.id).unwrap(), store.get(&b.id).unwrap());
                if sim >= threshold {
                    return Err(format!(
                        "kept pair {} / {} in cluster {cluster} has similarity {sim}",
                        a.id, b.id
                    ));
                }
            }
        }
    }
    for rec in records.iter().filter(|r| !r.kept) {
        let Some(dup_of) = &rec.duplicate_of else {
            return Err(format!("removed {} lacks duplicate_of", rec.id));
        };
        let witness = records
            .iter()
            .find(|r| &r.id == dup_of && r.cluster == rec.cluster && r.kept);
        let Some(witness) = witness else {
            return Err(format!(
                "removed {} points at {dup_of} which is not kept in cluster {}",
                rec.id, rec.cluster
            ));
        };
        let sim = dot_f32(
            store.get(&rec.id).unwrap(),
            store.get(&witness.id).unwrap(),
        );
        if sim < threshold {
            return Err(format!(
                "removed {} has similarity {sim} to witness {}, below {threshold}",
                rec.id, witness.id
            ));
        }
    }
    Ok(())
}

/// Exact nearest-centroid check for a finished model.
pub fn verify_assignments(
    store: &EmbeddingStore,
    model: &ClusterModel,
    assignments: &[Assignment],
) -> Result<(), String> {
    for a in assignments {
        let v = store
            .get(&a.image_id)
            .ok_or_else(|| format!("no vector for {}", a.image_id))?;
        let mut best = 0u32;
        let mut best_sim = f64::NEG_INFINITY;
        for c in 0..model.k {
            let sim = dot_mixed(model.centroid(c), v);
            if sim > best_sim {
                best_sim = sim;
                best = c as u32;
            }
        }
        if best != a.cluster_id {
            return Err(format!(
                "{} assigned to {} but argmax is {best}",
                a.image_id, a.cluster_id
            ));
        }
    }
    Ok(())
}
