//! Per-image embedding vectors: ingest, normalization, and exact cosine math.
//!
//! Vectors are unit-normalized at ingest so cosine similarity reduces to a
//! dot product, which clustering and dedup then share. The on-disk format is
//! little-endian binary: magic `DFEMB1`, u32 dimension, u64 count, then per
//! record a u16 id length, the id bytes, and the f32 components.
//!
//! Dot products and norms accumulate in f64; at dimension >= 256 the
//! accumulation switches to pairwise splitting to bound drift.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const EMBED_MAGIC: &[u8; 6] = b"DFEMB1";

/// Sequential accumulation below this dimension, pairwise at or above it.
const PAIRWISE_MIN_DIM: usize = 256;
/// Leaf size for the pairwise split.
const PAIRWISE_LEAF: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file {path} is invalid: {detail}")]
    BadFormat { path: String, detail: String },
    #[error("embedding count mismatch in {path}: header says {header}, found {found}")]
    CountMismatch {
        path: String,
        header: u64,
        found: u64,
    },
    #[error("degenerate zero-norm embedding for image {image_id:?}")]
    ZeroVector { image_id: String },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("duplicate embedding for image {image_id:?}")]
    DuplicateId { image_id: String },
}

/// A unit-norm feature vector keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub image_id: String,
    pub vector: Vec<f32>,
}

fn sum_pairwise(terms: &mut dyn FnMut(usize) -> f64, start: usize, len: usize) -> f64 {
    if len <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for i in start..start + len {
            acc += terms(i);
        }
        acc
    } else {
        let half = len / 2;
        sum_pairwise(terms, start, half) + sum_pairwise(terms, start + half, len - half)
    }
}

fn accumulate(terms: &mut dyn FnMut(usize) -> f64, len: usize) -> f64 {
    if len < PAIRWISE_MIN_DIM {
        let mut acc = 0.0;
        for i in 0..len {
            acc += terms(i);
        }
        acc
    } else {
        sum_pairwise(terms, 0, len)
    }
}

/// Squared L2 norm in f64.
pub fn norm_sq(v: &[f32]) -> f64 {
    accumulate(&mut |i| v[i] as f64 * v[i] as f64, v.len())
}

fn dot_unchecked(a: &[f32], b: &[f32]) -> f64 {
    accumulate(&mut |i| a[i] as f64 * b[i] as f64, a.len())
}

/// Dot of a f64 centroid against a f32 point, same accumulation scheme.
pub fn dot_mixed(centroid: &[f64], v: &[f32]) -> f64 {
    debug_assert_eq!(centroid.len(), v.len());
    accumulate(&mut |i| centroid[i] * v[i] as f64, v.len())
}

/// Scales a vector to unit L2 norm. Zero vectors are degenerate.
pub fn normalize(vector: &[f32]) -> Result<Vec<f32>, EmbedError> {
    normalize_for("", vector)
}

fn normalize_for(image_id: &str, vector: &[f32]) -> Result<Vec<f32>, EmbedError> {
    let norm = norm_sq(vector).sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector {
            image_id: image_id.to_string(),
        });
    }
    Ok(vector.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

/// Cosine similarity of two unit vectors: their dot product, clamped to
/// [-1, 1] to absorb rounding.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot_unchecked(a, b).clamp(-1.0, 1.0))
}

/// Immutable store of unit-norm embeddings with O(1) id lookup.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id_at(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn vector_at(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.index.get(image_id).map(|&row| self.vector_at(row))
    }

    /// Normalizes and inserts a raw vector.
    pub fn insert(&mut self, image_id: String, vector: &[f32]) -> Result<(), EmbedError> {
        let unit = normalize_for(&image_id, vector)?;
        self.push(image_id, unit)
    }

    /// Inserts an already-normalized vector. Single-writer: used by ingest
    /// and file loading only.
    fn push(&mut self, image_id: String, vector: Vec<f32>) -> Result<(), EmbedError> {
        if vector.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                left: self.dim,
                right: vector.len(),
            });
        }
        if self.index.contains_key(&image_id) {
            return Err(EmbedError::DuplicateId { image_id });
        }
        self.index.insert(image_id.clone(), self.ids.len());
        self.ids.push(image_id);
        self.vectors.extend_from_slice(&vector);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        (0..self.len()).map(|row| (self.id_at(row), self.vector_at(row)))
    }
}

/// Report from ingesting an embedding file against a catalog.
#[derive(Debug, Default, Clone)]
pub struct EmbedIngestReport {
    /// Ids present in the file but absent from the catalog.
    pub rejected_ids: Vec<String>,
}

struct RawReader<R> {
    inner: R,
    path: String,
}

impl<R: Read> RawReader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), EmbedError> {
        self.inner
            .read_exact(buf)
            .map_err(|source| EmbedError::Io {
                path: self.path.clone(),
                source,
            })
    }

    fn u16_le(&mut self) -> Result<u16, EmbedError> {
        let mut b = [0u8; 2];
        self.exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32_le(&mut self) -> Result<u32, EmbedError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64_le(&mut self) -> Result<u64, EmbedError> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
}

fn read_embedding_file(
    path: &Path,
    mut on_record: impl FnMut(String, Vec<f32>) -> Result<(), EmbedError>,
) -> Result<(), EmbedError> {
    let file = File::open(path).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = RawReader {
        inner: BufReader::new(file),
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 6];
    r.exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(EmbedError::BadFormat {
            path: r.path,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let dim = r.u32_le()? as usize;
    if dim == 0 {
        return Err(EmbedError::BadFormat {
            path: r.path,
            detail: "zero dimension".into(),
        });
    }
    let count = r.u64_le()?;
    let mut found = 0u64;
    for _ in 0..count {
        let id_len = match r.u16_le() {
            Ok(v) => v,
            Err(EmbedError::Io { path, source })
                if source.kind() == std::io::ErrorKind::UnexpectedEof =>
            {
                return Err(EmbedError::CountMismatch {
                    path,
                    header: count,
                    found,
                })
            }
            Err(e) => return Err(e),
        };
        let mut id_bytes = vec![0u8; id_len as usize];
        r.exact(&mut id_bytes)?;
        let id = String::from_utf8(id_bytes).map_err(|_| EmbedError::BadFormat {
            path: r.path.clone(),
            detail: "embedding id is not UTF-8".into(),
        })?;
        let mut raw = vec![0u8; dim * 4];
        match r.exact(&mut raw) {
            Ok(()) => {}
            Err(EmbedError::Io { path, source })
                if source.kind() == std::io::ErrorKind::UnexpectedEof =>
            {
                return Err(EmbedError::CountMismatch {
                    path,
                    header: count,
                    found,
                })
            }
            Err(e) => return Err(e),
        }
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        on_record(id, vector)?;
        found += 1;
    }
    // Trailing garbage means the header undercounts.
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(EmbedError::CountMismatch {
            path: r.path,
            header: count,
            found: found + 1,
        }),
        Err(source) => Err(EmbedError::Io {
            path: r.path,
            source,
        }),
    }
}

/// Ingests raw embeddings, normalizing every vector. Ids absent from the
/// catalog are rejected into the report rather than aborting.
pub fn ingest_embeddings(
    path: &Path,
    catalog: &HashSet<String>,
) -> Result<(EmbeddingStore, EmbedIngestReport), EmbedError> {
    let mut store: Option<EmbeddingStore> = None;
    let mut report = EmbedIngestReport::default();
    read_embedding_file(path, |id, vector| {
        let store = store.get_or_insert_with(|| EmbeddingStore::new(vector.len()));
        if !catalog.contains(&id) {
            report.rejected_ids.push(id);
            return Ok(());
        }
        let unit = normalize_for(&id, &vector)?;
        store.push(id, unit)
    })?;
    Ok((store.unwrap_or_else(|| EmbeddingStore::new(0)), report))
}

/// Loads a store previously produced by [`write_store`]. Vectors are
/// trusted to be normalized already.
pub fn read_store(path: &Path) -> Result<EmbeddingStore, EmbedError> {
    let mut store: Option<EmbeddingStore> = None;
    read_embedding_file(path, |id, vector| {
        store
            .get_or_insert_with(|| EmbeddingStore::new(vector.len()))
            .push(id, vector)
    })?;
    Ok(store.unwrap_or_else(|| EmbeddingStore::new(0)))
}

/// Persists a store in the embedding file format.
pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<(), EmbedError> {
    let io_err = |source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(EMBED_MAGIC).map_err(io_err)?;
    w.write_all(&(store.dim() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(store.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (id, vector) in store.iter() {
        let id_bytes = id.as_bytes();
        w.write_all(&(id_bytes.len() as u16).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(id_bytes).map_err(io_err)?;
        for x in vector {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}
