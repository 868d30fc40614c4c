//! C ABI over the synchronous curation kernels: resolution filtering,
//! vector normalization and similarity, semantic dedup of one cluster,
//! caption statistics, and fusion prompt assembly.
//!
//! Conventions: every function returns a `DfStatus` (or a plain value
//! for infallible queries); out-parameters are written only on
//! `DF_STATUS_OK`; strings the library returns are either borrowed
//! (valid until the owning handle is freed) or owned and must be
//! released with `df_string_free`. Handles are opaque and freed with
//! their matching `_free` function. Passing a null handle or argument
//! is reported, never dereferenced.

use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use densefuse_core::catalog;
use densefuse_core::curator::{self, DedupDecision};
use densefuse_core::embedstore;
use densefuse_core::experts::{AnnotationBundle, BoxSource, DetectionBox, OcrLine, Tag};
use densefuse_core::fusion;
use densefuse_core::stats;

/// Result of a library call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    /// Success.
    DfStatusOk = 0,
    /// A required pointer argument was null.
    DfStatusNullArgument = 1,
    /// An argument was outside its documented domain.
    DfStatusInvalidArgument = 2,
    /// A string argument was not valid UTF-8.
    DfStatusBadUtf8 = 3,
    /// A vector had zero norm where a direction was required.
    DfStatusZeroVector = 4,
    /// Two vectors disagreed on dimension.
    DfStatusDimensionMismatch = 5,
    /// The bundle cannot be rendered into the prompt grammar.
    DfStatusBadBundle = 6,
    /// An index was out of range for the handle's contents.
    DfStatusOutOfRange = 7,
    /// The operation panicked or failed internally.
    DfStatusInternal = 8,
}

use DfStatus::*;

/// Which prompt template to render.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfPromptKind {
    DfPromptMetaGpt4v = 0,
    DfPromptEngine = 1,
}

/// Character, word, and sentence counts for one caption.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DfCaptionStats {
    pub char_count: u64,
    pub word_count: u64,
    pub sentence_count: u64,
}

/// Library version, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Resolution filter: nonzero iff min(width, height) >= min_short_edge.
#[no_mangle]
pub extern "C" fn df_filter_resolution(width_px: u32, height_px: u32, min_short_edge_px: u32) -> bool {
    let record = catalog::ImageRecord {
        id: String::new(),
        uri: String::new(),
        width_px,
        height_px,
        web_caption: String::new(),
        stage: catalog::Stage::Ingested,
    };
    catalog::filter_resolution(&record, min_short_edge_px)
}

/// Normalizes `vector` (length `len`) to unit L2 norm in place.
///
/// # Safety
/// `vector` must point to `len` readable and writable floats.
#[no_mangle]
pub unsafe extern "C" fn df_normalize(vector: *mut f32, len: usize) -> DfStatus {
    if vector.is_null() {
        return DfStatusNullArgument;
    }
    if len == 0 {
        return DfStatusInvalidArgument;
    }
    let slice = std::slice::from_raw_parts_mut(vector, len);
    match embedstore::normalize(slice) {
        Ok(unit) => {
            slice.copy_from_slice(&unit);
            DfStatusOk
        }
        Err(_) => DfStatusZeroVector,
    }
}

/// Cosine similarity of two vectors of length `len`, written to `out`.
///
/// # Safety
/// `a` and `b` must point to `len` readable floats; `out` must be a
/// valid pointer to one double.
#[no_mangle]
pub unsafe extern "C" fn df_cosine_similarity(
    a: *const f32,
    b: *const f32,
    len: usize,
    out: *mut f64,
) -> DfStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return DfStatusNullArgument;
    }
    if len == 0 {
        return DfStatusInvalidArgument;
    }
    let av = std::slice::from_raw_parts(a, len);
    let bv = std::slice::from_raw_parts(b, len);
    match embedstore::cosine_similarity(av, bv) {
        Ok(sim) => {
            *out = sim;
            DfStatusOk
        }
        Err(embedstore::EmbedError::ZeroVector { .. }) => DfStatusZeroVector,
        Err(_) => DfStatusDimensionMismatch,
    }
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, DfStatus> {
    if ptr.is_null() {
        return Err(DfStatusNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| DfStatusBadUtf8)
}

/// Counts characters (Unicode scalars), words, and sentences of a
/// NUL-terminated UTF-8 caption.
///
/// # Safety
/// `caption` must be a valid NUL-terminated string; `out` must point
/// to a writable `DfCaptionStats`.
#[no_mangle]
pub unsafe extern "C" fn df_count_stats(
    caption: *const c_char,
    out: *mut DfCaptionStats,
) -> DfStatus {
    if out.is_null() {
        return DfStatusNullArgument;
    }
    let text = match read_utf8(caption) {
        Ok(t) => t,
        Err(status) => return status,
    };
    let counted = stats::count_stats(text);
    *out = DfCaptionStats {
        char_count: counted.char_count,
        word_count: counted.word_count,
        sentence_count: counted.sentence_count,
    };
    DfStatusOk
}

struct Member {
    id: CString,
    vector: Vec<f32>,
    centroid_similarity: f64,
}

/// One cluster's members staged for semantic dedup.
pub struct DfDedup {
    epsilon: f64,
    dim: usize,
    members: Vec<Member>,
    decisions: Vec<DedupDecision>,
    duplicate_of: Vec<Option<CString>>,
}

/// Creates a dedup builder for vectors of dimension `dim` at the
/// given duplicate threshold. Returns null if epsilon is outside
/// (0, 1) or dim is zero.
#[no_mangle]
pub extern "C" fn df_dedup_new(epsilon: f64, dim: usize) -> *mut DfDedup {
    if !(epsilon > 0.0 && epsilon < 1.0) || dim == 0 {
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(DfDedup {
        epsilon,
        dim,
        members: Vec::new(),
        decisions: Vec::new(),
        duplicate_of: Vec::new(),
    }))
}

/// Stages one member: id, its embedding (length = dim, normalized
/// internally), and its similarity to the cluster centroid.
///
/// # Safety
/// `handle` must come from `df_dedup_new` and not be freed; `id` must
/// be NUL-terminated UTF-8; `vector` must point to `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn df_dedup_add(
    handle: *mut DfDedup,
    id: *const c_char,
    vector: *const f32,
    centroid_similarity: f64,
) -> DfStatus {
    let Some(dedup) = handle.as_mut() else {
        return DfStatusNullArgument;
    };
    let id = match read_utf8(id) {
        Ok(s) => s,
        Err(status) => return status,
    };
    if vector.is_null() {
        return DfStatusNullArgument;
    }
    if !centroid_similarity.is_finite() {
        return DfStatusInvalidArgument;
    }
    let raw = std::slice::from_raw_parts(vector, dedup.dim);
    let unit = match embedstore::normalize(raw) {
        Ok(v) => v,
        Err(_) => return DfStatusZeroVector,
    };
    let id = match CString::new(id) {
        Ok(c) => c,
        Err(_) => return DfStatusBadUtf8,
    };
    dedup.members.push(Member {
        id,
        vector: unit,
        centroid_similarity,
    });
    dedup.decisions.clear();
    dedup.duplicate_of.clear();
    DfStatusOk
}

/// Runs greedy dedup over the staged members. Decisions are then
/// readable by index in the staged order.
///
/// # Safety
/// `handle` must come from `df_dedup_new` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn df_dedup_run(handle: *mut DfDedup) -> DfStatus {
    let Some(dedup) = handle.as_mut() else {
        return DfStatusNullArgument;
    };
    let members: Vec<curator::DedupMember<'_>> = dedup
        .members
        .iter()
        .map(|m| curator::DedupMember {
            image_id: m.id.to_str().expect("validated on add"),
            vector: &m.vector,
            centroid_similarity: m.centroid_similarity,
        })
        .collect();
    let result = catch_unwind(AssertUnwindSafe(|| {
        curator::semdedup_cluster(&members, dedup.epsilon)
    }));
    match result {
        Ok(Ok(mut decisions)) => {
            // Report in the order members were staged.
            let mut by_id: std::collections::HashMap<String, usize> = decisions
                .iter()
                .enumerate()
                .map(|(i, d)| (d.image_id.clone(), i))
                .collect();
            let mut ordered = Vec::with_capacity(dedup.members.len());
            for m in &dedup.members {
                let idx = by_id
                    .remove(m.id.to_str().expect("validated on add"))
                    .expect("every member gets a decision");
                ordered.push(std::mem::replace(
                    &mut decisions[idx],
                    DedupDecision {
                        image_id: String::new(),
                        kept: false,
                        duplicate_of: None,
                    },
                ));
            }
            dedup.duplicate_of = ordered
                .iter()
                .map(|d| {
                    d.duplicate_of
                        .as_ref()
                        .map(|id| CString::new(id.as_str()).expect("ids have no interior NUL"))
                })
                .collect();
            dedup.decisions = ordered;
            DfStatusOk
        }
        Ok(Err(_)) => DfStatusInvalidArgument,
        Err(_) => DfStatusInternal,
    }
}

/// Number of decisions available after `df_dedup_run`.
///
/// # Safety
/// `handle` must come from `df_dedup_new` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn df_dedup_len(handle: *const DfDedup) -> usize {
    handle.as_ref().map_or(0, |d| d.decisions.len())
}

/// Whether the member at `index` (staged order) was kept.
///
/// # Safety
/// `handle` must come from `df_dedup_new` and not be freed; `out`
/// must point to a writable bool.
#[no_mangle]
pub unsafe extern "C" fn df_dedup_kept(
    handle: *const DfDedup,
    index: usize,
    out: *mut bool,
) -> DfStatus {
    let Some(dedup) = handle.as_ref() else {
        return DfStatusNullArgument;
    };
    if out.is_null() {
        return DfStatusNullArgument;
    }
    match dedup.decisions.get(index) {
        Some(d) => {
            *out = d.kept;
            DfStatusOk
        }
        None => DfStatusOutOfRange,
    }
}

/// Borrowed id of the member at `index`; valid until the handle is
/// freed. Null if the index is out of range.
///
/// # Safety
/// `handle` must come from `df_dedup_new` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn df_dedup_id(handle: *const DfDedup, index: usize) -> *const c_char {
    handle
        .as_ref()
        .and_then(|d| d.members.get(index))
        .map_or(ptr::null(), |m| m.id.as_ptr())
}

/// Borrowed id of the kept member this one duplicates; null when the
/// member was kept (or the index is out of range).
///
/// # Safety
/// `handle` must come from `df_dedup_new` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn df_dedup_duplicate_of(
    handle: *const DfDedup,
    index: usize,
) -> *const c_char {
    handle
        .as_ref()
        .and_then(|d| d.duplicate_of.get(index))
        .and_then(|dup| dup.as_ref())
        .map_or(ptr::null(), |id| id.as_ptr())
}

/// Releases a dedup handle.
///
/// # Safety
/// `handle` must come from `df_dedup_new` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn df_dedup_free(handle: *mut DfDedup) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Annotation bundle under construction for prompt assembly.
pub struct DfBundle {
    inner: AnnotationBundle,
}

/// Creates an empty bundle for one image.
///
/// # Safety
/// `image_id` must be NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn df_bundle_new(image_id: *const c_char) -> *mut DfBundle {
    let Ok(id) = read_utf8(image_id) else {
        return ptr::null_mut();
    };
    Box::into_raw(Box::new(DfBundle {
        inner: AnnotationBundle {
            image_id: id.to_string(),
            tags: Vec::new(),
            boxes: Vec::new(),
            ocr: Vec::new(),
            world_knowledge: String::new(),
        },
    }))
}

/// Sets the world-knowledge line (the raw web caption).
///
/// # Safety
/// `handle` must come from `df_bundle_new` and not be freed; `text`
/// must be NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn df_bundle_set_world_knowledge(
    handle: *mut DfBundle,
    text: *const c_char,
) -> DfStatus {
    let Some(bundle) = handle.as_mut() else {
        return DfStatusNullArgument;
    };
    match read_utf8(text) {
        Ok(t) => {
            bundle.inner.world_knowledge = t.to_string();
            DfStatusOk
        }
        Err(status) => status,
    }
}

/// Appends a tag.
///
/// # Safety
/// `handle` must come from `df_bundle_new` and not be freed; `name`
/// must be NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn df_bundle_add_tag(
    handle: *mut DfBundle,
    name: *const c_char,
    score: f64,
) -> DfStatus {
    let Some(bundle) = handle.as_mut() else {
        return DfStatusNullArgument;
    };
    let name = match read_utf8(name) {
        Ok(n) => n,
        Err(status) => return status,
    };
    if !(0.0..=1.0).contains(&score) {
        return DfStatusInvalidArgument;
    }
    bundle.inner.tags.push(Tag {
        name: name.to_string(),
        score,
    });
    DfStatusOk
}

/// Appends a detection box with pixel corners (x1, y1) inclusive-left
/// and (x2, y2) exclusive-right; x2 > x1 and y2 > y1 are required.
///
/// # Safety
/// `handle` must come from `df_bundle_new` and not be freed; `label`
/// must be NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn df_bundle_add_box(
    handle: *mut DfBundle,
    label: *const c_char,
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
    confidence: f64,
    open_set: bool,
) -> DfStatus {
    let Some(bundle) = handle.as_mut() else {
        return DfStatusNullArgument;
    };
    let label = match read_utf8(label) {
        Ok(l) => l,
        Err(status) => return status,
    };
    if x2 <= x1 || y2 <= y1 || !(0.0..=1.0).contains(&confidence) {
        return DfStatusInvalidArgument;
    }
    bundle.inner.boxes.push(DetectionBox {
        label: label.to_string(),
        bbox: [x1, y1, x2, y2],
        confidence,
        source: if open_set {
            BoxSource::OpenSet
        } else {
            BoxSource::ClosedSet
        },
    });
    DfStatusOk
}

/// Appends an OCR line; pass `has_bbox = false` to omit coordinates.
///
/// # Safety
/// `handle` must come from `df_bundle_new` and not be freed; `text`
/// must be NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn df_bundle_add_ocr(
    handle: *mut DfBundle,
    text: *const c_char,
    has_bbox: bool,
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
    confidence: f64,
) -> DfStatus {
    let Some(bundle) = handle.as_mut() else {
        return DfStatusNullArgument;
    };
    let text = match read_utf8(text) {
        Ok(t) => t,
        Err(status) => return status,
    };
    if !(0.0..=1.0).contains(&confidence) || (has_bbox && (x2 <= x1 || y2 <= y1)) {
        return DfStatusInvalidArgument;
    }
    bundle.inner.ocr.push(OcrLine {
        text: text.to_string(),
        bbox: has_bbox.then_some([x1, y1, x2, y2]),
        confidence,
    });
    DfStatusOk
}

/// Renders the bundle into a prompt of the requested kind. On
/// success, `*out` receives an owned NUL-terminated string; release
/// it with `df_string_free`.
///
/// # Safety
/// `handle` must come from `df_bundle_new` and not be freed; `out`
/// must point to a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn df_prompt_assemble(
    handle: *const DfBundle,
    kind: DfPromptKind,
    out: *mut *mut c_char,
) -> DfStatus {
    let Some(bundle) = handle.as_ref() else {
        return DfStatusNullArgument;
    };
    if out.is_null() {
        return DfStatusNullArgument;
    }
    let kind = match kind {
        DfPromptKind::DfPromptMetaGpt4v => fusion::PromptKind::MetaGpt4v,
        DfPromptKind::DfPromptEngine => fusion::PromptKind::Engine,
    };
    let result = catch_unwind(AssertUnwindSafe(|| fusion::assemble(&bundle.inner, kind)));
    match result {
        Ok(Ok(prompt)) => match CString::new(prompt.text) {
            Ok(c) => {
                *out = c.into_raw();
                DfStatusOk
            }
            Err(_) => DfStatusInternal,
        },
        Ok(Err(_)) => DfStatusBadBundle,
        Err(_) => DfStatusInternal,
    }
}

/// Releases a bundle handle.
///
/// # Safety
/// `handle` must come from `df_bundle_new` and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn df_bundle_free(handle: *mut DfBundle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Releases a string returned via an out-parameter.
///
/// # Safety
/// `s` must have been produced by this library and not already freed.
#[no_mangle]
pub unsafe extern "C" fn df_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
